#pragma once

#include "htrner/record.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace htrner {

enum class PositionalEncoding { a2dpe, one_d };
enum class AttentionScale { sqrt, hidden };

inline std::string to_string(PositionalEncoding p) { return p == PositionalEncoding::a2dpe ? "a2dpe" : "1d"; }
inline std::string to_string(AttentionScale s) { return s == AttentionScale::sqrt ? "sqrt" : "hidden"; }

inline PositionalEncoding parse_positional_encoding(const std::string& s) {
  if (s == "a2dpe") return PositionalEncoding::a2dpe;
  if (s == "1d") return PositionalEncoding::one_d;
  throw ConfigError("unknown positional_encoding '" + s + "' (expected a2dpe|1d)");
}
inline AttentionScale parse_attention_scale(const std::string& s) {
  if (s == "sqrt") return AttentionScale::sqrt;
  if (s == "hidden") return AttentionScale::hidden;
  throw ConfigError("unknown attention_scale '" + s + "' (expected sqrt|hidden)");
}

struct BackboneConfig {
  // "toy": stride-2 stem + four stride-2 residual stages.
  // "resnet50": 7x7 stem, max pool, bottleneck stages [3, 4, 6, 3], 2048 channels.
  std::string kind = "toy";
  int stem_channels = 16;
  std::vector<int> stage_channels{16, 32, 64, 128};
  int blocks_per_stage = 1;
  int norm_groups = 4;

  int output_channels() const { return kind == "resnet50" ? 2048 : stage_channels.back(); }
};

// Injected defects used by the selftest mutation fixtures; never serialized.
struct FaultInjection {
  bool flip_position_sign = false;
  bool causal_off_by_one = false;
};

struct ModelConfig {
  int hidden = 256;
  int heads = 1;
  int layers = 2;
  int feedforward = 0;  // 0 means 4 * hidden
  double dropout = 0.1;
  int max_decode_len = 600;
  AttentionScale attention_scale = AttentionScale::sqrt;
  PositionalEncoding positional_encoding = PositionalEncoding::a2dpe;
  int image_height = 256;
  int image_width = 1024;
  BackboneConfig backbone;
  FaultInjection faults;

  int ff_width() const { return feedforward > 0 ? feedforward : 4 * hidden; }

  void validate() const {
    if (hidden <= 0 || hidden % 2) throw ConfigError("hidden must be a positive even number");
    if (heads <= 0 || hidden % heads) throw ConfigError("hidden must be divisible by heads");
    if (layers <= 0) throw ConfigError("layers must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (max_decode_len < 2) throw ConfigError("max_decode_len must be at least 2");
    if (image_height <= 0 || image_width <= 0 || image_height % 32 || image_width % 32)
      throw ConfigError("image size must be a positive multiple of 32");
    if (backbone.kind != "toy" && backbone.kind != "resnet50") throw ConfigError("unknown backbone kind '" + backbone.kind + "'");
    if (backbone.kind == "toy") {
      if (backbone.stage_channels.size() != 4) throw ConfigError("toy backbone needs exactly 4 stage widths");
      if (backbone.blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be positive");
      if (backbone.stem_channels % backbone.norm_groups) throw ConfigError("stem width not divisible by norm_groups");
      for (int c : backbone.stage_channels)
        if (c <= 0 || c % backbone.norm_groups) throw ConfigError("stage widths must be positive multiples of norm_groups");
    }
  }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& b) {
  j = nlohmann::json{{"kind", b.kind},
                     {"stem_channels", b.stem_channels},
                     {"stage_channels", b.stage_channels},
                     {"blocks_per_stage", b.blocks_per_stage},
                     {"norm_groups", b.norm_groups}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& b) {
  b.kind = j.value("kind", b.kind);
  b.stem_channels = j.value("stem_channels", b.stem_channels);
  if (j.contains("stage_channels")) j.at("stage_channels").get_to(b.stage_channels);
  b.blocks_per_stage = j.value("blocks_per_stage", b.blocks_per_stage);
  b.norm_groups = j.value("norm_groups", b.norm_groups);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = nlohmann::json{{"hidden", m.hidden},
                     {"heads", m.heads},
                     {"layers", m.layers},
                     {"feedforward", m.ff_width()},
                     {"dropout", m.dropout},
                     {"max_decode_len", m.max_decode_len},
                     {"attention_scale", to_string(m.attention_scale)},
                     {"positional_encoding", to_string(m.positional_encoding)},
                     {"image_height", m.image_height},
                     {"image_width", m.image_width},
                     {"backbone", m.backbone}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  m.hidden = j.value("hidden", m.hidden);
  m.heads = j.value("heads", m.heads);
  m.layers = j.value("layers", m.layers);
  m.feedforward = j.value("feedforward", m.feedforward);
  m.dropout = j.value("dropout", m.dropout);
  m.max_decode_len = j.value("max_decode_len", m.max_decode_len);
  if (j.contains("attention_scale")) m.attention_scale = parse_attention_scale(j.at("attention_scale").get<std::string>());
  if (j.contains("positional_encoding"))
    m.positional_encoding = parse_positional_encoding(j.at("positional_encoding").get<std::string>());
  m.image_height = j.value("image_height", m.image_height);
  m.image_width = j.value("image_width", m.image_width);
  if (j.contains("backbone")) j.at("backbone").get_to(m.backbone);
}

}  // namespace htrner
