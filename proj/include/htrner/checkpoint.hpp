#pragma once

// Binary checkpoint:
//   "HTRNERCK" | u32 version | u64 header bytes | JSON header | payload
// The payload holds every parameter as little-endian float32 in header
// order, followed by the optimizer's first and second moments when present.
// Loading validates the whole file before any model is returned.

#include "htrner/training.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace htrner {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'H', 'T', 'R', 'N', 'E', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Vocab vocab;
  HtrNerModel<float> model;
  bool has_optimizer = false;
  Adam<float> optimizer;
  Scenario scenario = Scenario::one_stage;
  ScenarioConfig scenario_config;
  TrainCursor cursor;
  bool finished = true;
};

namespace detail {

template <class U>
void put(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

inline void put_floats(std::string& out, const std::vector<float>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  auto& model = const_cast<HtrNerModel<float>&>(ck.model);
  const auto params = model.parameters();
  nlohmann::json plist = nlohmann::json::array();
  std::size_t floats = 0;
  for (const auto* p : params) {
    plist.push_back({{"name", p->name}, {"shape", p->value.shape}});
    floats += p->value.size();
  }
  if (ck.has_optimizer) floats *= 3;
  nlohmann::json header{{"format_version", kCheckpointVersion},
                        {"model", ck.model.config()},
                        {"vocab", ck.vocab.to_json()},
                        {"vocab_fingerprint", ck.vocab.fingerprint()},
                        {"params", plist},
                        {"optimizer", {{"present", ck.has_optimizer}, {"step", ck.has_optimizer ? ck.optimizer.step_count() : 0}}},
                        {"cursor", {{"scenario", to_string(ck.scenario)}, {"phase", ck.cursor.phase}, {"step", ck.cursor.step}}},
                        {"finished", ck.finished},
                        {"scenario_config", ck.scenario_config},
                        {"payload_bytes", floats * sizeof(float)}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(hs.size()));
  out += hs;
  for (const auto* p : params) detail::put_floats(out, p->value.data);
  if (ck.has_optimizer) {
    for (const auto& m : ck.optimizer.first_moments()) detail::put_floats(out, m);
    for (const auto& v : ck.optimizer.second_moments()) detail::put_floats(out, v);
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write '" + tmp + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

// expected_fingerprint, when non-empty, must match the stored vocabulary.
inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& expected_fingerprint = {}) {
  const std::size_t fixed = sizeof(kCheckpointMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  std::memcpy(&version, bytes.data() + 8, sizeof(version));
  std::memcpy(&hlen, bytes.data() + 12, sizeof(hlen));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (hlen > bytes.size() - fixed) throw CheckpointError("checkpoint header length exceeds file size");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(fixed, hlen));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (h.at("format_version").get<std::uint32_t>() != version) throw CheckpointError("header version disagrees with file version");
    ck.vocab = Vocab::from_json(h.at("vocab"));
    const std::string fp = h.at("vocab_fingerprint").get<std::string>();
    if (fp != ck.vocab.fingerprint()) throw CheckpointError("stored vocabulary does not match its fingerprint");
    if (!expected_fingerprint.empty() && fp != expected_fingerprint)
      throw CheckpointError("vocabulary fingerprint mismatch: checkpoint " + fp + ", expected " + expected_fingerprint);
    ModelConfig mc = h.at("model").get<ModelConfig>();
    ck.model = HtrNerModel<float>(mc, ck.vocab.size(), 0);
    ck.has_optimizer = h.at("optimizer").at("present").get<bool>();
    const auto& cur = h.at("cursor");
    ck.scenario = parse_scenario(cur.at("scenario").get<std::string>());
    ck.cursor = {cur.at("phase").get<int>(), cur.at("step").get<int>()};
    ck.finished = h.at("finished").get<bool>();
    ck.scenario_config = h.at("scenario_config").get<ScenarioConfig>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("invalid checkpoint header: ") + e.what());
  }

  auto params = ck.model.parameters();
  const auto& plist = h.at("params");
  if (plist.size() != params.size())
    throw CheckpointError("checkpoint has " + std::to_string(plist.size()) + " parameters, model expects " + std::to_string(params.size()));
  std::size_t floats = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = plist[i].at("name").get<std::string>();
    const auto shape = plist[i].at("shape").get<std::vector<int>>();
    if (name != params[i]->name || shape != params[i]->value.shape)
      throw CheckpointError("parameter " + std::to_string(i) + " is " + name + " " + shape_str(shape) + ", model expects " +
                            params[i]->name + " " + shape_str(params[i]->value.shape));
    floats += params[i]->value.size();
  }
  const std::size_t expected = floats * (ck.has_optimizer ? 3 : 1) * sizeof(float);
  if (h.at("payload_bytes").get<std::size_t>() != expected || bytes.size() - fixed - hlen != expected)
    throw CheckpointError("corrupt payload: expected " + std::to_string(expected) + " bytes, found " +
                          std::to_string(bytes.size() - fixed - hlen));

  const char* p = bytes.data() + fixed + hlen;
  auto read = [&p](std::vector<float>& dst, std::size_t n) {
    dst.resize(n);
    std::memcpy(dst.data(), p, n * sizeof(float));
    p += n * sizeof(float);
  };
  for (auto* prm : params) read(prm->value.data, prm->value.size());
  if (ck.has_optimizer) {
    ck.optimizer = Adam<float>(params, ck.scenario_config.optimizer);
    ck.optimizer.set_step_count(h.at("optimizer").at("step").get<int>());
    for (std::size_t i = 0; i < params.size(); ++i) read(ck.optimizer.first_moments()[i], params[i]->value.size());
    for (std::size_t i = 0; i < params.size(); ++i) read(ck.optimizer.second_moments()[i], params[i]->value.size());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_fingerprint = {}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, expected_fingerprint);
}

inline Checkpoint checkpoint_from_state(const TrainState& st, const Vocab& v, const ScenarioConfig& sc) {
  Checkpoint ck;
  ck.vocab = v;
  ck.model = st.model;
  ck.has_optimizer = true;
  ck.optimizer = st.optimizer;
  ck.scenario = sc.scenario;
  ck.scenario_config = sc;
  ck.cursor = st.cursor;
  ck.finished = st.finished;
  return ck;
}

}  // namespace htrner
