#pragma once

// Adam with linear warmup followed by inverse-square-root decay, and
// global gradient-norm clipping.

#include "htrner/autograd.hpp"

#include <cmath>
#include <vector>

namespace htrner {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Multiplier on the base rate at 1-based step t.
inline double schedule_factor(int t, int warmup) {
  if (t < 1) return 0.0;
  if (warmup <= 0) return 1.0;
  if (t <= warmup) return static_cast<double>(t) / warmup;
  return std::sqrt(static_cast<double>(warmup) / t);
}

template <class T>
double global_grad_norm(const std::vector<Parameter<T>*>& params) {
  double s = 0;
  for (const auto* p : params)
    for (T g : p->grad.data) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Parameter<T>*>& params, OptimizerConfig cfg) : cfg_(cfg) {
    for (const auto* p : params) {
      m_.emplace_back(p->value.size(), T(0));
      v_.emplace_back(p->value.size(), T(0));
    }
  }

  int step_count() const { return t_; }
  void set_step_count(int t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  double current_rate() const { return cfg_.learning_rate * schedule_factor(t_, cfg_.warmup_steps); }

  // Clips, updates and returns the pre-clip gradient norm.
  double step(const std::vector<Parameter<T>*>& params) {
    const double norm = global_grad_norm(params);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double lr = current_rate();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const T g = p.grad[i] * static_cast<T>(clip);
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p.value[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return norm;
  }

 private:
  OptimizerConfig cfg_;
  int t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace htrner
