#pragma once

// Central finite-difference checks of tape gradients.

#include "htrner/model.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace htrner {

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// loss(with_backward) evaluates the scalar loss; when with_backward is true it
// must also run backward so parameter gradients are populated. Up to
// per_param entries with |grad| >= min_grad are sampled from each parameter.
inline std::vector<GradCheckEntry> finite_difference_check(const std::vector<Parameter<double>*>& params,
                                                           const std::function<double(bool)>& loss, Rng& rng, int per_param,
                                                           double eps = 1e-6, double min_grad = 1e-6) {
  for (auto* p : params) p->zero_grad();
  loss(true);
  std::vector<GradCheckEntry> out;
  for (auto* p : params) {
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < p->grad.size(); ++i)
      if (std::abs(p->grad[i]) >= min_grad) cand.push_back(i);
    rng.shuffle(cand.begin(), cand.end());
    if (static_cast<int>(cand.size()) > per_param) cand.resize(static_cast<std::size_t>(per_param));
    for (std::size_t i : cand) {
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double lp = loss(false);
      p->value[i] = keep - eps;
      const double lm = loss(false);
      p->value[i] = keep;
      GradCheckEntry e{p->name, i, p->grad[i], (lp - lm) / (2 * eps), 0};
      e.rel_error = relative_error(e.analytic, e.numeric);
      out.push_back(e);
    }
  }
  return out;
}

// Loss closure for a model and a fixed batch, without dropout.
inline std::function<double(bool)> model_loss_fn(HtrNerModel<double>& m, const std::vector<Sample>& batch) {
  return [&m, batch](bool with_backward) {
    Tape<double> tp(with_backward);
    Var l = m.loss(tp, batch, Vocab::kPad);
    if (with_backward) tp.backward(l);
    return tp.value(l)[0];
  };
}

}  // namespace htrner
