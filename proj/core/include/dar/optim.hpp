#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dar/tensor.hpp"

namespace dar {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2: weight_decay * param is added to the gradient.
  double weight_decay = 0.0;
};

/// First and second moment buffers for one parameter plus the shared step count.
template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  long step = 0;
};

/// One Adam update with bias correction, applied in place to `params`.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const AdamOptions& opt) {
  if (!(opt.lr > 0.0)) throw ConfigError("lr", "learning rate must be positive");
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient length does not match parameters");
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: moment buffers do not match parameter length");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T step_size = static_cast<T>(opt.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(opt.eps), wd = static_cast<T>(opt.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i] + wd * params[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i] * inv_c2) + eps);
  }
}

/// Adam over a fixed list of parameter tensors. Parameters whose
/// requires_grad flag is off, or that received no gradient, are skipped.
template <typename T>
class Adam {
 public:
  Adam(std::vector<BasicTensor<T>> params, AdamOptions options)
      : params_(std::move(params)), states_(params_.size()), options_(options) {
    if (!(options_.lr > 0.0)) throw ConfigError("lr", "learning rate must be positive");
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      adam_step<T>(p.data(), p.grad(), states_[i], options_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamOptions& options() const { return options_; }

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<AdamState<T>> states_;
  AdamOptions options_;
};

}  // namespace dar
