// Bias-corrected Adam. Operates in place on leaf tensors; moments are kept
// per parameter in an external state object so the same routine serves both
// network training and bound tightening.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "aclip/tensor.hpp"

namespace aclip {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::size_t step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void reset(const std::vector<Tensor<T>>& params) {
    step_count = 0;
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].size(), 0.0);
      v[i].assign(params[i].size(), 0.0);
    }
  }
};

// One Adam update over a parameter list with explicit gradients.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params,
               const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (params.size() != grads.size())
    throw shape_error("adam_step: parameter/gradient count mismatch");
  if (state.m.size() != params.size()) state.reset(params);
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].values_mut();
    const auto& g = grads[p];
    if (g.size() != values.size())
      throw shape_error("adam_step: gradient shape mismatch at parameter " +
                        std::to_string(p));
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) -
                                 lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

// Convenience form reading gradients accumulated on the parameters.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state, lr, cfg);
}

}  // namespace aclip
