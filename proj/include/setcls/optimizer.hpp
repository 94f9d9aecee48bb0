#pragma once

#include "setcls/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace setcls {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Only read by kSgd; 0 gives plain gradient descent.
  double momentum = 0.9;
};

template <typename T>
struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig cfg) : config(cfg) {}
};

// Applies one update from the accumulated gradients. Gradients are left in
// place; callers zero them before the next accumulation.
template <typename T>
inline void optimizer_step(OptimizerState<T>& state, std::type_identity_t<std::span<Parameter<T>* const>> params) {
  if (state.first_moment.empty()) {
    for (const Parameter<T>* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("optimizer_step: parameter list changed since the first step");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = *params[i];
    if (p.grad.size() != p.value.size() || p.grad.shape() != p.value.shape()) {
      throw std::invalid_argument("optimizer_step: missing gradient for parameter '" + p.name + "'");
    }
    if (state.first_moment[i].shape() != p.value.shape()) {
      throw std::invalid_argument("optimizer_step: moment buffer shape mismatch for '" + p.name + "'");
    }
  }

  ++state.step;
  const OptimizerConfig& c = state.config;
  const T lr = static_cast<T>(c.learning_rate);
  if (c.kind == OptimizerKind::kSgd) {
    const T mu = static_cast<T>(c.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto velocity = state.first_moment[i].mat();
      velocity = mu * velocity + params[i]->grad.mat();
      params[i]->value.mat() -= lr * velocity;
    }
    return;
  }

  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(c.beta1);
  const T b2 = static_cast<T>(c.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
  const T correction2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = state.first_moment[i].mat();
    auto v = state.second_moment[i].mat();
    const auto g = params[i]->grad.mat();
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    params[i]->value.mat().array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
}

template <typename T>
inline void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) p->zero_grad();
}

}  // namespace setcls
