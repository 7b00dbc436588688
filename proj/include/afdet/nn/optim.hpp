#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "afdet/common.hpp"
#include "afdet/nn/layers.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

inline constexpr double kDefaultBaseLr = 0.015;
inline constexpr double kDefaultLrGamma = 0.1;
inline constexpr double kDefaultMomentum = 0.9;
inline constexpr double kDefaultWeightDecay = 0.0004;
inline constexpr double kDefaultEmaDecay = 0.9998;

inline std::vector<std::int64_t> default_lr_milestones() {
  return {11250, 13750};
}

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
template <typename T>
void sgd_step(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& velocity,
              double lr, double momentum, double weight_decay) {
  check_same_shape(param, grad, "sgd_step");
  check_same_shape(param, velocity, "sgd_step");
  const T m = T(momentum), wd = T(weight_decay), step = T(lr);
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    velocity[i] = m * velocity[i] + grad[i] + wd * param[i];
    param[i] -= step * velocity[i];
  }
}

template <typename T>
void sgd_step(const std::vector<ParamT<T>*>& params, double lr,
              double momentum = kDefaultMomentum,
              double weight_decay = kDefaultWeightDecay) {
  for (ParamT<T>* p : params)
    sgd_step(p->value, p->grad, p->velocity, lr, momentum, weight_decay);
}

// Piecewise-constant schedule: base_lr * gamma^(milestones passed).
inline double lr_schedule(std::int64_t iter, double base_lr,
                          const std::vector<std::int64_t>& milestones,
                          double gamma) {
  require(base_lr > 0.0, "lr_schedule: base_lr must be positive");
  int passed = 0;
  std::int64_t prev = -1;
  for (const std::int64_t m : milestones) {
    require(m > prev, "lr_schedule: milestones must be strictly ascending");
    prev = m;
    if (iter >= m) ++passed;
  }
  return base_lr * std::pow(gamma, passed);
}

// Eq. 4 exponential moving average of the trainable parameters. Shadows are
// read at evaluation time and never feed back into training.
template <typename T>
struct EmaStateT {
  double decay = kDefaultEmaDecay;
  std::vector<TensorT<T>> shadow;

  void init_from(const std::vector<ParamT<T>*>& params) {
    shadow.clear();
    shadow.reserve(params.size());
    for (const ParamT<T>* p : params) shadow.push_back(p->value);
  }

  bool empty() const { return shadow.empty(); }
};

using EmaState = EmaStateT<float>;

// shadow <- decay*shadow + (1-decay)*param, elementwise. decay=1 freezes the
// shadow and decay=0 copies the parameters; training uses values in [0,1).
template <typename T>
void ema_update(EmaStateT<T>& state, const std::vector<ParamT<T>*>& params) {
  require(state.decay >= 0.0 && state.decay <= 1.0,
          "ema_update: decay must lie in [0,1]");
  require(state.shadow.size() == params.size(),
          "ema_update: shadow count does not match parameters");
  const T d = T(state.decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorT<T>& s = state.shadow[i];
    const TensorT<T>& p = params[i]->value;
    check_same_shape(s, p, "ema_update");
    for (std::int64_t j = 0; j < s.numel(); ++j)
      s[j] = d * s[j] + (T(1) - d) * p[j];
  }
}

// Swaps parameter values with the EMA shadows (call again to restore).
template <typename T>
void ema_swap(EmaStateT<T>& state, const std::vector<ParamT<T>*>& params) {
  require(state.shadow.size() == params.size(),
          "ema_swap: shadow count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    check_same_shape(state.shadow[i], params[i]->value, "ema_swap");
    std::swap(state.shadow[i], params[i]->value);
  }
}

}  // namespace afdet::nn
