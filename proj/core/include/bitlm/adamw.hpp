#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bitlm/graph.hpp"

namespace bitlm {

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

/// First and second moment estimates, one pair per parameter, plus the
/// number of completed steps (used for bias correction).
template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One decoupled-weight-decay Adam update:
///   p <- p - lr * wd * p
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are lazily sized on the first call. `lr` overrides `hyper.lr` so
/// that warmup schedules do not need to copy the hyperparameters.
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params,
                std::span<const Tensor<T>* const> grads, AdamState<T>& state,
                const AdamWHyper& hyper, double lr);

/// Convenience overload over parameters that carry their own gradients.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamState<T>& state,
                const AdamWHyper& hyper, double lr);

}  // namespace bitlm
