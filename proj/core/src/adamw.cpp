#include "bitlm/adamw.hpp"

#include <cmath>
#include <string>

namespace bitlm {

template <typename T>
void adamw_step(std::span<Tensor<T>* const> params,
                std::span<const Tensor<T>* const> grads, AdamState<T>& state,
                const AdamWHyper& hyper, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamw: parameter and gradient counts differ");
  }
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adamw: optimizer state holds " +
                         std::to_string(state.m.size()) + " slots for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i])) {
      throw DimensionError("adamw: shape mismatch at parameter " + std::to_string(i) +
                           ": " + shape_str(params[i]->shape()) + " vs " +
                           shape_str(grads[i]->shape()));
    }
  }

  state.step += 1;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = lr * hyper.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + hyper.eps);
      const double pj = static_cast<double>(p[j]);
      p[j] = static_cast<T>(pj - decay * pj - lr * update);
    }
  }
}

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamState<T>& state,
                const AdamWHyper& hyper, double lr) {
  std::vector<Tensor<T>*> values;
  std::vector<const Tensor<T>*> grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (Parameter<T>* p : params) {
    if (!p->grad.same_shape(p->value)) p->zero_grad();
    values.push_back(&p->value);
    grads.push_back(&p->grad);
  }
  adamw_step<T>(std::span<Tensor<T>* const>(values),
                std::span<const Tensor<T>* const>(grads), state, hyper, lr);
}

template void adamw_step<float>(std::span<Tensor<float>* const>,
                                std::span<const Tensor<float>* const>,
                                AdamState<float>&, const AdamWHyper&, double);
template void adamw_step<double>(std::span<Tensor<double>* const>,
                                 std::span<const Tensor<double>* const>,
                                 AdamState<double>&, const AdamWHyper&, double);
template void adamw_step<float>(std::span<Parameter<float>* const>,
                                AdamState<float>&, const AdamWHyper&, double);
template void adamw_step<double>(std::span<Parameter<double>* const>,
                                 AdamState<double>&, const AdamWHyper&, double);

}  // namespace bitlm
