#include "bitlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace bitlm {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
void Graph<T>::backward(Value<T> loss) {
  if (backward_done_) {
    throw std::logic_error("backward called twice on the same graph");
  }
  if (!recording()) throw std::logic_error("backward on an inference graph");
  if (value(loss).size() != 1) {
    throw DimensionError("backward expects a scalar loss, got " +
                         shape_str(value(loss).shape()));
  }
  backward_done_ = true;
  Tensor<T>* seed = grad_sink(loss);
  if (seed == nullptr) return;
  (*seed)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      const Parameter<T>& p = *n.param;
      if (!p.grad.same_shape(p.value)) p.grad = Tensor<T>(p.value.shape());
      for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad[j] += n.grad[j];
    }
  }
}

template class Graph<float>;
template class Graph<double>;

namespace ops {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// C[p x r] += A[p x q] * B[q x r]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t p, std::size_t q,
             std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    T* ci = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = a[i * q + k];
      if (aik == T{0}) continue;
      const T* bk = b + k * r;
      for (std::size_t j = 0; j < r; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C[p x q] += G[p x r] * B[q x r]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t p, std::size_t q,
             std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const T* gi = g + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T* bk = b + k * r;
      T acc{0};
      for (std::size_t j = 0; j < r; ++j) acc += gi[j] * bk[j];
      c[i * q + k] += acc;
    }
  }
}

// C[q x r] += A[p x q]^T * G[p x r]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t p, std::size_t q,
             std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const T* gi = g + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T aik = a[i * q + k];
      if (aik == T{0}) continue;
      T* ck = c + k * r;
      for (std::size_t j = 0; j < r; ++j) ck[j] += aik * gi[j];
    }
  }
}

template <typename T>
Graph<T>& graph_of(Value<T> a, Value<T> b) {
  if (a.graph != b.graph) throw std::logic_error("values from different graphs");
  return *a.graph;
}

template <typename T>
void accumulate(Tensor<T>* sink, const Tensor<T>& g) {
  if (sink == nullptr) return;
  for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
}

// Shared attention kernel. Query row i attends to key rows [lo(i), hi(i)),
// adding mask(i, j) when a mask is supplied. Probabilities are kept per row
// for the backward pass.
template <typename T>
struct AttentionPlan {
  std::size_t lq = 0, lk = 0, heads = 1, dk = 0, dv = 0;
  std::vector<std::size_t> lo, hi, offset;
};

template <typename T>
Value<T> attention_impl(Value<T> q, Value<T> k, Value<T> v,
                        AttentionPlan<T> plan, const Tensor<T>* mask) {
  Graph<T>& g = graph_of(q, k);
  graph_of(k, v);
  const Tensor<T>& Q = q.value();
  const Tensor<T>& K = k.value();
  const Tensor<T>& V = v.value();
  const std::size_t H = plan.heads;
  const std::size_t dk = plan.dk, dv = plan.dv;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  const bool has_mask = mask != nullptr;

  std::size_t total = 0;
  plan.offset.resize(plan.lq);
  for (std::size_t i = 0; i < plan.lq; ++i) {
    plan.offset[i] = total;
    total += plan.hi[i] - plan.lo[i];
  }
  // probs[h * total + offset[i] + (j - lo[i])]
  std::vector<T> probs(H * total, T{0});
  Tensor<T> out(plan.lq, H * dv);
  std::vector<T> scores;

  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < plan.lq; ++i) {
      const std::size_t lo = plan.lo[i], hi = plan.hi[i];
      const std::size_t n = hi - lo;
      scores.assign(n, T{0});
      T* p = probs.data() + h * total + plan.offset[i];
      const T* qi = Q.data().data() + i * Q.cols() + h * dk;
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = lo; j < hi; ++j) {
        if (has_mask && is_masked(static_cast<double>((*mask)(i, j)))) continue;
        const T* kj = K.data().data() + j * K.cols() + h * dk;
        T s{0};
        for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        if (has_mask) s += (*mask)(i, j);
        scores[j - lo] = s;
        mx = std::max(mx, s);
        any = true;
      }
      if (!any) continue;  // fully masked row: output stays zero
      T denom{0};
      for (std::size_t j = lo; j < hi; ++j) {
        if (has_mask && is_masked(static_cast<double>((*mask)(i, j)))) continue;
        const T e = std::exp(scores[j - lo] - mx);
        p[j - lo] = e;
        denom += e;
      }
      T* oi = out.data().data() + i * out.cols() + h * dv;
      for (std::size_t j = lo; j < hi; ++j) {
        p[j - lo] /= denom;
        const T pj = p[j - lo];
        if (pj == T{0}) continue;
        const T* vj = V.data().data() + j * V.cols() + h * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] += pj * vj[c];
      }
    }
  }

  return g.record(
      std::move(out), {q, k, v},
      [q, k, v, plan = std::move(plan), probs = std::move(probs), total,
       inv_sqrt](Graph<T>& graph, const Tensor<T>& gout) {
        const Tensor<T>& Q = graph.value(q);
        const Tensor<T>& K = graph.value(k);
        const Tensor<T>& V = graph.value(v);
        Tensor<T>* gq = graph.grad_sink(q);
        Tensor<T>* gk = graph.grad_sink(k);
        Tensor<T>* gv = graph.grad_sink(v);
        const std::size_t H = plan.heads, dk = plan.dk, dv = plan.dv;
        std::vector<T> gp;
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < plan.lq; ++i) {
            const std::size_t lo = plan.lo[i], hi = plan.hi[i];
            const T* p = probs.data() + h * total + plan.offset[i];
            const T* gi = gout.data().data() + i * gout.cols() + h * dv;
            gp.assign(hi - lo, T{0});
            T dot{0};
            for (std::size_t j = lo; j < hi; ++j) {
              const T pj = p[j - lo];
              if (pj == T{0}) continue;
              const T* vj = V.data().data() + j * V.cols() + h * dv;
              T s{0};
              for (std::size_t c = 0; c < dv; ++c) s += gi[c] * vj[c];
              gp[j - lo] = s;
              dot += pj * s;
              if (gv != nullptr) {
                T* gvj = gv->data().data() + j * gv->cols() + h * dv;
                for (std::size_t c = 0; c < dv; ++c) gvj[c] += pj * gi[c];
              }
            }
            const T* qi = Q.data().data() + i * Q.cols() + h * dk;
            T* gqi = gq ? gq->data().data() + i * gq->cols() + h * dk : nullptr;
            for (std::size_t j = lo; j < hi; ++j) {
              const T pj = p[j - lo];
              if (pj == T{0}) continue;
              const T gs = pj * (gp[j - lo] - dot) * inv_sqrt;
              const T* kj = K.data().data() + j * K.cols() + h * dk;
              if (gqi != nullptr) {
                for (std::size_t c = 0; c < dk; ++c) gqi[c] += gs * kj[c];
              }
              if (gk != nullptr) {
                T* gkj = gk->data().data() + j * gk->cols() + h * dk;
                for (std::size_t c = 0; c < dk; ++c) gkj[c] += gs * qi[c];
              }
            }
          }
        }
      });
}

template <typename T>
AttentionPlan<T> make_plan(Value<T> q, Value<T> k, Value<T> v,
                           std::size_t num_heads) {
  require(num_heads >= 1, "attention needs at least one head");
  require(q.cols() == k.cols(), "attention q/k width mismatch");
  require(k.rows() == v.rows(), "attention k/v length mismatch");
  require(q.cols() % num_heads == 0 && v.cols() % num_heads == 0,
          "attention width not divisible by head count");
  AttentionPlan<T> plan;
  plan.lq = q.rows();
  plan.lk = k.rows();
  plan.heads = num_heads;
  plan.dk = q.cols() / num_heads;
  plan.dv = v.cols() / num_heads;
  return plan;
}

}  // namespace

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b) {
  Graph<T>& g = graph_of(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  require(A.cols() == B.rows(), "matmul inner dimension mismatch: " +
                                    shape_str(A.shape()) + " * " +
                                    shape_str(B.shape()));
  const std::size_t p = A.rows(), q = A.cols(), r = B.cols();
  Tensor<T> out(p, r);
  gemm_nn(A.data().data(), B.data().data(), out.data().data(), p, q, r);
  return g.record(std::move(out), {a, b},
                  [a, b, p, q, r](Graph<T>& graph, const Tensor<T>& gout) {
                    if (Tensor<T>* ga = graph.grad_sink(a)) {
                      gemm_nt(gout.data().data(), graph.value(b).data().data(),
                              ga->data().data(), p, q, r);
                    }
                    if (Tensor<T>* gb = graph.grad_sink(b)) {
                      gemm_tn(graph.value(a).data().data(), gout.data().data(),
                              gb->data().data(), p, q, r);
                    }
                  });
}

template <typename T>
Value<T> add(Value<T> a, Value<T> b) {
  Graph<T>& g = graph_of(a, b);
  require(a.value().size() == b.value().size() && a.cols() == b.cols(),
          "add shape mismatch");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return g.record(std::move(out), {a, b},
                  [a, b](Graph<T>& graph, const Tensor<T>& gout) {
                    accumulate(graph.grad_sink(a), gout);
                    accumulate(graph.grad_sink(b), gout);
                  });
}

template <typename T>
Value<T> sub(Value<T> a, Value<T> b) {
  Graph<T>& g = graph_of(a, b);
  require(a.value().size() == b.value().size() && a.cols() == b.cols(),
          "sub shape mismatch");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return g.record(std::move(out), {a, b},
                  [a, b](Graph<T>& graph, const Tensor<T>& gout) {
                    accumulate(graph.grad_sink(a), gout);
                    if (Tensor<T>* gb = graph.grad_sink(b)) {
                      for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i] -= gout[i];
                    }
                  });
}

template <typename T>
Value<T> mul(Value<T> a, Value<T> b) {
  Graph<T>& g = graph_of(a, b);
  require(a.value().size() == b.value().size() && a.cols() == b.cols(),
          "mul shape mismatch");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g.record(std::move(out), {a, b},
                  [a, b](Graph<T>& graph, const Tensor<T>& gout) {
                    const auto& A = graph.value(a);
                    const auto& B = graph.value(b);
                    if (Tensor<T>* ga = graph.grad_sink(a)) {
                      for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * B[i];
                    }
                    if (Tensor<T>* gb = graph.grad_sink(b)) {
                      for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i] * A[i];
                    }
                  });
}

template <typename T>
Value<T> add_row(Value<T> a, Value<T> row) {
  Graph<T>& g = graph_of(a, row);
  const std::size_t c = a.cols();
  require(row.value().size() == c, "add_row width mismatch");
  Tensor<T> out = a.value();
  const auto& R = row.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out(r, j) += R[j];
  }
  return g.record(std::move(out), {a, row},
                  [a, row, c](Graph<T>& graph, const Tensor<T>& gout) {
                    accumulate(graph.grad_sink(a), gout);
                    if (Tensor<T>* gr = graph.grad_sink(row)) {
                      for (std::size_t r = 0; r < gout.rows(); ++r) {
                        for (std::size_t j = 0; j < c; ++j) (*gr)[j] += gout(r, j);
                      }
                    }
                  });
}

template <typename T>
Value<T> mul_row(Value<T> a, Value<T> row) {
  Graph<T>& g = graph_of(a, row);
  const std::size_t c = a.cols();
  require(row.value().size() == c, "mul_row width mismatch");
  Tensor<T> out = a.value();
  const auto& R = row.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out(r, j) *= R[j];
  }
  return g.record(std::move(out), {a, row},
                  [a, row, c](Graph<T>& graph, const Tensor<T>& gout) {
                    const auto& A = graph.value(a);
                    const auto& R = graph.value(row);
                    if (Tensor<T>* ga = graph.grad_sink(a)) {
                      for (std::size_t r = 0; r < gout.rows(); ++r) {
                        for (std::size_t j = 0; j < c; ++j) (*ga)(r, j) += gout(r, j) * R[j];
                      }
                    }
                    if (Tensor<T>* gr = graph.grad_sink(row)) {
                      for (std::size_t r = 0; r < gout.rows(); ++r) {
                        for (std::size_t j = 0; j < c; ++j) (*gr)[j] += gout(r, j) * A(r, j);
                      }
                    }
                  });
}

template <typename T>
Value<T> scale(Value<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= factor;
  return a.graph->record(std::move(out), {a},
                         [a, factor](Graph<T>& graph, const Tensor<T>& gout) {
                           if (Tensor<T>* ga = graph.grad_sink(a)) {
                             for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * factor;
                           }
                         });
}

template <typename T>
Value<T> add_scalar(Value<T> a, T offset) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x += offset;
  return a.graph->record(std::move(out), {a},
                         [a](Graph<T>& graph, const Tensor<T>& gout) {
                           accumulate(graph.grad_sink(a), gout);
                         });
}

template <typename T>
Value<T> silu(Value<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = x / (T{1} + std::exp(-x));
  return a.graph->record(std::move(out), {a},
                         [a](Graph<T>& graph, const Tensor<T>& gout) {
                           Tensor<T>* ga = graph.grad_sink(a);
                           if (ga == nullptr) return;
                           const auto& A = graph.value(a);
                           for (std::size_t i = 0; i < gout.size(); ++i) {
                             const T s = T{1} / (T{1} + std::exp(-A[i]));
                             (*ga)[i] += gout[i] * s * (T{1} + A[i] * (T{1} - s));
                           }
                         });
}

template <typename T>
Value<T> layer_norm(Value<T> a, T eps) {
  const Tensor<T>& A = a.value();
  const std::size_t d = A.cols();
  require(d >= 1, "layer_norm needs d >= 1");
  const std::size_t n = A.rows();
  Tensor<T> out(A.shape());
  std::vector<T> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = A.row(r);
    T mean{0};
    for (T v : x) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : x) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + eps);
    auto y = out.row(r);
    for (std::size_t j = 0; j < d; ++j) y[j] = (x[j] - mean) * rstd[r];
  }
  Tensor<T> xhat = out;
  return a.graph->record(
      std::move(out), {a},
      [a, d, rstd = std::move(rstd), xhat = std::move(xhat)](
          Graph<T>& graph, const Tensor<T>& gout) {
        Tensor<T>* ga = graph.grad_sink(a);
        if (ga == nullptr) return;
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t r = 0; r < gout.rows(); ++r) {
          auto g = gout.row(r);
          auto xh = xhat.row(r);
          T mg{0}, mgx{0};
          for (std::size_t j = 0; j < d; ++j) {
            mg += g[j];
            mgx += g[j] * xh[j];
          }
          mg *= inv_d;
          mgx *= inv_d;
          auto gr = ga->row(r);
          for (std::size_t j = 0; j < d; ++j) {
            gr[j] += rstd[r] * (g[j] - mg - xh[j] * mgx);
          }
        }
      });
}

template <typename T>
Value<T> rope(Value<T> a, std::span<const std::int64_t> positions,
              std::size_t num_heads, double base) {
  const Tensor<T>& A = a.value();
  require(positions.size() == A.rows(), "rope needs one position per row");
  require(num_heads >= 1 && A.cols() % num_heads == 0,
          "rope width not divisible by head count");
  const std::size_t dh = A.cols() / num_heads;
  require(dh % 2 == 0, "rope head dimension must be even");
  const std::size_t half = dh / 2;
  // cos/sin table per (row, frequency)
  std::vector<T> cs(A.rows() * half), sn(A.rows() * half);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[r]) * inv_freq;
      cs[r * half + i] = static_cast<T>(std::cos(angle));
      sn[r * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  Tensor<T> out(A.shape());
  for (std::size_t r = 0; r < A.rows(); ++r) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t o = h * dh;
      for (std::size_t i = 0; i < half; ++i) {
        const T c = cs[r * half + i], s = sn[r * half + i];
        const T x1 = A(r, o + i), x2 = A(r, o + i + half);
        out(r, o + i) = x1 * c - x2 * s;
        out(r, o + i + half) = x1 * s + x2 * c;
      }
    }
  }
  return a.graph->record(
      std::move(out), {a},
      [a, num_heads, dh, half, cs = std::move(cs), sn = std::move(sn)](
          Graph<T>& graph, const Tensor<T>& gout) {
        Tensor<T>* ga = graph.grad_sink(a);
        if (ga == nullptr) return;
        for (std::size_t r = 0; r < gout.rows(); ++r) {
          for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t o = h * dh;
            for (std::size_t i = 0; i < half; ++i) {
              const T c = cs[r * half + i], s = sn[r * half + i];
              const T g1 = gout(r, o + i), g2 = gout(r, o + i + half);
              (*ga)(r, o + i) += g1 * c + g2 * s;
              (*ga)(r, o + i + half) += -g1 * s + g2 * c;
            }
          }
        }
      });
}

template <typename T>
Value<T> slice_cols(Value<T> a, std::size_t begin, std::size_t count) {
  const Tensor<T>& A = a.value();
  require(begin + count <= A.cols(), "slice_cols out of range");
  Tensor<T> out(A.rows(), count);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    std::copy_n(A.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count,
                out.row(r).begin());
  }
  return a.graph->record(std::move(out), {a},
                         [a, begin, count](Graph<T>& graph, const Tensor<T>& gout) {
                           Tensor<T>* ga = graph.grad_sink(a);
                           if (ga == nullptr) return;
                           for (std::size_t r = 0; r < gout.rows(); ++r) {
                             for (std::size_t j = 0; j < count; ++j) {
                               (*ga)(r, begin + j) += gout(r, j);
                             }
                           }
                         });
}

template <typename T>
Value<T> slice_rows(Value<T> a, std::size_t begin, std::size_t count) {
  Tensor<T> out = a.value().slice_rows(begin, count);
  const std::size_t c = a.cols();
  return a.graph->record(std::move(out), {a},
                         [a, begin, c](Graph<T>& graph, const Tensor<T>& gout) {
                           Tensor<T>* ga = graph.grad_sink(a);
                           if (ga == nullptr) return;
                           T* dst = ga->data().data() + begin * c;
                           for (std::size_t i = 0; i < gout.size(); ++i) dst[i] += gout[i];
                         });
}

template <typename T>
Value<T> concat_rows(const std::vector<Value<T>>& parts) {
  require(!parts.empty(), "concat_rows needs at least one part");
  std::vector<Tensor<T>> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor<T> out = bitlm::concat_rows<T>(values);
  return parts.front().graph->record(
      std::move(out), parts, [parts](Graph<T>& graph, const Tensor<T>& gout) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t n = graph.value(p).size();
          if (Tensor<T>* gp = graph.grad_sink(p)) {
            for (std::size_t i = 0; i < n; ++i) (*gp)[i] += gout[offset + i];
          }
          offset += n;
        }
      });
}

template <typename T>
Value<T> repeat_rows(Value<T> a, std::size_t times) {
  const Tensor<T>& A = a.value();
  const std::size_t c = A.cols();
  Tensor<T> out(A.rows() * times, c);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      std::copy(A.row(r).begin(), A.row(r).end(), out.row(r * times + k).begin());
    }
  }
  return a.graph->record(std::move(out), {a},
                         [a, times, c](Graph<T>& graph, const Tensor<T>& gout) {
                           Tensor<T>* ga = graph.grad_sink(a);
                           if (ga == nullptr) return;
                           for (std::size_t r = 0; r < ga->rows(); ++r) {
                             for (std::size_t k = 0; k < times; ++k) {
                               for (std::size_t j = 0; j < c; ++j) {
                                 (*ga)(r, j) += gout(r * times + k, j);
                               }
                             }
                           }
                         });
}

template <typename T>
Value<T> masked_attention(Value<T> q, Value<T> k, Value<T> v,
                          const Tensor<T>& mask, std::size_t num_heads) {
  AttentionPlan<T> plan = make_plan(q, k, v, num_heads);
  require(mask.rows() == plan.lq && mask.cols() == plan.lk,
          "attention mask must be " + std::to_string(plan.lq) + "x" +
              std::to_string(plan.lk) + ", got " + shape_str(mask.shape()));
  plan.lo.assign(plan.lq, 0);
  plan.hi.assign(plan.lq, plan.lk);
  return attention_impl(q, k, v, std::move(plan), &mask);
}

template <typename T>
Value<T> grouped_attention(Value<T> q, Value<T> k, Value<T> v,
                           std::size_t group, std::size_t num_heads) {
  AttentionPlan<T> plan = make_plan(q, k, v, num_heads);
  require(group >= 1 && plan.lq == plan.lk && plan.lq % group == 0,
          "grouped attention length must be a multiple of the group");
  plan.lo.resize(plan.lq);
  plan.hi.resize(plan.lq);
  for (std::size_t i = 0; i < plan.lq; ++i) {
    plan.lo[i] = (i / group) * group;
    plan.hi[i] = plan.lo[i] + group;
  }
  return attention_impl<T>(q, k, v, std::move(plan), nullptr);
}

template <typename T>
Value<T> weighted_squared_error(Value<T> pred, const Tensor<T>& target,
                                std::span<const T> row_weights) {
  const Tensor<T>& P = pred.value();
  require(P.size() == target.size() && P.cols() == target.cols(),
          "squared error shape mismatch");
  require(row_weights.size() == P.rows(), "one weight per row required");
  T total{0};
  for (std::size_t r = 0; r < P.rows(); ++r) {
    if (row_weights[r] == T{0}) continue;
    T acc{0};
    for (std::size_t c = 0; c < P.cols(); ++c) {
      const T d = P(r, c) - target(r, c);
      acc += d * d;
    }
    total += row_weights[r] * acc;
  }
  Tensor<T> out(1, 1, total);
  std::vector<T> w(row_weights.begin(), row_weights.end());
  return pred.graph->record(
      std::move(out), {pred},
      [pred, target, w = std::move(w)](Graph<T>& graph, const Tensor<T>& gout) {
        Tensor<T>* gp = graph.grad_sink(pred);
        if (gp == nullptr) return;
        const auto& P = graph.value(pred);
        for (std::size_t r = 0; r < P.rows(); ++r) {
          if (w[r] == T{0}) continue;
          for (std::size_t c = 0; c < P.cols(); ++c) {
            (*gp)(r, c) += T{2} * w[r] * (P(r, c) - target(r, c)) * gout[0];
          }
        }
      });
}

template <typename T>
Value<T> sum(Value<T> a) {
  T total{0};
  for (T x : a.value().data()) total += x;
  return a.graph->record(Tensor<T>(1, 1, total), {a},
                         [a](Graph<T>& graph, const Tensor<T>& gout) {
                           Tensor<T>* ga = graph.grad_sink(a);
                           if (ga == nullptr) return;
                           for (auto& x : ga->data()) x += gout[0];
                         });
}

#define BITLM_INSTANTIATE_OPS(T)                                                  \
  template Value<T> matmul(Value<T>, Value<T>);                                   \
  template Value<T> add(Value<T>, Value<T>);                                      \
  template Value<T> sub(Value<T>, Value<T>);                                      \
  template Value<T> mul(Value<T>, Value<T>);                                      \
  template Value<T> add_row(Value<T>, Value<T>);                                  \
  template Value<T> mul_row(Value<T>, Value<T>);                                  \
  template Value<T> scale(Value<T>, T);                                           \
  template Value<T> add_scalar(Value<T>, T);                                      \
  template Value<T> silu(Value<T>);                                               \
  template Value<T> layer_norm(Value<T>, T);                                      \
  template Value<T> rope(Value<T>, std::span<const std::int64_t>, std::size_t,    \
                         double);                                                 \
  template Value<T> slice_cols(Value<T>, std::size_t, std::size_t);               \
  template Value<T> slice_rows(Value<T>, std::size_t, std::size_t);               \
  template Value<T> concat_rows(const std::vector<Value<T>>&);                    \
  template Value<T> repeat_rows(Value<T>, std::size_t);                           \
  template Value<T> masked_attention(Value<T>, Value<T>, Value<T>,                \
                                     const Tensor<T>&, std::size_t);              \
  template Value<T> grouped_attention(Value<T>, Value<T>, Value<T>, std::size_t,  \
                                      std::size_t);                               \
  template Value<T> weighted_squared_error(Value<T>, const Tensor<T>&,            \
                                           std::span<const T>);                   \
  template Value<T> sum(Value<T>);

BITLM_INSTANTIATE_OPS(float)
BITLM_INSTANTIATE_OPS(double)

#undef BITLM_INSTANTIATE_OPS

}  // namespace ops
}  // namespace bitlm
