#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the graph or ops code; everything is plain loops over doubles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bitlm/backbone.hpp"
#include "bitlm/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline int code_length(std::int64_t vocab) {
  int b = 0;
  while ((std::int64_t{1} << b) < vocab) ++b;
  return b == 0 ? 1 : b;
}

/// +-1 digits of `id` in base 2, most significant first, by repeated division.
inline std::vector<int> bits_of(std::int64_t id, int width) {
  std::vector<int> lsb_first;
  for (int k = 0; k < width; ++k) {
    lsb_first.push_back(id % 2 == 1 ? 1 : -1);
    id /= 2;
  }
  return {lsb_first.rbegin(), lsb_first.rend()};
}

/// Block numbers from the 1-based definition b(i) = floor((i - 1) / m) + 1.
inline bool block_visible(std::size_t i0, std::size_t j0, std::size_t m) {
  const std::size_t bi = (i0 + 1 - 1) / m + 1;
  const std::size_t bj = (j0 + 1 - 1) / m + 1;
  return bj <= bi;
}

inline Matrix to_matrix(const bitlm::Tensor<double>& t) {
  Matrix out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = t(r, c);
  }
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    }
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline std::vector<double> norm_row(const std::vector<double>& x, const std::vector<double>& g) {
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mean) / std::sqrt(var + 1e-5) * g[j];
  return y;
}

/// Rotary embedding on one head slice, rotate-half convention.
inline void rotate(std::vector<double>& row, std::size_t offset, std::size_t dh, double pos,
                   double base) {
  const std::size_t half = dh / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
    const double x1 = row[offset + i], x2 = row[offset + i + half];
    row[offset + i] = x1 * std::cos(angle) - x2 * std::sin(angle);
    row[offset + i + half] = x1 * std::sin(angle) + x2 * std::cos(angle);
  }
}

/// Standard left-to-right transformer with the backbone's weights: token i
/// attends to tokens j <= i. Positions are 0-based.
inline Matrix causal_transformer(const bitlm::Backbone<double>& bb, const Matrix& codes) {
  std::map<std::string, Matrix> w;
  bb.for_each_parameter([&](const bitlm::Parameter<double>& p) { w[p.name] = to_matrix(p.value); });
  const auto& cfg = bb.config();
  const std::size_t L = codes.size(), d = cfg.d();
  const auto H = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t dh = d / H;

  auto affine = [](Matrix x, const Matrix& b) {
    for (auto& row : x) {
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
    }
    return x;
  };
  Matrix x = affine(matmul(codes, w["backbone.lift.w1"]), w["backbone.lift.b1"]);
  for (auto& row : x) {
    for (double& v : row) v = silu(v);
  }
  x = affine(matmul(x, w["backbone.lift.w2"]), w["backbone.lift.b2"]);

  for (int li = 0; li < cfg.num_layers; ++li) {
    const std::string p = "backbone.layers." + std::to_string(li) + ".";
    Matrix h(L);
    for (std::size_t i = 0; i < L; ++i) h[i] = norm_row(x[i], w[p + "attn_norm"][0]);
    Matrix q = matmul(h, w[p + "wq"]), k = matmul(h, w[p + "wk"]), v = matmul(h, w[p + "wv"]);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t hh = 0; hh < H; ++hh) {
        rotate(q[i], hh * dh, dh, static_cast<double>(i), cfg.rope_base);
        rotate(k[i], hh * dh, dh, static_cast<double>(i), cfg.rope_base);
      }
    }
    Matrix attn(L, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t hh = 0; hh < H; ++hh) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][hh * dh + c] * k[j][hh * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t c = 0; c < dh; ++c) attn[i][hh * dh + c] += s[j] / z * v[j][hh * dh + c];
        }
      }
    }
    const Matrix o = matmul(attn, w[p + "wo"]);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    }
    Matrix h2(L);
    for (std::size_t i = 0; i < L; ++i) h2[i] = norm_row(x[i], w[p + "mlp_norm"][0]);
    Matrix gate = matmul(h2, w[p + "w_gate"]);
    const Matrix up = matmul(h2, w[p + "w_up"]);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < gate[i].size(); ++j) gate[i][j] = silu(gate[i][j]) * up[i][j];
    }
    const Matrix down = matmul(gate, w[p + "w_down"]);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i][j] += down[i][j];
    }
  }
  if (cfg.num_layers > 0) {
    for (auto& row : x) row = norm_row(row, w["backbone.final_norm"][0]);
  }
  return x;
}

/// Central difference of f at every entry of `x`.
inline std::vector<double> numeric_gradient(std::span<double> x,
                                            const std::function<double()>& f,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

}  // namespace oracle
