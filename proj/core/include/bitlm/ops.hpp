#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitlm/graph.hpp"

// Differentiable operations over rank-2 Values. Every op records a backward
// closure on the owning graph when any of its inputs requires a gradient.
namespace bitlm::ops {

/// Additive mask sentinel standing in for -infinity.
inline constexpr double kMaskedOut = -1e9;

/// True when an additive mask entry blocks attention.
inline bool is_masked(double v) { return v <= kMaskedOut * 0.5; }

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b);

template <typename T>
Value<T> add(Value<T> a, Value<T> b);

template <typename T>
Value<T> sub(Value<T> a, Value<T> b);

/// Elementwise product.
template <typename T>
Value<T> mul(Value<T> a, Value<T> b);

/// a[r, c] + row[0, c] for every r.
template <typename T>
Value<T> add_row(Value<T> a, Value<T> row);

/// a[r, c] * row[0, c] for every r.
template <typename T>
Value<T> mul_row(Value<T> a, Value<T> row);

template <typename T>
Value<T> scale(Value<T> a, T factor);

template <typename T>
Value<T> add_scalar(Value<T> a, T offset);

template <typename T>
Value<T> silu(Value<T> a);

/// Normalizes every row to zero mean and unit variance. No affine terms.
template <typename T>
Value<T> layer_norm(Value<T> a, T eps = T(1e-5));

/// Rotary position embedding, rotate-half convention, applied independently
/// to each of `num_heads` column groups. `positions[r]` is the position of row r.
template <typename T>
Value<T> rope(Value<T> a, std::span<const std::int64_t> positions,
              std::size_t num_heads, double base);

template <typename T>
Value<T> slice_cols(Value<T> a, std::size_t begin, std::size_t count);

template <typename T>
Value<T> slice_rows(Value<T> a, std::size_t begin, std::size_t count);

template <typename T>
Value<T> concat_rows(const std::vector<Value<T>>& parts);

/// Each row of `a` repeated `times` times consecutively.
template <typename T>
Value<T> repeat_rows(Value<T> a, std::size_t times);

/// softmax(q k^T / sqrt(d_head) + mask) v, per head. `mask` is
/// rows(q) x rows(k). Rows whose mask entries are all masked out produce
/// zeros.
template <typename T>
Value<T> masked_attention(Value<T> q, Value<T> k, Value<T> v,
                          const Tensor<T>& mask, std::size_t num_heads = 1);

/// Unmasked attention restricted to consecutive groups of `group` rows.
/// `group == 1` makes every row attend only to itself.
template <typename T>
Value<T> grouped_attention(Value<T> q, Value<T> k, Value<T> v,
                           std::size_t group, std::size_t num_heads = 1);

/// sum_r weight[r] * sum_c (pred[r, c] - target[r, c])^2 as a 1x1 Value.
/// Only `pred` is differentiated.
template <typename T>
Value<T> weighted_squared_error(Value<T> pred, const Tensor<T>& target,
                                std::span<const T> row_weights);

template <typename T>
Value<T> sum(Value<T> a);

}  // namespace bitlm::ops
