#pragma once

// Differentiable tensor operations. Every op validates shapes up front and
// throws apa::DimensionError naming the offending shapes. Broadcasting is
// limited to what each signature documents.

#include <cstddef>
#include <span>

#include "apa/numerics/tensor.hpp"

namespace apa::num {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);

// a: [..., k] treated as rows, b: [k, m]. Result keeps a's leading dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x: [..., C] + bias: [C]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

// x: [B, ..., C] + e: [B, C], e broadcast over the middle dims.
template <typename T> Tensor<T> add_per_example(const Tensor<T>& x, const Tensor<T>& e);

// x * sigmoid(x)
template <typename T> Tensor<T> silu(const Tensor<T>& x);

// Softmax along the last axis; axis may be given as -1 or rank-1.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

// Normalizes each row of the last axis, then applies gain and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(1e-5));

// x: [B, H, W, Cin], weight: [9*Cin, Cout] laid out (ky, kx, cin), bias: [Cout].
// Zero padding, stride 1.
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// 2x2 mean pooling and nearest-neighbour upsampling over [B, H, W, C].
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T> Tensor<T> upsample2(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// Mean of squared differences over all elements.
template <typename T> Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target);

// table: [V, d]; returns [indices.size(), d].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> indices);

// softmax(q k^T / sqrt(d)) v for q: [n, d], k: [m, d], v: [m, dv].
template <typename T> Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

// Batched multi-head form. q: [B, n, D], k: [B, m, D], v: [B, m, Dv];
// D and Dv split evenly into `heads` slices. key_lengths, when non-empty,
// gives the number of valid keys per example (the rest are masked out).
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                              std::span<const std::size_t> key_lengths = {});

}  // namespace apa::num
