#pragma once

#include <vector>

#include "sartm/tensor.hpp"

SARTM_NS_BEGIN

// Elementwise (same shape).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Scalar c);
Tensor mul_scalar(const Tensor& a, Scalar c);
// x * s with s a single-element tensor; differentiable in both arguments.
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);

// Linear algebra. matmul accepts [m,k]x[k,n], batched [B,m,k]x[B,k,n], and
// [B,m,k]x[k,n] with the right-hand side broadcast over the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2(const Tensor& x);  // swap the last two axes
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

// Neural-net primitives.
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = Scalar(1e-5));
// x: [C_in,H,W], w: [C_out,C_in,k,k]; cross-correlation with zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // [C,H,W] + [C]
Tensor add_bias_lastdim(const Tensor& x, const Tensor& b);  // [...,d] + [d]
Tensor bilinear_upsample(const Tensor& x, int factor);      // align_corners=false

// Reductions (reduced axes are dropped from the result shape).
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axes(const Tensor& x, std::vector<int> axes);
Tensor mean_axes(const Tensor& x, std::vector<int> axes);

// Pairwise cosine similarity of row vectors: [K,d],[L,d] -> [K,L].
Tensor cosine_similarity_matrix(const Tensor& x, const Tensor& y);
// Mean over rows of KL(p_row || q_row); rows must be probability vectors.
Tensor kl_div_rows(const Tensor& p, const Tensor& q);

SARTM_NS_END
