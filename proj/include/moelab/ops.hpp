#pragma once

#include <vector>

#include "moelab/tensor.hpp"

// Reverse-mode differentiable operations over row-major dense tensors. Each op
// validates shapes, computes values, and (when recording is enabled and an
// input requires grad) attaches a backward closure to the output.
namespace moelab::ops {

// ---- elementwise / broadcast arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& v);   // [T x n] + [n], per row
Tensor sub_colvec(const Tensor& a, const Tensor& v);   // [T x n] - v[t], per column
Tensor div_colvec(const Tensor& a, const Tensor& v);   // [T x n] / v[t], per column
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor div(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor sub_from_const(double c, const Tensor& a);      // c - a
Tensor silu(const Tensor& a);                          // x * sigmoid(x)
// Elementwise square root; the derivative at 0 is taken as 0 so that guarded
// standard-deviation paths stay NaN-free on constant rows.
Tensor sqrt(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);                        // -> scalar
Tensor row_mean(const Tensor& a);                   // [T x n] -> [T]
Tensor col_mean(const Tensor& a);                   // [T x n] -> [n]
Tensor sum_groups(const Tensor& v, int64_t group);  // [G*group] -> [G], consecutive groups
Tensor repeat_interleave(const Tensor& v, int64_t times);  // [G] -> [G*times]

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] @ [k x n]

// ---- fused network blocks ----
// Row softmax with max subtraction. Supports rank-1 and rank-2 tensors over the
// last axis (axis -1, or the explicit equivalent).
Tensor softmax(const Tensor& z, int axis = -1);
// Mean negative log-likelihood of targets under row-wise log-softmax.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
// y_t = x_t / rms(x_t) * weight, rms = sqrt(mean(x^2) + eps), per row.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = 1e-6);
// Multi-head causal self-attention over already-projected q,k,v of shape
// [batch*seq x dim]; dim must be divisible by heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t batch,
                        int64_t seq, int64_t heads);
// (silu(x w_gate) * (x w_up)) w_down
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down);

// ---- indexing ----
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& rows);   // [N x d] -> [R x d]
Tensor gather_elems(const Tensor& a, const std::vector<int64_t>& flat);  // any -> [R]
// out[row_index[r]] += weights[r] * rows[r]; differentiable in rows and weights.
Tensor scatter_rows_scaled(const Tensor& rows, const std::vector<int64_t>& row_index,
                           const Tensor& weights, int64_t out_rows);

}  // namespace moelab::ops
