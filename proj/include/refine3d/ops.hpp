#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "refine3d/tensor.hpp"

// Differentiable operations. Every function here records a backward closure
// when any input requires gradients.
namespace refine3d::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[m,k] · weightᵀ + bias, with weight [n,k] and bias [n].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x[m,n] + row[n] on every row.
Tensor add_row(const Tensor& x, const Tensor& row);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Σ_i weights[i]·x[i] over the flattened tensor.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);
/// [m,n] → [n]
Tensor sum_rows(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Columns [start, start+count) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);

/// Softmax along `axis`, stabilized by max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Rows of x[M,C] picked by index, duplicates allowed.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// Copy of base[M,C] with rows `index` replaced by values[K,C].
Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> index,
                    const Tensor& values);

// Segments partition the rows of a [P,C] tensor: segment s spans rows
// [offsets[s], offsets[s+1]). offsets.front() == 0 and offsets.back() == P.

/// Column-wise softmax inside every non-empty segment.
Tensor segment_softmax(const Tensor& x, std::span<const std::size_t> offsets);
/// [P,C] → [S,C]; empty segments yield zero rows.
Tensor segment_sum(const Tensor& x, std::span<const std::size_t> offsets);
/// Channel-wise max of rows sharing a group id; [P,C] → [G,C]. Every group
/// must own at least one row. Gradient goes to the first maximal row.
Tensor group_max(const Tensor& x, std::span<const std::size_t> group,
                 std::size_t groups);

/// Normalizes each row over its channels, then applies scale/shift.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  double eps);

/// Normalizes each channel over the rows of the batch.
Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  double eps);
/// Eval-mode batch norm with fixed statistics.
Tensor batch_norm_fixed(const Tensor& x, const Tensor& scale,
                        const Tensor& shift, std::span<const double> mean,
                        std::span<const double> var, double eps);

// Element-wise losses; targets are constants with the same element count.

/// Soft-target focal loss on probabilities clamped to [1e-7, 1-1e-7]:
/// -α t (1-p)^γ log p - (1-α)(1-t) p^γ log(1-p)
Tensor focal_loss(const Tensor& prob, std::span<const double> target,
                  double alpha, double gamma);
Tensor smooth_l1(const Tensor& pred, std::span<const double> target,
                 double delta);
/// Binary cross entropy on probabilities clamped to [1e-7, 1-1e-7], minus the
/// entropy of the label so a soft label predicted exactly costs 0. Hard
/// labels give the textbook value.
Tensor bce(const Tensor& prob, std::span<const double> target);

inline constexpr double kProbClamp = 1e-7;

}  // namespace refine3d::ops
