#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "carp/numerics.hpp"
#include "carp/partition.hpp"

namespace carp {

/// Floor applied to <a, b> before the log in the consistency term.
inline constexpr double kConsistencyEpsilon = 1e-12;

struct LossBreakdown {
  double consistency = 0.0;
  /// Weighted regularizer. KL-to-uniform (>= 0) for the partitioned objective,
  /// -lambda_e * H(p_bar) (<= 0) for the global one.
  double entropy_term = 0.0;
  double total = 0.0;
  /// Unweighted KL(p_bar_j || uniform) per block.
  std::vector<double> per_block_kl;
};

/// Loss value plus its gradient w.r.t. the student's K-wide logits of each view.
struct LossResult {
  LossBreakdown breakdown;
  Matrix grad_view1;
  Matrix grad_view2;
};

/// -log <a, b>, clamped at kConsistencyEpsilon.
inline double consistency(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "consistency: width mismatch");
  return -std::log(std::max(dot(a, b), kConsistencyEpsilon));
}

/// log(width) + sum p log p, with 0 log 0 taken as 0.
inline double kl_to_uniform(std::span<const double> p) {
  require(!p.empty(), "kl_to_uniform: empty distribution");
  double neg_entropy = 0.0;
  for (double v : p)
    if (v > 0.0) neg_entropy += v * std::log(v);
  return std::log(static_cast<double>(p.size())) + neg_entropy;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Per-block mean over every probability row of every source. Row j of the
/// result is p_bar_j.
inline Matrix batch_average(std::span<const BlockProbs* const> sources) {
  require(!sources.empty(), "batch_average: no sources");
  const BlockProbs& first = *sources.front();
  for (const BlockProbs* s : sources)
    require(s->same_shape(first), "batch_average: shape mismatch between sources");
  Matrix mean(first.num_blocks(), first.block_size());
  const double count = static_cast<double>(sources.size() * first.batch());
  for (std::size_t j = 0; j < first.num_blocks(); ++j) {
    auto out = mean.row(j);
    for (const BlockProbs* s : sources)
      for (std::size_t i = 0; i < s->batch(); ++i) {
        auto row = s->blocks[j].row(i);
        for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
      }
    for (double& v : out) v /= count;
  }
  return mean;
}

inline Matrix batch_average(const BlockProbs& s, const BlockProbs& t) {
  const std::array<const BlockProbs*, 2> sources{&s, &t};
  return batch_average(sources);
}

namespace detail {

/// Backprop through a row softmax: dL/dz = p * (g - <g, p>).
inline void softmax_backward_inplace(std::span<double> grad, std::span<const double> probs) {
  const double shift = dot(grad, probs);
  for (std::size_t c = 0; c < grad.size(); ++c) grad[c] = probs[c] * (grad[c] - shift);
}

}  // namespace detail

/// Symmetric block-wise consistency plus entropy_weight * mean_j KL(p_bar_j || U).
/// Teacher probabilities are constants; p_bar averages student and teacher rows
/// of both views and the student's share of it is differentiated.
inline LossResult carp_loss(const BlockProbs& s1, const BlockProbs& s2, const BlockProbs& t1,
                            const BlockProbs& t2, const Partition& partition,
                            double entropy_weight = 1.0) {
  require(s1.same_shape(s2) && s1.same_shape(t1) && s1.same_shape(t2),
          "carp_loss: student/teacher block shapes differ");
  require(s1.num_blocks() == partition.num_blocks() &&
              s1.block_size() == partition.block_size(),
          "carp_loss: block probabilities do not match the partition");
  require(s1.batch() >= 1, "carp_loss: empty batch");

  const std::size_t n = s1.batch();
  const std::size_t num_blocks = s1.num_blocks();
  const double pair_scale = 1.0 / static_cast<double>(n * num_blocks);

  // Views are summed pairwise so swapping them leaves every rounding step unchanged.
  const double rows_in_mean = 4.0 * static_cast<double>(n);
  Matrix p_bar(num_blocks, s1.block_size());
  for (std::size_t j = 0; j < num_blocks; ++j) {
    auto out = p_bar.row(j);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < out.size(); ++c)
        out[c] += (s1.blocks[j](i, c) + s2.blocks[j](i, c)) + (t1.blocks[j](i, c) + t2.blocks[j](i, c));
    for (double& v : out) v /= rows_in_mean;
  }

  LossResult result;
  auto& b = result.breakdown;
  b.per_block_kl.resize(num_blocks);

  std::vector<Matrix> g1(num_blocks), g2(num_blocks);
  double consistency_sum = 0.0;
  for (std::size_t j = 0; j < num_blocks; ++j) {
    const std::size_t width = s1.block_size();
    g1[j] = Matrix(n, width);
    g2[j] = Matrix(n, width);

    b.per_block_kl[j] = kl_to_uniform(p_bar.row(j));

    // d(mean_j KL_j)/d s_{i,j,c} = (log p_bar_jc + 1) / (4N * N_P)
    std::vector<double> entropy_grad(width);
    for (std::size_t c = 0; c < width; ++c) {
      const double p = std::max(p_bar(j, c), std::numeric_limits<double>::min());
      entropy_grad[c] = entropy_weight * (std::log(p) + 1.0) /
                        (rows_in_mean * static_cast<double>(num_blocks));
    }

    for (std::size_t i = 0; i < n; ++i) {
      const auto a1 = s1.blocks[j].row(i);
      const auto a2 = s2.blocks[j].row(i);
      const auto b1 = t1.blocks[j].row(i);
      const auto b2 = t2.blocks[j].row(i);
      const double inner12 = dot(a1, b2);
      const double inner21 = dot(a2, b1);
      consistency_sum += consistency(a1, b2) + consistency(a2, b1);  // commutative pair

      // Past the clamp the term is constant, so it contributes no gradient.
      const double coef1 = inner12 > kConsistencyEpsilon ? -pair_scale / inner12 : 0.0;
      const double coef2 = inner21 > kConsistencyEpsilon ? -pair_scale / inner21 : 0.0;
      auto r1 = g1[j].row(i);
      auto r2 = g2[j].row(i);
      for (std::size_t c = 0; c < width; ++c) {
        r1[c] = coef1 * b2[c] + entropy_grad[c];
        r2[c] = coef2 * b1[c] + entropy_grad[c];
      }
      detail::softmax_backward_inplace(r1, a1);
      detail::softmax_backward_inplace(r2, a2);
    }
  }

  double kl_mean = 0.0;
  for (double kl : b.per_block_kl) kl_mean += kl;
  kl_mean /= static_cast<double>(num_blocks);

  b.consistency = consistency_sum * pair_scale;
  b.entropy_term = entropy_weight * kl_mean;
  b.total = b.consistency + b.entropy_term;
  result.grad_view1 = scatter_block_values(g1, partition);
  result.grad_view2 = scatter_block_values(g2, partition);
  return result;
}

/// Single-block objective over all K prototypes: symmetric consistency minus
/// lambda_e * H(p_bar). Inputs are full-width probability rows.
inline LossResult global_loss(const Matrix& s1, const Matrix& s2, const Matrix& t1,
                              const Matrix& t2, double lambda_e) {
  require(s1.same_shape(s2) && s1.same_shape(t1) && s1.same_shape(t2),
          "global_loss: probability matrices differ in shape");
  require(lambda_e >= 0.0, "global_loss: lambda_e must be >= 0");
  const std::size_t k = s1.cols();
  Partition single;
  single.blocks.emplace_back(k);
  for (std::size_t c = 0; c < k; ++c) single.blocks[0][c] = c;

  auto wrap = [](const Matrix& m) { return BlockProbs{{m}}; };
  // The KL form differs from -H by the constant log K, so the gradient is shared.
  LossResult result = carp_loss(wrap(s1), wrap(s2), wrap(t1), wrap(t2), single, lambda_e);
  const std::array<const Matrix*, 4> all{&s1, &s2, &t1, &t2};
  std::vector<double> p_bar(k, 0.0);
  for (const Matrix* m : all)
    for (std::size_t i = 0; i < m->rows(); ++i)
      for (std::size_t c = 0; c < k; ++c) p_bar[c] += (*m)(i, c);
  for (double& v : p_bar) v /= 4.0 * static_cast<double>(s1.rows());

  auto& b = result.breakdown;
  b.entropy_term = -lambda_e * entropy(p_bar);
  b.total = b.consistency + b.entropy_term;
  return result;
}

}  // namespace carp
