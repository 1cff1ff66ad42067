#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "carp/loss.hpp"
#include "support.hpp"

using carp::BlockProbs;
using carp::Matrix;
using carp::Partition;
using carp::Rng;
using testing_support::random_matrix;
using testing_support::random_probs;

namespace {

const double kLog2 = std::log(2.0);
const double kLog4 = std::log(4.0);

std::vector<double> one_hot(std::size_t width, std::size_t at) {
  std::vector<double> v(width, 0.0);
  v[at] = 1.0;
  return v;
}

Partition sequential(std::size_t k, std::size_t block) {
  Rng unused(0);
  return carp::make_partition({k, block, carp::PartitionStrategy::Constant}, unused);
}

BlockProbs random_block_probs(Rng& rng, std::size_t blocks, std::size_t n, std::size_t width) {
  BlockProbs b;
  for (std::size_t j = 0; j < blocks; ++j) b.blocks.push_back(random_probs(rng, n, width));
  return b;
}

/// Loss written straight from its definition, one scalar at a time.
double reference_carp_total(const BlockProbs& s1, const BlockProbs& s2, const BlockProbs& t1,
                            const BlockProbs& t2) {
  const std::size_t blocks = s1.num_blocks(), n = s1.batch(), w = s1.block_size();
  double cons = 0.0, kl = 0.0;
  for (std::size_t j = 0; j < blocks; ++j) {
    std::vector<double> mean(w, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double ab = 0.0, ba = 0.0;
      for (std::size_t c = 0; c < w; ++c) {
        ab += s1.blocks[j](i, c) * t2.blocks[j](i, c);
        ba += s2.blocks[j](i, c) * t1.blocks[j](i, c);
        mean[c] += s1.blocks[j](i, c) + s2.blocks[j](i, c) + t1.blocks[j](i, c) + t2.blocks[j](i, c);
      }
      cons += -std::log(std::max(ab, 1e-12)) - std::log(std::max(ba, 1e-12));
    }
    double block_kl = std::log(static_cast<double>(w));
    for (double m : mean) {
      const double p = m / (4.0 * n);
      if (p > 0) block_kl += p * std::log(p);
    }
    kl += block_kl;
  }
  return cons / static_cast<double>(n * blocks) + kl / static_cast<double>(blocks);
}

/// Central differences of f with respect to every entry of x.
Matrix numeric_gradient(Matrix x, const std::function<double(const Matrix&)>& f, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (std::size_t e = 0; e < x.size(); ++e) {
    const double saved = x.data()[e];
    x.data()[e] = saved + h;
    const double up = f(x);
    x.data()[e] = saved - h;
    const double down = f(x);
    x.data()[e] = saved;
    g.data()[e] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(Consistency, ClosedForms) {
  const auto e2 = one_hot(4, 2);
  EXPECT_EQ(carp::consistency(e2, e2), 0.0);
  const std::vector<double> u(4, 0.25);
  EXPECT_NEAR(carp::consistency(u, u), kLog4, 1e-12);
  EXPECT_NEAR(carp::consistency(one_hot(4, 0), one_hot(4, 1)), -std::log(1e-12), 1e-12);
  EXPECT_NEAR(carp::consistency(one_hot(4, 0), one_hot(4, 1)), 27.631021115928547, 1e-12);
}

TEST(Consistency, NonNegativeOnProbabilityRows) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t w = 1 + rng.below(9);
    const Matrix p = random_probs(rng, 2, w, 5.0);
    EXPECT_GE(carp::consistency(p.row(0), p.row(1)), 0.0);
  }
}

TEST(KlToUniform, ClosedForms) {
  EXPECT_NEAR(carp::kl_to_uniform(std::vector<double>(4, 0.25)), 0.0, 1e-15);
  EXPECT_NEAR(carp::kl_to_uniform(one_hot(4, 1)), kLog4, 1e-12);
  EXPECT_NEAR(carp::kl_to_uniform(std::vector<double>{0.5, 0.5, 0, 0}), kLog2, 1e-12);
}

TEST(KlToUniform, BoundedByLogWidth) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t w = 1 + rng.below(9);
    const Matrix p = random_probs(rng, 1, w, 6.0);
    const double kl = carp::kl_to_uniform(p.row(0));
    EXPECT_GE(kl, -1e-15);
    EXPECT_LE(kl, std::log(static_cast<double>(w)) + 1e-12);
  }
}

TEST(BatchAverage, UniformStaysUniform) {
  BlockProbs s{{Matrix(3, 4, 0.25), Matrix(3, 4, 0.25)}};
  const Matrix mean = carp::batch_average(s, s);
  for (double v : mean.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(BatchAverage, TwoPointMean) {
  const BlockProbs s{{Matrix{{1, 0}}}}, t{{Matrix{{0, 1}}}};
  EXPECT_EQ(carp::batch_average(s, t), (Matrix{{0.5, 0.5}}));
}

TEST(BatchAverage, MatchesAccumulationLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t blocks = 1 + rng.below(4), n = 1 + rng.below(5), w = 2 + rng.below(4);
    const BlockProbs s = random_block_probs(rng, blocks, n, w);
    const BlockProbs t = random_block_probs(rng, blocks, n, w);
    const Matrix mean = carp::batch_average(s, t);
    for (std::size_t j = 0; j < blocks; ++j) {
      double row_total = 0.0;
      for (std::size_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += s.blocks[j](i, c) + t.blocks[j](i, c);
        EXPECT_NEAR(mean(j, c), acc / (2.0 * n), 1e-15);
        row_total += mean(j, c);
      }
      EXPECT_NEAR(row_total, 1.0, 1e-12);
    }
  }
}

TEST(BatchAverage, ShapeMismatchThrows) {
  const BlockProbs a{{Matrix(2, 2, 0.5)}}, b{{Matrix(3, 2, 0.5)}};
  EXPECT_THROW(carp::batch_average(a, b), carp::ContractError);
}

TEST(CarpLoss, GlobalOptimumIsZero) {
  // Four samples, two blocks of two; one-hot assignments spread evenly in each block.
  const Matrix b0{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
  const Matrix b1{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
  const BlockProbs s{{b0, b1}};
  const auto r = carp::carp_loss(s, s, s, s, sequential(4, 2));
  EXPECT_EQ(r.breakdown.consistency, 0.0);
  EXPECT_NEAR(r.breakdown.entropy_term, 0.0, 1e-15);
  EXPECT_NEAR(r.breakdown.total, 0.0, 1e-15);
}

TEST(CarpLoss, UniformSingleBlockIsTwoLogTwo) {
  const BlockProbs s{{Matrix{{0.5, 0.5}}}};
  const auto r = carp::carp_loss(s, s, s, s, sequential(2, 2));
  EXPECT_NEAR(r.breakdown.consistency, 2 * kLog2, 1e-12);
  EXPECT_NEAR(r.breakdown.entropy_term, 0.0, 1e-12);
  EXPECT_NEAR(r.breakdown.total, 1.3862943611198906, 1e-12);
}

TEST(CarpLoss, MatchesDefinitionAndBreakdownInvariants) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t blocks = 1 + rng.below(4), n = 1 + rng.below(5), w = 2 + rng.below(4);
    const auto s1 = random_block_probs(rng, blocks, n, w), s2 = random_block_probs(rng, blocks, n, w);
    const auto t1 = random_block_probs(rng, blocks, n, w), t2 = random_block_probs(rng, blocks, n, w);
    const auto r = carp::carp_loss(s1, s2, t1, t2, sequential(blocks * w, w));
    const auto& b = r.breakdown;
    EXPECT_NEAR(b.total, reference_carp_total(s1, s2, t1, t2), 1e-12);
    EXPECT_NEAR(b.total, b.consistency + b.entropy_term, 1e-12);
    EXPECT_GE(b.consistency, 0.0);
    EXPECT_GE(b.entropy_term, 0.0);
    EXPECT_EQ(b.per_block_kl.size(), blocks);
  }
}

TEST(CarpLoss, ViewSwapSymmetryIsExact) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t blocks = 1 + rng.below(4), n = 1 + rng.below(6), w = 2 + rng.below(5);
    const auto s1 = random_block_probs(rng, blocks, n, w), s2 = random_block_probs(rng, blocks, n, w);
    const auto t1 = random_block_probs(rng, blocks, n, w), t2 = random_block_probs(rng, blocks, n, w);
    const Partition p = sequential(blocks * w, w);
    EXPECT_EQ(carp::carp_loss(s1, s2, t1, t2, p).breakdown.total,
              carp::carp_loss(s2, s1, t2, t1, p).breakdown.total);
  }
}

TEST(CarpLoss, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const std::size_t n = 3, k = 8, w = 4;
  for (int trial = 0; trial < 10; ++trial) {
    const Partition p = carp::make_partition({k, w, carp::PartitionStrategy::Random}, rng);
    const Matrix l1 = random_matrix(rng, n, k, 2.0), l2 = random_matrix(rng, n, k, 2.0);
    const auto t1 = carp::gather_block_logits(random_matrix(rng, n, k, 2.0), p);
    const auto t2 = carp::gather_block_logits(random_matrix(rng, n, k, 2.0), p);
    const auto r = carp::carp_loss(carp::gather_block_logits(l1, p),
                                   carp::gather_block_logits(l2, p), t1, t2, p);
    const Matrix fd1 = numeric_gradient(l1, [&](const Matrix& x) {
      return carp::carp_loss(carp::gather_block_logits(x, p), carp::gather_block_logits(l2, p), t1,
                             t2, p).breakdown.total;
    });
    const Matrix fd2 = numeric_gradient(l2, [&](const Matrix& x) {
      return carp::carp_loss(carp::gather_block_logits(l1, p), carp::gather_block_logits(x, p), t1,
                             t2, p).breakdown.total;
    });
    for (std::size_t e = 0; e < fd1.size(); ++e) {
      EXPECT_NEAR(r.grad_view1.data()[e], fd1.data()[e], 1e-6);
      EXPECT_NEAR(r.grad_view2.data()[e], fd2.data()[e], 1e-6);
    }
  }
}

TEST(CarpLoss, GradientDoesNotDependOnTeacherLogitsBeyondTheirValues) {
  // Two teacher inputs with equal probabilities but different provenance give
  // the same gradient, and the gradient agrees with differences that hold t fixed.
  Rng rng(7);
  const Partition p = sequential(6, 3);
  const Matrix l1 = random_matrix(rng, 2, 6), l2 = random_matrix(rng, 2, 6);
  Matrix tl = random_matrix(rng, 2, 6);
  const auto t1 = carp::gather_block_logits(tl, p);
  for (double& v : tl.data()) v += 5.0;  // softmax-invariant shift
  const auto t1_shifted = carp::gather_block_logits(tl, p);
  const auto t2 = carp::gather_block_logits(random_matrix(rng, 2, 6), p);
  const auto s1 = carp::gather_block_logits(l1, p), s2 = carp::gather_block_logits(l2, p);
  const auto a = carp::carp_loss(s1, s2, t1, t2, p);
  const auto b = carp::carp_loss(s1, s2, t1_shifted, t2, p);
  for (std::size_t e = 0; e < a.grad_view1.size(); ++e)
    EXPECT_NEAR(a.grad_view1.data()[e], b.grad_view1.data()[e], 1e-14);
}

TEST(CarpLoss, ShapeMismatchThrows) {
  const BlockProbs a{{Matrix(2, 2, 0.5)}}, b{{Matrix(3, 2, 0.5)}};
  EXPECT_THROW(carp::carp_loss(a, a, a, b, sequential(2, 2)), carp::ContractError);
  EXPECT_THROW(carp::carp_loss(a, a, a, a, sequential(4, 2)), carp::ContractError);
}

TEST(GlobalLoss, ConsistencyOptimumWithoutRegularizer) {
  const Matrix s{{0, 1, 0}, {1, 0, 0}};
  const auto r = carp::global_loss(s, s, s, s, 0.0);
  EXPECT_EQ(r.breakdown.total, 0.0);
}

TEST(GlobalLoss, UniformTwoPrototypes) {
  const Matrix u{{0.5, 0.5}};
  const auto r = carp::global_loss(u, u, u, u, 1.0);
  EXPECT_NEAR(r.breakdown.consistency, 2 * kLog2, 1e-12);
  EXPECT_NEAR(r.breakdown.entropy_term, -kLog2, 1e-12);
  EXPECT_NEAR(r.breakdown.total, kLog2, 1e-12);
}

TEST(GlobalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.below(4), k = 2 + rng.below(7);
    const double lambda = rng.uniform(0.0, 2.0);
    const Matrix l1 = random_matrix(rng, n, k, 2.0), l2 = random_matrix(rng, n, k, 2.0);
    const Matrix t1 = random_probs(rng, n, k), t2 = random_probs(rng, n, k);
    const auto r = carp::global_loss(carp::softmax_rows(l1), carp::softmax_rows(l2), t1, t2, lambda);
    const Matrix fd1 = numeric_gradient(l1, [&](const Matrix& x) {
      return carp::global_loss(carp::softmax_rows(x), carp::softmax_rows(l2), t1, t2, lambda)
          .breakdown.total;
    });
    const Matrix fd2 = numeric_gradient(l2, [&](const Matrix& x) {
      return carp::global_loss(carp::softmax_rows(l1), carp::softmax_rows(x), t1, t2, lambda)
          .breakdown.total;
    });
    for (std::size_t e = 0; e < fd1.size(); ++e) {
      EXPECT_NEAR(r.grad_view1.data()[e], fd1.data()[e], 1e-6);
      EXPECT_NEAR(r.grad_view2.data()[e], fd2.data()[e], 1e-6);
    }
  }
}

TEST(GlobalLoss, AgreesWithSingleBlockCarpLoss) {
  // Same consistency and gradients; the regularizers differ by the constant lambda * log K.
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(5), k = 2 + rng.below(8);
    const double lambda = rng.uniform(0.0, 1.0);
    const Matrix s1 = random_probs(rng, n, k), s2 = random_probs(rng, n, k);
    const Matrix t1 = random_probs(rng, n, k), t2 = random_probs(rng, n, k);
    const auto g = carp::global_loss(s1, s2, t1, t2, lambda);
    const auto c = carp::carp_loss(BlockProbs{{s1}}, BlockProbs{{s2}}, BlockProbs{{t1}},
                                   BlockProbs{{t2}}, sequential(k, k), lambda);
    EXPECT_NEAR(g.breakdown.consistency, c.breakdown.consistency, 1e-12);
    EXPECT_NEAR(g.breakdown.total + lambda * std::log(static_cast<double>(k)), c.breakdown.total,
                1e-12);
    for (std::size_t e = 0; e < g.grad_view1.size(); ++e)
      EXPECT_NEAR(g.grad_view1.data()[e], c.grad_view1.data()[e], 1e-12);
  }
}
