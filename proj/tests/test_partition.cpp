#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "carp/partition.hpp"
#include "support.hpp"

using carp::Matrix;
using carp::Partition;
using carp::PartitionSpec;
using carp::PartitionStrategy;
using carp::Rng;

namespace {

void expect_valid(const Partition& p, std::size_t k, std::size_t block_size) {
  ASSERT_EQ(p.num_blocks(), k / block_size);
  std::set<std::size_t> seen;
  for (const auto& block : p.blocks) {
    ASSERT_EQ(block.size(), block_size);
    for (auto i : block) {
      EXPECT_LT(i, k);
      EXPECT_TRUE(seen.insert(i).second) << "index " << i << " appears twice";
    }
  }
  EXPECT_EQ(seen.size(), k);
}

}  // namespace

TEST(MakePartition, SixPrototypesTwoBlocks) {
  Rng rng(1);
  const Partition p = carp::make_partition({6, 3, PartitionStrategy::Random}, rng);
  expect_valid(p, 6, 3);
}

TEST(MakePartition, EightPrototypesBlocksOfFour) {
  Rng rng(2);
  const PartitionSpec spec{8, 4, PartitionStrategy::Random};
  EXPECT_EQ(spec.num_blocks(), 2u);
  expect_valid(carp::make_partition(spec, rng), 8, 4);
}

TEST(MakePartition, SingleBlockCoversEverything) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Partition p = carp::make_partition({4, 4, PartitionStrategy::Random}, rng);
    ASSERT_EQ(p.num_blocks(), 1u);
    std::sort(p.blocks[0].begin(), p.blocks[0].end());
    EXPECT_EQ(p.blocks[0], (std::vector<std::size_t>{0, 1, 2, 3}));
  }
}

TEST(MakePartition, NonDividingBlockSizeThrows) {
  Rng rng(0);
  EXPECT_THROW(carp::make_partition({10, 4, PartitionStrategy::Random}, rng), carp::ContractError);
  EXPECT_THROW(carp::make_partition({10, 0, PartitionStrategy::Random}, rng), carp::ContractError);
}

TEST(MakePartition, RandomDrawsAreAlwaysValid) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t block = 1 + rng.below(6);
    const std::size_t k = block * (1 + rng.below(8));
    expect_valid(carp::make_partition({k, block, PartitionStrategy::Random}, rng), k, block);
  }
}

TEST(MakePartition, CoBlockProbabilityMatchesUniformPartition) {
  // For K=8 in two blocks of 4, prototype 1 shares 0's block in 3 of the 7 other slots.
  Rng rng(99);
  const int draws = 10000;
  int together = 0;
  for (int d = 0; d < draws; ++d) {
    const Partition p = carp::make_partition({8, 4, PartitionStrategy::Random}, rng);
    for (const auto& block : p.blocks) {
      const bool has0 = std::find(block.begin(), block.end(), 0u) != block.end();
      const bool has1 = std::find(block.begin(), block.end(), 1u) != block.end();
      together += has0 && has1;
    }
  }
  EXPECT_NEAR(static_cast<double>(together) / draws, 3.0 / 7.0, 0.02);
}

TEST(MakePartition, ConstantIsSequentialAndRepeatable) {
  Rng rng(5);
  const Rng before = rng;
  const PartitionSpec spec{12, 4, PartitionStrategy::Constant};
  const Partition a = carp::make_partition(spec, rng);
  const Partition b = carp::make_partition(spec, rng);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(rng == before);
  EXPECT_EQ(a.blocks[0], (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(a.blocks[2], (std::vector<std::size_t>{8, 9, 10, 11}));
}

TEST(MakePartition, RandomChangesBetweenCalls) {
  Rng rng(8);
  const PartitionSpec spec{16, 4, PartitionStrategy::Random};
  const Partition a = carp::make_partition(spec, rng);
  const Partition b = carp::make_partition(spec, rng);
  EXPECT_NE(a, b);
}

TEST(StrategyNames, RoundTrip) {
  for (auto s : {PartitionStrategy::Random, PartitionStrategy::Constant})
    EXPECT_EQ(carp::parse_partition_strategy(carp::to_string(s)), s);
  EXPECT_THROW(carp::parse_partition_strategy("diagonal"), carp::ContractError);
}

TEST(GatherBlockLogits, SingleUniformBlock) {
  const Partition p{{{0, 1, 2, 3}}};
  const auto probs = carp::gather_block_logits(Matrix{{0, 0, 0, 0}}, p);
  ASSERT_EQ(probs.num_blocks(), 1u);
  for (double v : probs.blocks[0].row(0)) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(GatherBlockLogits, AnalyticTwoBlocks) {
  const Partition p{{{0, 1}, {2, 3}}};
  const auto probs = carp::gather_block_logits(Matrix{{std::log(3.0), 0, 0, 0}}, p);
  EXPECT_NEAR(probs.blocks[0](0, 0), 0.75, 1e-15);
  EXPECT_NEAR(probs.blocks[0](0, 1), 0.25, 1e-15);
  EXPECT_NEAR(probs.blocks[1](0, 0), 0.5, 1e-15);
  EXPECT_NEAR(probs.blocks[1](0, 1), 0.5, 1e-15);
}

TEST(GatherBlockLogits, MatchesNaiveLoop) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix logits = testing_support::random_matrix(rng, 3, 8, 3.0);
    const Partition p = carp::make_partition({8, 4, PartitionStrategy::Random}, rng);
    const auto probs = carp::gather_block_logits(logits, p);
    for (std::size_t j = 0; j < p.num_blocks(); ++j)
      for (std::size_t i = 0; i < 3; ++i) {
        double denom = 0.0;
        for (auto c : p.blocks[j]) denom += std::exp(logits(i, c));
        for (std::size_t c = 0; c < 4; ++c)
          EXPECT_NEAR(probs.blocks[j](i, c), std::exp(logits(i, p.blocks[j][c])) / denom, 1e-14);
      }
  }
}

TEST(GatherBlockLogits, WidthMismatchThrows) {
  const Partition p{{{0, 1}, {2, 3}}};
  EXPECT_THROW(carp::gather_block_logits(Matrix(2, 6), p), carp::ContractError);
}

TEST(ScatterBlockValues, InvertsGatherLayout) {
  Rng rng(6);
  const Partition p = carp::make_partition({6, 2, PartitionStrategy::Random}, rng);
  const Matrix values = testing_support::random_matrix(rng, 2, 6);
  std::vector<Matrix> per_block;
  for (const auto& block : p.blocks) {
    Matrix m(2, block.size());
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < block.size(); ++c) m(i, c) = values(i, block[c]);
    per_block.push_back(m);
  }
  EXPECT_EQ(carp::scatter_block_values(per_block, p), values);
}
