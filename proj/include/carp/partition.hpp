#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "carp/numerics.hpp"

namespace carp {

enum class PartitionStrategy { Random, Constant };

inline std::string to_string(PartitionStrategy s) {
  return s == PartitionStrategy::Random ? "random" : "constant";
}

inline PartitionStrategy parse_partition_strategy(const std::string& text) {
  if (text == "random") return PartitionStrategy::Random;
  if (text == "constant") return PartitionStrategy::Constant;
  throw ContractError("unknown partition strategy '" + text + "'");
}

struct PartitionSpec {
  std::size_t k = 0;
  std::size_t block_size = 0;
  PartitionStrategy strategy = PartitionStrategy::Random;

  std::size_t num_blocks() const { return block_size ? k / block_size : 0; }

  void validate() const {
    require(block_size >= 1, "partition: block_size must be >= 1");
    require(k >= 1, "partition: k must be >= 1");
    require(k % block_size == 0, "partition: block_size " + std::to_string(block_size) +
                                     " does not divide k " + std::to_string(k));
  }
};

/// Disjoint, equal-sized blocks of prototype indices covering [0, k).
struct Partition {
  std::vector<std::vector<std::size_t>> blocks;

  std::size_t num_blocks() const { return blocks.size(); }
  std::size_t block_size() const { return blocks.empty() ? 0 : blocks.front().size(); }
  std::size_t k() const { return num_blocks() * block_size(); }

  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Random: a fresh permutation of [0, k) cut into consecutive chunks.
/// Constant: the sequential chunks {0..NB-1}, {NB..2NB-1}, ... (rng untouched).
inline Partition make_partition(const PartitionSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::size_t> order;
  if (spec.strategy == PartitionStrategy::Random) {
    order = sample_without_replacement(rng, spec.k, spec.k);
  } else {
    order.resize(spec.k);
    for (std::size_t i = 0; i < spec.k; ++i) order[i] = i;
  }
  Partition p;
  p.blocks.reserve(spec.num_blocks());
  for (std::size_t b = 0; b < spec.num_blocks(); ++b) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(b * spec.block_size);
    p.blocks.emplace_back(first, first + static_cast<std::ptrdiff_t>(spec.block_size));
  }
  return p;
}

/// Probabilities laid out per block: blocks[j] is an N x NB matrix whose rows
/// are softmaxes over the prototypes of block j.
struct BlockProbs {
  std::vector<Matrix> blocks;

  std::size_t num_blocks() const { return blocks.size(); }
  std::size_t batch() const { return blocks.empty() ? 0 : blocks.front().rows(); }
  std::size_t block_size() const { return blocks.empty() ? 0 : blocks.front().cols(); }

  bool same_shape(const BlockProbs& other) const {
    if (blocks.size() != other.blocks.size()) return false;
    for (std::size_t j = 0; j < blocks.size(); ++j)
      if (!blocks[j].same_shape(other.blocks[j])) return false;
    return true;
  }
};

/// Column-gathers each block out of N x K logits and softmaxes within the block.
inline BlockProbs gather_block_logits(const Matrix& logits, const Partition& p) {
  require(p.k() == logits.cols(), "gather_block_logits: partition covers " +
                                      std::to_string(p.k()) + " prototypes, logits have " +
                                      std::to_string(logits.cols()) + " columns");
  BlockProbs out;
  out.blocks.reserve(p.num_blocks());
  for (const auto& block : p.blocks) {
    Matrix gathered(logits.rows(), block.size());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      for (std::size_t c = 0; c < block.size(); ++c) gathered(i, c) = logits(i, block[c]);
      softmax_inplace(gathered.row(i));
    }
    out.blocks.push_back(std::move(gathered));
  }
  return out;
}

/// Inverse of the column gather: writes per-block N x NB values back into N x K.
inline Matrix scatter_block_values(const std::vector<Matrix>& per_block, const Partition& p) {
  require(per_block.size() == p.num_blocks(), "scatter_block_values: block count mismatch");
  const std::size_t n = per_block.empty() ? 0 : per_block.front().rows();
  Matrix out(n, p.k());
  for (std::size_t j = 0; j < p.num_blocks(); ++j) {
    const auto& block = p.blocks[j];
    require(per_block[j].rows() == n && per_block[j].cols() == block.size(),
            "scatter_block_values: block shape mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < block.size(); ++c) out(i, block[c]) = per_block[j](i, c);
  }
  return out;
}

}  // namespace carp
