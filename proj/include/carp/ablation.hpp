#pragma once

#include <algorithm>
#include <cstddef>
#include <future>
#include <string>
#include <vector>

#include "carp/experiment.hpp"
#include "carp/trainer.hpp"

namespace carp {

/// One grid point of an ablation suite.
struct AblationCell {
  std::string label;
  std::string parameter;
  std::string value;
  RunConfig config;
};

inline const std::vector<std::string>& ablation_suites() {
  static const std::vector<std::string> names = {"block_size", "partition_strategy", "ema",
                                                 "prototypes", "batch_size"};
  return names;
}

/// Grid for a suite, derived from `base`. Seeds are filled in by run_ablation.
inline std::vector<AblationCell> make_suite(const std::string& suite, const RunConfig& base) {
  std::vector<AblationCell> cells;
  auto add = [&](std::string parameter, std::string value, RunConfig cfg) {
    cells.push_back({parameter + "=" + value, std::move(parameter), std::move(value), std::move(cfg)});
  };
  if (suite == "block_size") {
    // Single block (N_B = K) down to small blocks.
    for (std::size_t divisor : {1, 2, 8, 32}) {
      if (base.k % divisor != 0) continue;
      RunConfig cfg = base;
      cfg.objective = Objective::Partitioned;
      cfg.block_size = base.k / divisor;
      add("block_size", std::to_string(cfg.block_size), cfg);
    }
  } else if (suite == "partition_strategy") {
    for (auto s : {PartitionStrategy::Constant, PartitionStrategy::Random}) {
      RunConfig cfg = base;
      cfg.partition_strategy = s;
      add("partition_strategy", to_string(s), cfg);
    }
  } else if (suite == "ema") {
    for (bool teacher : {true, false}) {
      RunConfig cfg = base;
      cfg.use_teacher = teacher;
      add("use_teacher", teacher ? "true" : "false", cfg);
    }
  } else if (suite == "prototypes") {
    for (std::size_t k : {4, 16, 64}) {
      RunConfig cfg = base;
      cfg.k = k;
      cfg.block_size = std::min(base.block_size, k);
      add("k", std::to_string(k), cfg);
    }
  } else if (suite == "batch_size") {
    for (std::size_t n : {32, 64, 128, 256}) {
      RunConfig cfg = base;
      cfg.batch_size = n;
      add("batch_size", std::to_string(n), cfg);
    }
  } else {
    throw ContractError("unknown ablation suite '" + suite + "'");
  }
  return cells;
}

struct AblationRow {
  std::string suite;
  std::string label;
  std::string parameter;
  std::string value;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double knn_student = 0.0;
  double knn_teacher = 0.0;
  double max_assignment_fraction = 0.0;
  double usage_entropy = 0.0;
};

inline AblationRow run_cell(const std::string& suite, const AblationCell& cell, std::uint64_t seed) {
  AblationRow row;
  row.suite = suite;
  row.label = cell.label;
  row.parameter = cell.parameter;
  row.value = cell.value;
  row.seed = seed;
  RunConfig cfg = cell.config;
  cfg.seed = seed;
  try {
    const ExperimentOutcome out = run_blob_experiment(cfg);
    row.ok = true;
    row.knn_student = out.knn_student;
    row.knn_teacher = out.knn_teacher;
    row.max_assignment_fraction = out.final_max_assignment_fraction;
    row.usage_entropy = out.final_usage_entropy;
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  return row;
}

/// Runs every (cell, seed) pair with seeds first_seed .. first_seed + seeds - 1.
/// Cells are independent; `jobs` bounds how many run at once. Row order is
/// fixed regardless of jobs.
inline std::vector<AblationRow> run_ablation(const std::string& suite, const RunConfig& base,
                                             std::size_t seeds, std::uint64_t first_seed = 0,
                                             std::size_t jobs = 1) {
  const auto cells = make_suite(suite, base);
  std::vector<std::pair<const AblationCell*, std::uint64_t>> work;
  for (const auto& cell : cells)
    for (std::size_t s = 0; s < seeds; ++s) work.emplace_back(&cell, first_seed + s);
  std::vector<AblationRow> rows(work.size());
  jobs = std::max<std::size_t>(1, jobs);
  for (std::size_t first = 0; first < work.size(); first += jobs) {
    std::vector<std::future<AblationRow>> batch;
    const std::size_t last = std::min(work.size(), first + jobs);
    for (std::size_t i = first; i < last; ++i)
      batch.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, run_cell,
                                 suite, std::cref(*work[i].first), work[i].second));
    for (std::size_t i = first; i < last; ++i) rows[i] = batch[i - first].get();
  }
  return rows;
}

inline double median(std::vector<double> values) {
  require(!values.empty(), "median: no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace carp
