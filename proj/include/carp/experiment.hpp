#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "carp/data.hpp"
#include "carp/eval.hpp"
#include "carp/trainer.hpp"

namespace carp {

struct BlobSplit {
  Dataset train;
  Dataset test;
};

/// Blobs with per_class + test_per_class samples per class; the last
/// test_per_class of every class are held out.
inline BlobSplit make_blob_split(const RunConfig& cfg) {
  RunStreams streams(cfg.seed);
  const std::size_t per_class = cfg.per_class + cfg.test_per_class;
  Dataset all = make_blobs(streams.data, cfg.num_classes, per_class, cfg.in_dim, cfg.spread);
  BlobSplit split;
  split.train.num_classes = split.test.num_classes = all.num_classes;
  split.train.samples = Matrix(cfg.num_classes * cfg.per_class, cfg.in_dim);
  split.test.samples = Matrix(cfg.num_classes * cfg.test_per_class, cfg.in_dim);
  std::size_t tr = 0, te = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const bool held_out = i % per_class >= cfg.per_class;
    Dataset& dst = held_out ? split.test : split.train;
    std::size_t& row = held_out ? te : tr;
    std::copy(all.samples.row(i).begin(), all.samples.row(i).end(), dst.samples.row(row).begin());
    dst.labels.push_back(all.labels[i]);
    ++row;
  }
  return split;
}

/// k-NN accuracy of held-out samples against a bank built from the training set.
inline double knn_eval(const ModelParams& params, const BlobSplit& data, const RunConfig& cfg) {
  const auto bank = make_bank(embed(params, data.train.samples, cfg.eval_features),
                              data.train.labels, data.train.num_classes);
  const auto queries = make_bank(embed(params, data.test.samples, cfg.eval_features),
                                 data.test.labels, data.test.num_classes);
  return knn_accuracy(bank, queries, std::min(cfg.knn_k, bank.size()), cfg.knn_tau);
}

struct ExperimentOutcome {
  TrainResult run;
  double knn_student = 0.0;
  double knn_teacher = 0.0;
  /// Averages over the last epoch's steps.
  double final_max_assignment_fraction = 0.0;
  double final_usage_entropy = 0.0;
  /// Minimum over all steps.
  double min_usage_entropy = 0.0;
};

inline ExperimentOutcome run_blob_experiment(const RunConfig& cfg) {
  const BlobSplit data = make_blob_split(cfg);
  EvalHook hook = [&](std::size_t epoch, const ModelParams& student, const ModelParams& teacher) {
    return EvalRecord{epoch, knn_eval(student, data, cfg), knn_eval(teacher, data, cfg)};
  };
  ExperimentOutcome out;
  out.run = train(cfg, data.train.samples, hook);
  out.knn_student = out.run.evals.back().knn_student;
  out.knn_teacher = out.run.evals.back().knn_teacher;

  const auto& metrics = out.run.metrics;
  const std::size_t last_epoch = metrics.back().epoch;
  std::size_t count = 0;
  out.min_usage_entropy = metrics.front().prototype_usage_entropy;
  for (const auto& sm : metrics) {
    out.min_usage_entropy = std::min(out.min_usage_entropy, sm.prototype_usage_entropy);
    if (sm.epoch != last_epoch) continue;
    out.final_max_assignment_fraction += sm.max_assignment_fraction;
    out.final_usage_entropy += sm.prototype_usage_entropy;
    ++count;
  }
  out.final_max_assignment_fraction /= static_cast<double>(count);
  out.final_usage_entropy /= static_cast<double>(count);
  return out;
}

}  // namespace carp
