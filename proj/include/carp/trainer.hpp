#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <stdexcept>
#include <string>
#include <vector>

#include "carp/data.hpp"
#include "carp/ema.hpp"
#include "carp/loss.hpp"
#include "carp/model.hpp"
#include "carp/numerics.hpp"
#include "carp/partition.hpp"

namespace carp {

enum class Objective { Partitioned, Global };

inline std::string to_string(Objective o) {
  return o == Objective::Partitioned ? "partitioned" : "global";
}

inline Objective parse_objective(const std::string& text) {
  if (text == "partitioned") return Objective::Partitioned;
  if (text == "global") return Objective::Global;
  throw ContractError("unknown objective '" + text + "'");
}

/// Which activations represent a sample at evaluation time.
enum class FeatureSource { Encoder, Projector };

inline std::string to_string(FeatureSource f) {
  return f == FeatureSource::Encoder ? "encoder" : "projector";
}

inline FeatureSource parse_feature_source(const std::string& text) {
  if (text == "encoder") return FeatureSource::Encoder;
  if (text == "projector") return FeatureSource::Projector;
  throw ContractError("unknown feature source '" + text + "'");
}

inline Matrix embed(const ModelParams& params, const Matrix& samples, FeatureSource source) {
  const ForwardTrace trace = forward(params, samples);
  return source == FeatureSource::Encoder ? trace.features() : trace.embeddings();
}

/// Every knob of a run. All fields are scalars so the config file stays flat.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 300;
  std::size_t batch_size = 128;

  std::size_t k = 64;
  std::size_t block_size = 8;
  PartitionStrategy partition_strategy = PartitionStrategy::Random;
  Objective objective = Objective::Partitioned;
  double lambda_e = 0.01;

  double lr_start = 0.05;
  double lr_end = 0.0005;
  double momentum = 0.9;
  double weight_decay = 1e-6;

  bool use_teacher = true;
  double eta_start = 0.99;
  double eta_end = 1.0;

  // Layer widths after the input, comma separated in the config file.
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::vector<std::size_t> projector_hidden{32, 16};

  // Synthetic blobs; in_dim is also the model input width.
  std::size_t num_classes = 8;
  std::size_t per_class = 128;
  std::size_t test_per_class = 32;
  std::size_t in_dim = 16;
  double spread = 1.0;
  double view_noise = 0.5;
  double view_mask = 0.25;

  std::size_t eval_every = 0;  // epochs; 0 evaluates only at the end
  std::size_t knn_k = 20;
  double knn_tau = 0.07;
  FeatureSource eval_features = FeatureSource::Encoder;

  std::size_t grad_shards = 1;
  std::size_t threads = 1;

  ModelDims model_dims() const {
    ModelDims d;
    d.encoder = {in_dim};
    d.encoder.insert(d.encoder.end(), encoder_hidden.begin(), encoder_hidden.end());
    d.projector = {d.encoder.back()};
    d.projector.insert(d.projector.end(), projector_hidden.begin(), projector_hidden.end());
    d.k = k;
    return d;
  }

  ViewConfig views() const { return {view_noise, view_mask}; }

  void validate() const {
    require(batch_size >= 1, "config: batch_size must be >= 1");
    require(k >= 2, "config: k must be >= 2");
    require(epochs >= 1, "config: epochs must be >= 1");
    require(!encoder_hidden.empty() && !projector_hidden.empty(),
            "config: encoder and projector need at least one layer each");
    if (objective == Objective::Partitioned) {
      require(block_size >= 1 && k % block_size == 0,
              "config: block_size " + std::to_string(block_size) + " must divide k " +
                  std::to_string(k));
    }
    require(lambda_e >= 0.0, "config: lambda_e must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "config: momentum must be in [0, 1)");
    require(weight_decay >= 0.0, "config: weight_decay must be >= 0");
    require(grad_shards >= 1 && threads >= 1, "config: grad_shards and threads must be >= 1");
    require(knn_k >= 1 && knn_tau > 0.0, "config: knn_k >= 1 and knn_tau > 0 required");
    EmaSchedule{eta_start, eta_end, 1}.validate();
    model_dims().validate();
    ViewConfig{view_noise, view_mask}.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
  /// Share of the step's student assignments that land on the modal prototype.
  double max_assignment_fraction = 0.0;
  /// Entropy of the empirical assignment distribution over K, in [0, log K].
  double prototype_usage_entropy = 0.0;
  /// Mean over blocks of the within-block modal fraction (partitioned objective only).
  double block_max_fraction = 0.0;
  double lr = 0.0;
  double eta = 0.0;
};

struct EvalRecord {
  std::size_t epoch = 0;
  double knn_student = 0.0;
  double knn_teacher = 0.0;
};

struct TrainResult {
  ModelParams student;
  ModelParams teacher;
  std::vector<StepMetrics> metrics;
  std::vector<EvalRecord> evals;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& message, StepMetrics metrics)
      : std::runtime_error(message), metrics_(std::move(metrics)) {}
  const StepMetrics& metrics() const { return metrics_; }

 private:
  StepMetrics metrics_;
};

struct CollapseStats {
  double max_fraction = 0.0;
  double usage_entropy = 0.0;
};

inline CollapseStats collapse_stats(std::span<const std::size_t> assignments, std::size_t k) {
  require(!assignments.empty(), "collapse_stats: no assignments");
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t a : assignments) {
    require(a < k, "collapse_stats: assignment out of range");
    ++counts[a];
  }
  const double total = static_cast<double>(assignments.size());
  CollapseStats out;
  out.max_fraction = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / total;
  for (std::size_t c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / total;
      out.usage_entropy -= p * std::log(p);
    }
  return out;
}

inline std::vector<std::size_t> row_argmax(const Matrix& m) {
  std::vector<std::size_t> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// SGD with heavy-ball momentum and decoupled weight decay:
///   v <- momentum * v + g;  p <- p - lr * (v + weight_decay * p)
class SgdMomentum {
 public:
  SgdMomentum(const ModelParams& like, double momentum, double weight_decay)
      : velocity_(zeros_like(like)), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ModelParams& params, const Gradients& grads, double lr) {
    require(same_structure(params, grads), "SgdMomentum: gradient shape mismatch");
    auto p = leaves(params);
    auto v = leaves(velocity_);
    const auto g = leaves(grads);
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t e = 0; e < p[i].values.size(); ++e) {
        v[i].values[e] = momentum_ * v[i].values[e] + g[i].values[e];
        p[i].values[e] -= lr * (v[i].values[e] + weight_decay_ * p[i].values[e]);
      }
  }

 private:
  Gradients velocity_;
  double momentum_;
  double weight_decay_;
};

struct LossAndGrads {
  LossResult loss;
  /// Student assignments of both views: argmax over K (global objective) or
  /// the argmax inside every block (partitioned objective).
  std::vector<std::size_t> assignments;
  double block_max_fraction = 0.0;
};

/// The objective on already computed logits: teacher logits are constants.
inline LossResult evaluate_objective(const RunConfig& cfg, const Matrix& student1,
                                     const Matrix& student2, const Matrix& teacher1,
                                     const Matrix& teacher2, const Partition& partition) {
  if (cfg.objective == Objective::Global) {
    return global_loss(softmax_rows(student1), softmax_rows(student2), softmax_rows(teacher1),
                       softmax_rows(teacher2), cfg.lambda_e);
  }
  return carp_loss(gather_block_logits(student1, partition),
                   gather_block_logits(student2, partition),
                   gather_block_logits(teacher1, partition),
                   gather_block_logits(teacher2, partition), partition);
}

namespace detail {

inline Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
            m.data().begin() + static_cast<std::ptrdiff_t>(end * m.cols()), out.data().begin());
  return out;
}

/// Runs f(shard) for every shard, on up to `threads` concurrent workers.
template <typename F>
void for_each_shard(std::size_t shards, std::size_t threads, F&& f) {
  if (threads <= 1 || shards <= 1) {
    for (std::size_t s = 0; s < shards; ++s) f(s);
    return;
  }
  for (std::size_t first = 0; first < shards; first += threads) {
    std::vector<std::future<void>> jobs;
    const std::size_t last = std::min(shards, first + threads);
    for (std::size_t s = first; s < last; ++s) jobs.push_back(std::async(std::launch::async, f, s));
    for (auto& j : jobs) j.get();
  }
}

/// Backward over contiguous row shards, reduced in shard order so the sum is
/// independent of how many threads ran it.
inline Gradients sharded_backward(const ModelParams& params, const Matrix& views,
                                  const Matrix& dlogits, std::size_t shards,
                                  std::size_t threads) {
  const std::size_t n = views.rows();
  shards = std::max<std::size_t>(1, std::min(shards, n));
  std::vector<Gradients> partial(shards);
  for_each_shard(shards, threads, [&](std::size_t s) {
    const std::size_t begin = n * s / shards;
    const std::size_t end = n * (s + 1) / shards;
    const Matrix x = take_rows(views, begin, end);
    const ForwardTrace trace = forward(params, x);
    partial[s] = backward(params, trace, take_rows(dlogits, begin, end));
  });
  Gradients total = std::move(partial.front());
  for (std::size_t s = 1; s < shards; ++s) accumulate(total, partial[s]);
  return total;
}

}  // namespace detail

/// One optimization step's loss and student gradients for a pair of view batches.
inline LossAndGrads loss_and_gradients(const RunConfig& cfg, const ModelParams& student,
                                       const ModelParams& teacher, const Matrix& view1,
                                       const Matrix& view2, const Partition& partition,
                                       Gradients* grads_out) {
  const ForwardTrace trace1 = forward(student, view1);
  const ForwardTrace trace2 = forward(student, view2);
  const Matrix& s1 = trace1.logits;
  const Matrix& s2 = trace2.logits;
  const bool self_targets = &teacher == &student;
  const Matrix t1 = self_targets ? s1 : forward(teacher, view1).logits;
  const Matrix t2 = self_targets ? s2 : forward(teacher, view2).logits;

  LossAndGrads out;
  out.loss = evaluate_objective(cfg, s1, s2, t1, t2, partition);

  if (cfg.objective == Objective::Global) {
    out.assignments = row_argmax(s1);
    const auto second = row_argmax(s2);
    out.assignments.insert(out.assignments.end(), second.begin(), second.end());
  } else {
    // Within-block argmax, reported by global prototype index.
    double modal_sum = 0.0;
    std::vector<std::size_t> local;
    for (const auto& block : partition.blocks) {
      local.clear();
      for (const Matrix* logits : {&s1, &s2})
        for (std::size_t i = 0; i < logits->rows(); ++i) {
          std::size_t arg = 0;
          for (std::size_t c = 1; c < block.size(); ++c)
            if ((*logits)(i, block[c]) > (*logits)(i, block[arg])) arg = c;
          local.push_back(arg);
          out.assignments.push_back(block[arg]);
        }
      modal_sum += collapse_stats(local, block.size()).max_fraction;
    }
    out.block_max_fraction = modal_sum / static_cast<double>(partition.num_blocks());
  }

  if (grads_out) {
    if (cfg.grad_shards == 1) {
      *grads_out = backward(student, trace1, out.loss.grad_view1);
      accumulate(*grads_out, backward(student, trace2, out.loss.grad_view2));
    } else {
      *grads_out = detail::sharded_backward(student, view1, out.loss.grad_view1,
                                            cfg.grad_shards, cfg.threads);
      accumulate(*grads_out, detail::sharded_backward(student, view2, out.loss.grad_view2,
                                                      cfg.grad_shards, cfg.threads));
    }
  }
  return out;
}

using EvalHook = std::function<EvalRecord(std::size_t epoch, const ModelParams& student,
                                          const ModelParams& teacher)>;
using StepHook = std::function<void(const StepMetrics&)>;

inline std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) {
  return (samples + batch - 1) / batch;
}

/// Random streams of one run, all derived from cfg.seed.
struct RunStreams {
  Rng init;
  Rng data;
  Rng train;

  explicit RunStreams(std::uint64_t seed) {
    Rng root(seed);
    init = root.fork();
    data = root.fork();
    train = root.fork();
  }
};

/// Student/teacher training on unlabeled samples.
inline TrainResult train(const RunConfig& cfg, const Matrix& samples, const EvalHook& eval = {},
                         const StepHook& on_step = {}) {
  cfg.validate();
  require(samples.rows() >= 1, "train: empty dataset");
  require(samples.cols() == cfg.in_dim, "train: sample width != in_dim");
  require(samples.all_finite(), "train: non-finite samples");

  RunStreams streams(cfg.seed);
  TrainResult result;
  result.student = init_model(streams.init, cfg.model_dims());
  result.teacher = result.student;
  SgdMomentum optimizer(result.student, cfg.momentum, cfg.weight_decay);

  const std::size_t m = samples.rows();
  const std::size_t per_epoch = steps_per_epoch(m, cfg.batch_size);
  const std::size_t total_steps = cfg.epochs * per_epoch;
  const CosineSchedule lr_schedule{cfg.lr_start, cfg.lr_end, total_steps};
  const EmaSchedule eta_schedule{cfg.eta_start, cfg.eta_end, total_steps};
  const PartitionSpec partition_spec{
      cfg.k, cfg.objective == Objective::Partitioned ? cfg.block_size : cfg.k,
      cfg.partition_strategy};
  const ViewConfig view_cfg = cfg.views();

  Rng& rng = streams.train;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = sample_without_replacement(rng, m, m);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(m, begin + cfg.batch_size);
      Matrix batch(end - begin, samples.cols());
      for (std::size_t i = begin; i < end; ++i)
        std::copy(samples.row(order[i]).begin(), samples.row(order[i]).end(),
                  batch.row(i - begin).begin());
      auto [view1, view2] = make_batch_views(rng, batch, view_cfg);
      const Partition partition = make_partition(partition_spec, rng);

      // Without a momentum encoder the targets are the student's own outputs.
      const ModelParams& target_net = cfg.use_teacher ? result.teacher : result.student;
      Gradients grads;
      const LossAndGrads lg =
          loss_and_gradients(cfg, result.student, target_net, view1, view2, partition, &grads);

      StepMetrics sm;
      sm.step = step;
      sm.epoch = epoch;
      sm.loss = lg.loss.breakdown;
      const CollapseStats cs = collapse_stats(lg.assignments, cfg.k);
      sm.max_assignment_fraction = cs.max_fraction;
      sm.prototype_usage_entropy = cs.usage_entropy;
      sm.block_max_fraction = lg.block_max_fraction;
      sm.lr = schedule_value(lr_schedule, step);
      sm.eta = cfg.use_teacher ? eta_schedule.at(step) : 0.0;

      if (!std::isfinite(sm.loss.total)) {
        throw TrainingAborted("non-finite loss at step " + std::to_string(step) + " (epoch " +
                                  std::to_string(epoch) + ")",
                              sm);
      }

      optimizer.step(result.student, grads, sm.lr);
      if (cfg.use_teacher) {
        ema_update(result.teacher, result.student, sm.eta);
      } else {
        result.teacher = result.student;
      }
      result.metrics.push_back(sm);
      if (on_step) on_step(sm);
    }
    const bool last = epoch + 1 == cfg.epochs;
    const bool due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
    if (eval && (last || due)) result.evals.push_back(eval(epoch + 1, result.student, result.teacher));
  }
  return result;
}

}  // namespace carp
