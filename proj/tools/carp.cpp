// carp: train, evaluate and ablate partitioned-prototype self-supervised models.
//
//   carp train  --config PATH --out DIR
//   carp eval   --ckpt PATH --mode knn|cluster [--branch student|teacher] [--k INT] [--tau FLOAT]
//   carp ablate --suite NAME --out DIR [--seeds INT]

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "carp/ablation.hpp"
#include "carp/checkpoint.hpp"
#include "carp/config.hpp"
#include "carp/data.hpp"
#include "carp/eval.hpp"
#include "carp/experiment.hpp"
#include "carp/report.hpp"
#include "carp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitFailure = 3;

struct LoadedData {
  carp::Dataset train;
  std::optional<carp::Dataset> test;
};

LoadedData load_data(carp::FileConfig& cfg) {
  LoadedData data;
  if (cfg.dataset.source == "idx") {
    data.train = carp::load_idx(cfg.dataset.idx_images, cfg.dataset.idx_labels);
    cfg.run.in_dim = data.train.in_dim();
    cfg.run.num_classes = static_cast<std::size_t>(data.train.num_classes);
    if (!cfg.dataset.idx_test_images.empty())
      data.test = carp::load_idx(cfg.dataset.idx_test_images, cfg.dataset.idx_test_labels);
    return data;
  }
  carp::BlobSplit split = carp::make_blob_split(cfg.run);
  data.train = std::move(split.train);
  data.test = std::move(split.test);
  return data;
}

double knn_for(const carp::ModelParams& params, const LoadedData& data, std::size_t k, double tau,
               carp::FeatureSource features) {
  const auto bank = carp::make_bank(carp::embed(params, data.train.samples, features),
                                    data.train.labels, data.train.num_classes);
  if (data.test) {
    const auto queries = carp::make_bank(carp::embed(params, data.test->samples, features),
                                         data.test->labels, data.test->num_classes);
    return carp::knn_accuracy(bank, queries, std::min(k, bank.size()), tau);
  }
  return carp::knn_loo_accuracy(bank, std::min(k, bank.size() - 1), tau);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  carp::FileConfig cfg;
  try {
    cfg = carp::load_config(config_path);
  } catch (const carp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  LoadedData data;
  try {
    data = load_data(cfg);
    cfg.run.validate();
  } catch (const std::exception& e) {
    std::cerr << "invalid setup: " << e.what() << "\n";
    return kExitUsage;
  }
  write_text(out / "resolved-config.txt", carp::resolved_config_text(cfg));

  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  std::ofstream evals(out / "eval.jsonl", std::ios::binary);
  const carp::RunConfig& run = cfg.run;
  carp::EvalHook hook = [&](std::size_t epoch, const carp::ModelParams& student,
                            const carp::ModelParams& teacher) {
    carp::EvalRecord rec{epoch,
                         knn_for(student, data, run.knn_k, run.knn_tau, run.eval_features),
                         knn_for(teacher, data, run.knn_k, run.knn_tau, run.eval_features)};
    evals << carp::to_json(rec).dump() << "\n";
    return rec;
  };
  carp::StepHook on_step = [&](const carp::StepMetrics& m) {
    metrics << carp::to_json(m).dump() << "\n";
  };

  try {
    const carp::TrainResult result = carp::train(run, data.train.samples, hook, on_step);
    carp::save_checkpoint((out / "student.ckpt").string(), carp::to_checkpoint(result.student));
    carp::save_checkpoint((out / "teacher.ckpt").string(), carp::to_checkpoint(result.teacher));
    const auto& last = result.evals.back();
    std::cout << json{{"steps", result.metrics.size()},
                      {"knn_student", last.knn_student},
                      {"knn_teacher", last.knn_teacher},
                      {"final_loss", result.metrics.back().loss.total}}
                     .dump()
              << "\n";
  } catch (const carp::TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n"
              << carp::to_json(e.metrics()).dump() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

struct EvalOptions {
  std::string ckpt;
  std::string mode;
  std::string branch;
  std::string config;
  std::string features;
  std::string bank_out;
  std::size_t k = 20;
  double tau = 0.07;
  std::size_t clusters = 0;
  std::size_t iters = 100;
  std::size_t redos = 20;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalOptions& opt) {
  fs::path ckpt_path(opt.ckpt);
  std::string branch = opt.branch.empty() ? "student" : opt.branch;
  if (fs::is_directory(ckpt_path)) {
    ckpt_path /= branch + ".ckpt";
  } else if (!opt.branch.empty()) {
    const auto name = ckpt_path.filename().string();
    if (name == "student.ckpt" || name == "teacher.ckpt")
      ckpt_path = ckpt_path.parent_path() / (branch + ".ckpt");
  }
  const fs::path config_path =
      opt.config.empty() ? ckpt_path.parent_path() / "resolved-config.txt" : fs::path(opt.config);

  carp::ModelParams params;
  try {
    params = carp::model_from_checkpoint(carp::load_checkpoint(ckpt_path.string()));
  } catch (const carp::CheckpointError& e) {
    std::cerr << "corrupt checkpoint " << ckpt_path.string() << ": field '" << e.field()
              << "': " << e.what() << "\n";
    return kExitFailure;
  }

  carp::FileConfig cfg;
  try {
    if (fs::exists(config_path)) cfg = carp::load_config(config_path.string());
  } catch (const carp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  LoadedData data;
  try {
    data = load_data(cfg);
  } catch (const std::exception& e) {
    std::cerr << "cannot build dataset: " << e.what() << "\n";
    return kExitFailure;
  }
  const carp::FeatureSource features =
      opt.features.empty() ? cfg.run.eval_features : carp::parse_feature_source(opt.features);
  if (data.train.in_dim() != params.encoder.front().in_dim()) {
    std::cerr << "checkpoint input width " << params.encoder.front().in_dim()
              << " does not match dataset width " << data.train.in_dim() << "\n";
    return kExitFailure;
  }

  json report{{"mode", opt.mode},
              {"branch", branch},
              {"checkpoint", ckpt_path.string()},
              {"features", carp::to_string(features)}};
  if (opt.mode == "knn") {
    report["k"] = opt.k;
    report["tau"] = opt.tau;
    report["accuracy"] = knn_for(params, data, opt.k, opt.tau, features);
    report["num_queries"] = data.test ? data.test->size() : data.train.size();
  } else {
    const std::size_t clusters =
        opt.clusters ? opt.clusters : static_cast<std::size_t>(data.train.num_classes);
    carp::Rng rng(opt.seed);
    const carp::Matrix feats = carp::embed(params, data.train.samples, features);
    const carp::KMeansResult km = carp::kmeans(feats, clusters, opt.iters, opt.redos, rng);
    const carp::ClusterMetrics cm = carp::cluster_metrics(km.assignments, data.train.labels);
    report["clusters"] = clusters;
    report["iterations"] = opt.iters;
    report["redos"] = opt.redos;
    report["objective"] = km.objective;
    report["nmi"] = cm.nmi;
    report["ami"] = cm.ami;
    report["ari"] = cm.ari;
  }
  if (!opt.bank_out.empty()) {
    const auto bank = carp::make_bank(carp::embed(params, data.train.samples, features),
                                      data.train.labels, data.train.num_classes);
    carp::save_checkpoint(opt.bank_out, carp::to_checkpoint(bank));
    report["bank"] = opt.bank_out;
  }
  std::cout << report.dump() << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& suite, const std::string& out_dir, std::size_t seeds,
               const std::string& config_path, std::optional<std::size_t> epochs,
               std::size_t jobs) {
  carp::FileConfig cfg;
  try {
    if (!config_path.empty()) cfg = carp::load_config(config_path);
    if (epochs) cfg.run.epochs = *epochs;
    carp::make_suite(suite, cfg.run);
  } catch (const std::exception& e) {
    std::cerr << "ablate: " << e.what() << "\n";
    return kExitUsage;
  }
  fs::create_directories(out_dir);
  const auto rows = carp::run_ablation(suite, cfg.run, seeds, cfg.run.seed, jobs);

  std::ofstream csv(fs::path(out_dir) / (suite + ".csv"), std::ios::binary);
  carp::write_ablation_csv(csv, rows);
  write_text(fs::path(out_dir) / (suite + ".svg"), carp::ablation_svg(suite, rows));

  bool all_ok = true;
  for (const auto& r : rows) {
    std::printf("%-28s seed=%-3llu %s knn=%.4f max_frac=%.3f usage_H=%.3f\n", r.label.c_str(),
                static_cast<unsigned long long>(r.seed), r.ok ? "ok    " : "FAILED",
                r.knn_student, r.max_assignment_fraction, r.usage_entropy);
    if (!r.ok) {
      all_ok = false;
      std::fprintf(stderr, "  %s\n", r.error.c_str());
    }
  }
  return all_ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partitioned-prototype self-supervised clustering"};
  app.require_subcommand(1);

  std::string config, out;
  auto* train = app.add_subcommand("train", "Train a student/teacher pair");
  train->add_option("--config", config, "key=value config file")->required();
  train->add_option("--out", out, "Output directory")->required();

  EvalOptions eval_opt;
  auto* eval = app.add_subcommand("eval", "Evaluate frozen features of a checkpoint");
  eval->add_option("--ckpt", eval_opt.ckpt, "Checkpoint file or run directory")->required();
  eval->add_option("--mode", eval_opt.mode, "knn or cluster")
      ->required()
      ->check(CLI::IsMember({"knn", "cluster"}));
  eval->add_option("--branch", eval_opt.branch, "student or teacher")
      ->check(CLI::IsMember({"student", "teacher"}));
  eval->add_option("--k", eval_opt.k, "Neighbors for knn");
  eval->add_option("--tau", eval_opt.tau, "Vote temperature for knn");
  eval->add_option("--config", eval_opt.config, "Config describing the dataset");
  eval->add_option("--features", eval_opt.features, "encoder or projector")
      ->check(CLI::IsMember({"encoder", "projector"}));
  eval->add_option("--clusters", eval_opt.clusters, "k-means clusters (default: class count)");
  eval->add_option("--iters", eval_opt.iters, "Lloyd iterations per redo");
  eval->add_option("--redos", eval_opt.redos, "k-means restarts");
  eval->add_option("--seed", eval_opt.seed, "k-means seed");
  eval->add_option("--bank-out", eval_opt.bank_out, "Write the embedding bank checkpoint here");

  std::string suite, ablate_out, ablate_config;
  std::size_t seeds = 5, jobs = 1;
  std::optional<std::size_t> epochs;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  ablate->add_option("--suite", suite, "Suite name")
      ->required()
      ->check(CLI::IsMember(carp::ablation_suites()));
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate->add_option("--seeds", seeds, "Seeds per cell");
  ablate->add_option("--config", ablate_config, "Base config file");
  ablate->add_option("--epochs", epochs, "Override epochs of every cell");
  ablate->add_option("--jobs", jobs, "Cells run concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(config, out);
    if (*eval) return cmd_eval(eval_opt);
    if (*ablate) return cmd_ablate(suite, ablate_out, seeds, ablate_config, epochs, jobs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
