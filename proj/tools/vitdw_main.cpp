// Command-line entry points: train, eval, analyze, gradcheck.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "vitdw/checkpoint.hpp"
#include "vitdw/complexity.hpp"
#include "vitdw/config_json.hpp"
#include "vitdw/gradcheck.hpp"
#include "vitdw/run_config.hpp"
#include "vitdw/threading.hpp"

namespace {

using namespace vitdw;

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool deterministic) {
  RunConfig config = load_run_config(config_path);
  if (deterministic) config.train.deterministic = true;
  if (!data_dir.empty()) config.dataset.root = data_dir;
  if (config.dataset.kind == DatasetKind::cifar10_binary && config.dataset.root.empty())
    fail(ErrorKind::config, "--data <dir> is required for cifar10_binary datasets");
  TrainVal data = load_train_val(config.dataset);
  std::cout << "train: " << data.train.samples.size() << " samples, val: "
            << data.val.samples.size() << " samples, classes: " << data.train.num_classes
            << "\n";
  TrainResult result = train(config.model, config.train, data.train, data.val, out_dir,
                             config.dataset.augmentation);
  for (const auto& m : result.metrics) {
    std::printf("epoch %3d  loss %.4f  val_top1 %.4f  lr %.6g  %.1fs\n", m.epoch, m.train_loss,
                m.val_top1, m.lr, m.seconds);
  }
  std::cout << "best val_top1 " << result.best_val_top1 << "\n";
  std::cout << "metrics: " << result.metrics_path << "\n";
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& dataset_kind, int batch_size) {
  Model<float> model = load_checkpoint(checkpoint_path);
  DatasetSpec spec;
  if (dataset_kind == "cifar10_binary") {
    spec.kind = DatasetKind::cifar10_binary;
    spec.root = data_dir;
    check_config(!data_dir.empty(), "--data <dir> is required for cifar10_binary");
  } else if (dataset_kind == "synthetic") {
    spec.kind = DatasetKind::synthetic;
    spec.num_classes = model.config().num_classes;
    spec.image_size = model.config().image_size;
  } else {
    fail(ErrorKind::config, "--dataset must be cifar10_binary or synthetic");
  }
  TrainVal data = load_train_val(spec);
  const double top1 = evaluate(model, data.val, batch_size);
  std::printf("top1 %.6f over %zu samples\n", top1, data.val.samples.size());
  return 0;
}

int cmd_analyze(const std::string& config_path, bool paper_convention, const std::string& format) {
  RunConfig config = load_run_config(config_path);
  ComplexityReport report = analyze_complexity(config.model, paper_convention);
  if (format == "csv") {
    std::cout << report.to_csv();
  } else {
    std::cout << report.to_text();
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, uint64_t seed) {
  std::vector<GradCheckResult> results;
  if (scope == "ops" || scope == "all") {
    auto ops = gradcheck_ops(seed);
    results.insert(results.end(), ops.begin(), ops.end());
  }
  if (scope == "model" || scope == "all") results.push_back(gradcheck_model(seed));
  std::cout << format_gradcheck_report(results);
  const bool ok = gradcheck_all_pass(results);
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << results.size()
            << " checks, tolerance " << kGradCheckTolerance << ")\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision Transformer with depth-wise convolution bypass"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint_path;
  std::string dataset_kind = "cifar10_binary";
  std::string format = "text";
  std::string scope = "all";
  bool deterministic = false;
  bool paper_convention = false;
  int batch_size = 128;
  uint64_t seed = 7;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config_path, "run config JSON")->required();
  train_cmd->add_option("--data", data_dir, "dataset directory (cifar10_binary)");
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_flag("--deterministic", deterministic,
                      "single-thread mode; byte-identical reruns");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory (cifar10_binary)");
  eval_cmd->add_option("--dataset", dataset_kind, "cifar10_binary or synthetic");
  eval_cmd->add_option("--batch-size", batch_size, "evaluation batch size");

  auto* analyze_cmd = app.add_subcommand("analyze", "Parameter and FLOP accounting");
  analyze_cmd->add_option("--config", config_path, "run config JSON")->required();
  analyze_cmd->add_flag("--paper-convention", paper_convention,
                        "exclude DW BatchNorm parameters");
  analyze_cmd->add_option("--format", format, "text or csv");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck_cmd->add_option("--scope", scope, "ops, model or all");
  gradcheck_cmd->add_option("--seed", seed, "random seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path, data_dir, out_dir, deterministic);
    if (*eval_cmd) return cmd_eval(checkpoint_path, data_dir, dataset_kind, batch_size);
    if (*analyze_cmd) return cmd_analyze(config_path, paper_convention, format);
    if (*gradcheck_cmd) {
      if (scope != "ops" && scope != "model" && scope != "all")
        fail(ErrorKind::config, "--scope must be ops, model or all");
      return cmd_gradcheck(scope, seed);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
