#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vitdw/checkpoint.hpp"
#include "vitdw/gradcheck.hpp"
#include "vitdw/run_config.hpp"
#include "vitdw/train.hpp"

using namespace vitdw;

namespace {

std::string fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "vitdw_train_test" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TrainConfig quick_train_config(int epochs, int warmup, int batch) {
  TrainConfig c = desk_train_config();
  c.epochs = epochs;
  c.warmup_epochs = warmup;
  c.batch_size = batch;
  return c;
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
  Tensor<float> uniform = Tensor<float>::zeros({2, 10});
  Tensor<float> loss = cross_entropy(uniform, {3, 7});
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));

  Tensor<float> confident = Tensor<float>::zeros({1, 4});
  confident.data_mut()[2] = 50.0f;
  CHECK(cross_entropy(confident, {2}).item() == doctest::Approx(0.0).epsilon(1e-6));

  CHECK_THROWS_AS(cross_entropy(uniform, {3}), Error);       // label count mismatch
  CHECK_THROWS_AS(cross_entropy(uniform, {3, 10}), Error);   // label out of range
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(3);
  Tensor<double> logits = Tensor<double>::zeros({3, 5});
  for (auto& v : logits.data_mut()) v = rng.uniform(-2, 2);
  logits.set_requires_grad(true);
  const std::vector<int64_t> labels = {4, 0, 2};
  for (double smoothing : {0.0, 0.1}) {
    logits.zero_grad();
    {
      Tape<double> tape;
      tape.backward(cross_entropy(logits, labels, smoothing));
    }
    auto data = logits.data_mut();
    const double h = 1e-4;
    for (size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double hi = cross_entropy(logits, labels, smoothing).item();
      data[i] = saved - h;
      const double lo = cross_entropy(logits, labels, smoothing).item();
      data[i] = saved;
      const double fd = (hi - lo) / (2 * h);
      const double an = logits.grad()[i];
      CHECK(std::abs(an - fd) <= 1e-3 * std::max({std::abs(an), std::abs(fd), 1e-6}));
    }
  }
}

TEST_CASE("adamw first step moves by about minus lr") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<float> param{0.5f}, grad{1.0f}, m{0.0f}, v{0.0f};
  adamw_step(param, grad, m, v, 1, 1e-3, cfg, false);
  // bias correction makes m_hat = g and v_hat = g^2 at t=1
  CHECK(std::abs(param[0] - (0.5f - 1e-3f)) < 1e-6 * 1e-3);
}

TEST_CASE("adamw fixed point and pure decay") {
  TrainConfig cfg;
  std::vector<float> param{2.0f}, grad{0.0f}, m{0.0f}, v{0.0f};
  for (int t = 1; t <= 5; ++t) adamw_step(param, grad, m, v, t, 1e-3, cfg, false);
  CHECK(param[0] == 2.0f);  // zero gradient, no decay: untouched

  std::vector<float> decayed{2.0f};
  m[0] = v[0] = 0.0f;
  const double lr = 0.01;
  adamw_step(decayed, grad, m, v, 1, lr, cfg, true);
  CHECK(decayed[0] == doctest::Approx(2.0f * (1.0 - lr * cfg.weight_decay)).epsilon(1e-7));
  adamw_step(decayed, grad, m, v, 2, lr, cfg, true);
  CHECK(decayed[0] ==
        doctest::Approx(2.0f * (1.0 - lr * cfg.weight_decay) * (1.0 - lr * cfg.weight_decay))
            .epsilon(1e-7));
}

TEST_CASE("adamw with zero weight decay equals plain adam bit for bit") {
  Rng rng(7);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  const size_t n = 64;
  std::vector<float> p_adamw(n), p_adam(n), m1(n, 0), v1(n, 0), m2(n, 0), v2(n, 0);
  for (size_t i = 0; i < n; ++i) p_adamw[i] = p_adam[i] = static_cast<float>(rng.uniform(-1, 1));
  for (int64_t t = 1; t <= 20; ++t) {
    std::vector<float> g(n);
    for (auto& v : g) v = static_cast<float>(rng.uniform(-1, 1));
    adamw_step(p_adamw, g, m1, v1, t, 3e-4, cfg, true);  // decay flag on, wd == 0
    // reference Adam with the same arithmetic, no decay term
    const double corr1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double corr2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
      p_adam[i] = static_cast<float>(p_adam[i] * 1.0);
      const double gi = g[i];
      m2[i] = static_cast<float>(cfg.beta1 * m2[i] + (1.0 - cfg.beta1) * gi);
      v2[i] = static_cast<float>(cfg.beta2 * v2[i] + (1.0 - cfg.beta2) * gi * gi);
      const double m_hat = m2[i] / corr1;
      const double v_hat = v2[i] / corr2;
      p_adam[i] = static_cast<float>(p_adam[i] - 3e-4 * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
    for (size_t i = 0; i < n; ++i) CHECK(p_adamw[i] == p_adam[i]);
  }
}

TEST_CASE("learning rate schedule shape") {
  TrainConfig cfg = quick_train_config(12, 2, 64);
  cfg.base_lr = 1e-3;
  cfg.min_lr = 1e-5;
  CHECK(lr_at(0.0, cfg) == doctest::Approx(1e-3 * cfg.warmup_start_factor));
  CHECK(lr_at(2.0, cfg) == doctest::Approx(1e-3));            // end of warmup
  CHECK(lr_at(7.0, cfg) == doctest::Approx((1e-3 + 1e-5) / 2));  // cosine midpoint
  CHECK(lr_at(12.0, cfg) == doctest::Approx(1e-5));            // final epoch
  // continuity at the boundary
  CHECK(std::abs(lr_at(2.0 - 1e-9, cfg) - lr_at(2.0 + 1e-9, cfg)) < 1e-9);
  // monotone non-increasing after warmup
  double prev = lr_at(2.0, cfg);
  for (double f = 2.0; f <= 12.0; f += 0.01) {
    const double now = lr_at(f, cfg);
    CHECK(now <= prev + 1e-15);
    prev = now;
  }
  TrainConfig bad = cfg;
  bad.warmup_epochs = 12;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("training on separable synthetic data descends") {
  DatasetSpec spec;
  spec.kind = DatasetKind::synthetic;
  spec.synthetic_train_n = 256;
  spec.synthetic_val_n = 64;
  spec.num_classes = 4;
  spec.seed = 5;
  TrainVal data = load_train_val(spec);

  ModelConfig mc = desk_config(4);
  mc.bypass = {BypassKind::dwconv, {3}, 1};
  mc.seed = 1;
  TrainConfig tc = quick_train_config(10, 2, 32);
  tc.seed = 3;
  const std::string out = fresh_dir("descent");
  TrainResult result = train(mc, tc, data.train, data.val, out);
  REQUIRE(result.metrics.size() == 10);
  CHECK(result.metrics.back().train_loss < result.metrics.front().train_loss);
  // separable data drives the loss under ln(C)/2 within ten epochs
  CHECK(result.metrics.back().train_loss < std::log(4.0) / 2.0);
  CHECK(result.best_val_top1 > 0.5);
  // metrics file matches the record list and the schedule
  std::ifstream is(result.metrics_path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "epoch,train_loss,val_top1,lr,seconds");
  int rows = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    CHECK(std::stoi(field) == rows);
    std::getline(ls, field, ',');
    std::getline(ls, field, ',');
    std::getline(ls, field, ',');
    CHECK(std::stod(field) == doctest::Approx(lr_at(rows, tc)).epsilon(1e-9));
    ++rows;
  }
  CHECK(rows == 10);
  // best checkpoint is a loadable model
  Model<float> restored = load_checkpoint(result.checkpoint_path);
  CHECK(restored.config().num_classes == 4);
}

TEST_CASE("identical seeds produce identical metrics files and checkpoints") {
  DatasetSpec spec;
  spec.kind = DatasetKind::synthetic;
  spec.synthetic_train_n = 96;
  spec.synthetic_val_n = 32;
  spec.num_classes = 3;
  spec.seed = 11;
  TrainVal data = load_train_val(spec);
  ModelConfig mc = desk_config(3);
  mc.dim = 32;
  mc.depth = 2;
  mc.seed = 2;
  TrainConfig tc = quick_train_config(3, 1, 32);
  tc.seed = 9;
  tc.deterministic = true;
  const std::string out_a = fresh_dir("det_a");
  const std::string out_b = fresh_dir("det_b");
  TrainResult a = train(mc, tc, data.train, data.val, out_a);
  TrainResult b = train(mc, tc, data.train, data.val, out_b);
  CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
  CHECK(!slurp(a.metrics_path).empty());

  TrainConfig other = tc;
  other.seed = 10;
  const std::string out_c = fresh_dir("det_c");
  TrainResult c = train(mc, other, data.train, data.val, out_c);
  CHECK(slurp(a.metrics_path) != slurp(c.metrics_path));
}

TEST_CASE("training aborts on a non-finite loss naming the step") {
  DatasetSpec spec;
  spec.kind = DatasetKind::synthetic;
  spec.synthetic_train_n = 64;
  spec.synthetic_val_n = 16;
  spec.num_classes = 3;
  spec.seed = 13;
  TrainVal data = load_train_val(spec);
  ModelConfig mc = desk_config(3);
  mc.dim = 16;
  mc.depth = 1;
  mc.seed = 4;
  TrainConfig tc = quick_train_config(3, 1, 32);
  tc.base_lr = 1e9;  // diverges immediately
  tc.min_lr = 1.0;
  tc.warmup_start_factor = 1.0;
  try {
    train(mc, tc, data.train, data.val, fresh_dir("nan"));
    FAIL("expected divergence abort");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("evaluate counts correct predictions") {
  DatasetSpec spec;
  spec.kind = DatasetKind::synthetic;
  spec.synthetic_train_n = 40;
  spec.synthetic_val_n = 1000;
  spec.num_classes = 10;
  spec.seed = 17;
  TrainVal data = load_train_val(spec);
  ModelConfig mc = desk_config(10);
  mc.dim = 16;
  mc.depth = 1;
  mc.heads = 2;
  mc.seed = 21;
  Model<float> model(mc);
  // an untrained 10-class model sits near chance on balanced labels
  const double top1 = evaluate(model, data.val, 128);
  CHECK(top1 > 0.1 - 0.03 - 1e-9);
  CHECK(top1 < 0.1 + 0.03 + 1e-9);
  // batch size cannot change the measurement
  CHECK(evaluate(model, data.val, 16) == doctest::Approx(top1).epsilon(1e-12));
  CHECK(evaluate(model, data.val, 999) == doctest::Approx(top1).epsilon(1e-12));
}

TEST_CASE("gradcheck suite passes and flags a corrupted backward rule") {
  auto results = gradcheck_ops(7, /*include_negative_control=*/true);
  bool saw_control = false;
  for (const auto& r : results) {
    if (r.name.find("negative_control") != std::string::npos) {
      saw_control = true;
      CHECK_FALSE(r.pass);
    } else {
      CHECK(r.pass);
      CHECK(r.max_error <= kGradCheckTolerance);
    }
  }
  CHECK(saw_control);
  CHECK_FALSE(gradcheck_all_pass(results));
  const std::string report = format_gradcheck_report(results);
  CHECK(report.find("FAIL") != std::string::npos);
  CHECK(report.find("negative_control") != std::string::npos);
}

#ifdef VITDW_CLI_PATH
namespace {
std::pair<int, std::string> run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + VITDW_CLI_PATH + "\" " + args + " 2>&1";
  std::string output;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buffer[2048];
  while (size_t got = fread(buffer, 1, sizeof(buffer), pipe)) output.append(buffer, got);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, output};
}
}  // namespace

TEST_CASE("cli train / eval / analyze / gradcheck round trip") {
  const std::string dir = fresh_dir("cli");
  const std::string config = dir + "/run.json";
  {
    std::ofstream os(config);
    os << R"({
      "model": {"preset": "desk", "dim": 32, "depth": 2, "heads": 2, "num_classes": 4, "seed": 3,
                "bypass": {"kind": "dwconv", "kernel_sizes": [3], "group_size": 1}},
      "train": {"preset": "desk", "epochs": 3, "warmup_epochs": 1, "batch_size": 32, "seed": 5},
      "dataset": {"kind": "synthetic", "train_n": 96, "val_n": 32, "num_classes": 4, "seed": 7}
    })";
  }
  auto [train_exit, train_out] = run_cli("train --config \"" + config + "\" --out \"" + dir +
                                         "/out\" --deterministic");
  CHECK(train_exit == 0);
  CHECK(train_out.find("checkpoint:") != std::string::npos);
  CHECK(std::filesystem::exists(dir + "/out/best.ckpt"));
  CHECK(std::filesystem::exists(dir + "/out/metrics.csv"));

  auto [eval_exit, eval_out] = run_cli("eval --checkpoint \"" + dir +
                                       "/out/best.ckpt\" --dataset synthetic");
  CHECK(eval_exit == 0);
  CHECK(eval_out.find("top1") != std::string::npos);

  auto [an_exit, an_out] = run_cli("analyze --config \"" + config + "\" --format csv");
  CHECK(an_exit == 0);
  CHECK(an_out.find("total_params,") != std::string::npos);

  auto [gc_exit, gc_out] = run_cli("gradcheck --scope ops");
  CHECK(gc_exit == 0);
  CHECK(gc_out.find("gradcheck passed") != std::string::npos);

  auto [bad_exit, bad_out] = run_cli("train --config \"" + dir + "/missing.json\" --out \"" + dir +
                                     "\"");
  CHECK(bad_exit == 2);
  CHECK(bad_out.find("error") != std::string::npos);
}
#endif

TEST_CASE("run config json round trip and validation") {
  RunConfig c;
  c.model = desk_config();
  c.model.bypass = {BypassKind::dwconv, {3}, 2};
  c.train = desk_train_config();
  c.train.seed = 77;
  c.dataset.kind = DatasetKind::synthetic;
  c.dataset.synthetic_train_n = 128;
  RunConfig back = run_config_from_json(run_config_to_json(c));
  CHECK(back.model.bypass.group_size == 2);
  CHECK(back.train.seed == 77);
  CHECK(back.dataset.synthetic_train_n == 128);
  CHECK_THROWS_AS(run_config_from_json("{\"trainx\": {}}"), Error);
  CHECK_THROWS_AS(run_config_from_json("{\"train\": {\"epochs\": 1, \"warmup_epochs\": 5}}"),
                  Error);
}
