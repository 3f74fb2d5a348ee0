#include "vitdw/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vitdw/checkpoint.hpp"
#include "vitdw/threading.hpp"

namespace vitdw {

void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                std::span<float> v, int64_t t, double lr, const TrainConfig& config,
                bool apply_decay) {
  const double b1 = config.beta1, b2 = config.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = apply_decay ? 1.0 - lr * config.weight_decay : 1.0;
  for (size_t i = 0; i < param.size(); ++i) {
    param[i] = static_cast<float>(param[i] * decay);  // decoupled decay, before the update
    const double g = grad[i];
    m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
    v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
    const double m_hat = m[i] / corr1;
    const double v_hat = v[i] / corr2;
    param[i] = static_cast<float>(param[i] - lr * m_hat / (std::sqrt(v_hat) + config.eps));
  }
}

AdamW::AdamW(std::vector<ParamEntry<float>>& entries, const TrainConfig& config)
    : entries_(entries), config_(config) {
  for (const auto& e : entries_) {
    const size_t n = e.trainable ? static_cast<size_t>(e.tensor.numel()) : 0;
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  for (size_t i = 0; i < entries_.size(); ++i) {
    auto& e = entries_[i];
    if (!e.trainable) continue;
    adamw_step(e.tensor.data_mut(), e.tensor.grad(), m_[i], v_[i], t_, lr, config_,
               e.weight_decay && config_.weight_decay > 0.0);
  }
}

double evaluate(Model<float>& model, const Dataset& data, int batch_size) {
  if (data.samples.empty()) return 0.0;
  BatchStream stream(data, batch_size, 0, Augmentation::none, /*shuffle=*/false);
  stream.start_epoch();
  int64_t correct = 0, total = 0;
  while (auto batch = stream.next()) {
    Tensor<float> logits = model.forward(batch->images, /*training=*/false);
    const auto pred = argmax_rows(logits);
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == batch->labels[i]) ++correct;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const Dataset& train_data, const Dataset& val_data, const std::string& out_dir,
                  Augmentation augmentation) {
  train_config.validate();
  check_config(!train_data.samples.empty(), "train dataset is empty");
  if (train_config.deterministic) set_num_threads(1);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.metrics_path = out_dir + "/metrics.csv";
  result.checkpoint_path = out_dir + "/best.ckpt";
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) fail(ErrorKind::io, "cannot open metrics file: " + result.metrics_path);
  metrics << "epoch,train_loss,val_top1,lr,seconds\n";

  Model<float> model(model_config);
  AdamW optimizer(model.entries(), train_config);
  BatchStream stream(train_data, train_config.batch_size, train_config.seed, augmentation,
                     /*shuffle=*/true);
  const double steps_per_epoch = static_cast<double>(stream.steps_per_epoch());

  double best = -1.0;
  int64_t global_step = 0;
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    stream.start_epoch();
    double loss_sum = 0.0;
    int64_t steps = 0;
    while (auto batch = stream.next()) {
      const double lr = lr_at(static_cast<double>(global_step) / steps_per_epoch, train_config);
      model.zero_grad();
      double loss_value = 0.0;
      {
        Tape<float> tape;
        Tensor<float> logits = model.forward(batch->images, /*training=*/true);
        Tensor<float> loss = cross_entropy(logits, batch->labels, train_config.label_smoothing);
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          fail(ErrorKind::contract, "non-finite training loss at epoch " + std::to_string(epoch) +
                                        ", step " + std::to_string(global_step));
        tape.backward(loss);
      }
      optimizer.step(lr);
      loss_sum += loss_value;
      ++steps;
      ++global_step;
    }
    const double val_top1 = evaluate(model, val_data, train_config.batch_size);
    const auto epoch_end = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.val_top1 = val_top1;
    rec.lr = lr_at(static_cast<double>(epoch), train_config);
    rec.seconds = train_config.deterministic
                      ? 0.0
                      : std::chrono::duration<double>(epoch_end - epoch_start).count();
    result.metrics.push_back(rec);
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.3f\n", rec.epoch, rec.train_loss,
                  rec.val_top1, rec.lr, rec.seconds);
    metrics << line;
    metrics.flush();
    if (val_top1 > best) {
      best = val_top1;
      save_checkpoint(model, result.checkpoint_path);
    }
  }
  result.best_val_top1 = best;
  return result;
}

}  // namespace vitdw
