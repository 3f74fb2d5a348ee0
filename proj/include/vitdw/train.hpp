#pragma once

#include <span>
#include <string>
#include <vector>

#include "vitdw/data.hpp"
#include "vitdw/model.hpp"

namespace vitdw {

struct TrainConfig {
  double base_lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 300;
  int warmup_epochs = 20;
  double min_lr = -1.0;  // < 0 resolves to base_lr / 100
  double warmup_start_factor = 1e-3;
  int batch_size = 128;
  uint64_t seed = 0;
  double label_smoothing = 0.0;
  bool deterministic = false;

  double resolved_min_lr() const { return min_lr < 0.0 ? base_lr * 1e-2 : min_lr; }

  void validate() const {
    check_config(warmup_epochs > 0 && warmup_epochs < epochs,
                 "need 0 < warmup_epochs < epochs, got warmup_epochs=" +
                     std::to_string(warmup_epochs) + ", epochs=" + std::to_string(epochs));
    check_config(resolved_min_lr() <= base_lr, "min_lr must be <= base_lr");
    check_config(batch_size >= 1, "batch_size must be >= 1");
    check_config(label_smoothing >= 0.0 && label_smoothing < 1.0,
                 "label_smoothing must be in [0, 1)");
  }
};

// Scaled-down counterpart of the reference protocol (300 epochs / 20 warmup /
// batch 128) sized for CPU-scale runs.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.epochs = 15;
  c.warmup_epochs = 2;
  c.batch_size = 64;
  return c;
}

struct MetricsRecord {
  int epoch = 0;         // 0-based
  double train_loss = 0;
  double val_top1 = 0;
  double lr = 0;         // lr_at(epoch), the rate at the first step of the epoch
  double seconds = 0;    // wall time; written as 0 in deterministic mode
};

// Linear warmup from warmup_start_factor*base_lr to base_lr over
// warmup_epochs, then cosine decay from base_lr to min_lr over the remaining
// epochs. epoch_fraction is a continuous epoch count (global_step /
// steps_per_epoch); the curve is continuous at the boundary and non-increasing
// afterwards.
inline double lr_at(double epoch_fraction, const TrainConfig& config) {
  const double warmup = static_cast<double>(config.warmup_epochs);
  if (epoch_fraction < warmup) {
    const double f = config.warmup_start_factor;
    return config.base_lr * (f + (1.0 - f) * epoch_fraction / warmup);
  }
  const double total = static_cast<double>(config.epochs);
  double t = (epoch_fraction - warmup) / (total - warmup);
  t = std::min(std::max(t, 0.0), 1.0);
  const double lo = config.resolved_min_lr();
  return lo + (config.base_lr - lo) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Mean over the batch of -log softmax(logits)[label], computed through
// log-sum-exp. With label smoothing ls, the target distribution becomes
// (1-ls)*onehot + ls/C.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels,
                        double label_smoothing = 0.0) {
  check_shape(logits.rank() == 2, "cross_entropy: logits must be [batch, classes], got " +
                                      shape_str(logits.shape()));
  const int64_t batch = logits.dim(0), classes = logits.dim(1);
  check_contract(static_cast<int64_t>(labels.size()) == batch,
                 "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  for (int64_t y : labels)
    check_contract(y >= 0 && y < classes, "cross_entropy: label " + std::to_string(y) +
                                              " out of range [0, " + std::to_string(classes) + ")");
  const double ls = label_smoothing;
  const T* pz = logits.data().data();
  std::vector<T> lse(static_cast<size_t>(batch));
  double total = 0.0;
  for (int64_t r = 0; r < batch; ++r) {
    const T* row = pz + r * classes;
    T mx = row[0];
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double sum_exp = 0.0, sum_z = 0.0;
    for (int64_t c = 0; c < classes; ++c) {
      sum_exp += std::exp(static_cast<double>(row[c] - mx));
      sum_z += row[c];
    }
    const double l = static_cast<double>(mx) + std::log(sum_exp);
    lse[static_cast<size_t>(r)] = static_cast<T>(l);
    const double nll = l - static_cast<double>(row[labels[static_cast<size_t>(r)]]);
    const double smooth = l - sum_z / static_cast<double>(classes);
    total += (1.0 - ls) * nll + ls * smooth;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  if (auto* tape = Tape<T>::recording({&logits})) {
    const int64_t iz = tape->id_of(logits);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> zv = logits;
    const std::vector<int64_t> labels_copy = labels;
    auto lse_copy = std::make_shared<std::vector<T>>(std::move(lse));
    tape->push({iz}, io, [=](Tape<T>& t) {
      const T g = t.grad_of(io)[0];
      auto& dz = t.grad_accum(iz, zv.numel());
      const T* z = zv.data().data();
      const T inv_batch = T(1) / static_cast<T>(batch);
      const T smooth_target = static_cast<T>(ls / static_cast<double>(classes));
      for (int64_t r = 0; r < batch; ++r) {
        const T* row = z + r * classes;
        const T l = (*lse_copy)[static_cast<size_t>(r)];
        for (int64_t c = 0; c < classes; ++c) {
          const T p = std::exp(row[c] - l);
          T target = smooth_target;
          if (c == labels_copy[static_cast<size_t>(r)]) target += static_cast<T>(1.0 - ls);
          dz[static_cast<size_t>(r * classes + c)] += g * (p - target) * inv_batch;
        }
      }
    });
  }
  return out;
}

// One decoupled-weight-decay Adam update on a single parameter tensor:
// param *= (1 - lr*wd) first, then the bias-corrected Adam step. m and v are
// the per-parameter moment buffers; t is the 1-based step count.
void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                std::span<float> v, int64_t t, double lr, const TrainConfig& config,
                bool apply_decay);

// Optimizer over a model's trainable entries. Weight decay applies only to
// entries flagged for it (weight matrices; not biases, norm parameters, the
// positional embedding or the class token).
class AdamW {
 public:
  AdamW(std::vector<ParamEntry<float>>& entries, const TrainConfig& config);
  void step(double lr);
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<ParamEntry<float>>& entries_;
  TrainConfig config_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Top-1 accuracy in eval mode (BatchNorm running statistics, no tape).
double evaluate(Model<float>& model, const Dataset& data, int batch_size = 128);

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::string metrics_path;
  std::string checkpoint_path;
  double best_val_top1 = 0.0;
};

// Full training loop: per-epoch metrics appended to <out_dir>/metrics.csv
// (header epoch,train_loss,val_top1,lr,seconds), best-val checkpoint kept at
// <out_dir>/best.ckpt. Deterministic for a fixed seed in single-thread mode;
// config.deterministic forces one thread and zeroes the seconds column. A
// non-finite loss aborts with a diagnostic naming the epoch and step.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  const Dataset& train_data, const Dataset& val_data, const std::string& out_dir,
                  Augmentation augmentation = Augmentation::none);

}  // namespace vitdw
