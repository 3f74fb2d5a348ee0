#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vitdw/rng.hpp"
#include "vitdw/tensor.hpp"

namespace vitdw {

// One image in [0,1] before normalization.
struct Sample {
  Tensor<float> image;  // [3, H, W]
  int label = 0;
};

enum class DatasetKind { cifar10_binary, synthetic };
enum class Augmentation { none, flip_crop };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::string root;                // cifar10_binary: directory with data_batch_*.bin / test_batch.bin
  int64_t subset_size = -1;        // train subset; -1 = all
  int64_t val_subset_size = -1;    // val/test subset; -1 = all
  Augmentation augmentation = Augmentation::none;
  uint64_t seed = 1;               // synthetic generation seed
  int synthetic_train_n = 2000;
  int synthetic_val_n = 500;
  int num_classes = 10;            // synthetic only; cifar10 is always 10
  int image_size = 32;             // synthetic only
};

// Samples plus the per-channel normalization constants they are served with.
struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 10;
  std::array<float, 3> mean{};
  std::array<float, 3> stddev{};
};

struct TrainVal {
  Dataset train;
  Dataset val;
};

// CIFAR-10 binary distribution format: records of 3073 bytes, one label byte
// (0..9) then 3072 pixel bytes, channel-major R,G,B in row-major 32x32 order.
// split "train" reads data_batch_1..5.bin, "test" reads test_batch.bin.
// Pixel byte b maps to b/255. Wrong record granularity and out-of-range label
// bytes raise format errors.
std::vector<Sample> load_cifar10(const std::string& root, const std::string& split);

// Deterministic synthetic classification set: uniform noise in [0.2, 0.8]
// with a class-specific binary 4x4 patch stamped at a class-specific location,
// so the class is decidable from a local pattern. Labels cycle 0..classes-1.
std::vector<Sample> synthetic_dataset(int n, int num_classes, uint64_t seed, int image_size = 32);

// Per-channel mean/std over a sample list (population statistics).
void compute_normalization(const std::vector<Sample>& samples, std::array<float, 3>& mean,
                           std::array<float, 3>& stddev);

// Assembles a Dataset; statistics are computed from `samples` unless given.
Dataset make_dataset(std::vector<Sample> samples, int num_classes,
                     const std::array<float, 3>* mean = nullptr,
                     const std::array<float, 3>* stddev = nullptr);

// Train and val/test datasets for a spec. CIFAR-10 normalization constants
// come from the full train split (computed once and cached per root) so both
// splits are normalized identically; synthetic constants come from the train
// partition of the generated pool.
TrainVal load_train_val(const DatasetSpec& spec);

// One materialized batch. Augmentation (when enabled) runs before
// normalization; labels stay integer class ids.
struct Batch {
  Tensor<float> images;  // [B, 3, H, W], normalized
  std::vector<int64_t> labels;
};

// Seeded epoch iterator: Fisher-Yates reshuffle per epoch, optional flip+crop
// augmentation, normalization last, final short batch emitted.
class BatchStream {
 public:
  BatchStream(const Dataset& data, int batch_size, uint64_t shuffle_seed,
              Augmentation augmentation, bool shuffle);

  void start_epoch();
  std::optional<Batch> next();
  int64_t steps_per_epoch() const;

 private:
  const Dataset& data_;
  int batch_size_;
  Augmentation augmentation_;
  bool shuffle_;
  Rng rng_;
  std::vector<int64_t> order_;
  int64_t cursor_ = 0;
};

// flip_crop building blocks, exposed for tests: horizontal mirror and a
// random crop from a 4-pixel zero-padded canvas.
Tensor<float> hflip_image(const Tensor<float>& image);
Tensor<float> pad_crop_image(const Tensor<float>& image, int pad, int offset_y, int offset_x);

}  // namespace vitdw
