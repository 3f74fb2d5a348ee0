#include "vitdw/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

namespace vitdw {
namespace {

constexpr int64_t kCifarRecord = 3073;  // 1 label byte + 3*32*32 pixels
constexpr int64_t kCifarPixels = 3072;

std::vector<Sample> read_cifar_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) fail(ErrorKind::io, "cannot open CIFAR-10 file: " + path);
  const int64_t size = static_cast<int64_t>(is.tellg());
  if (size % kCifarRecord != 0)
    fail(ErrorKind::format, "CIFAR-10 file " + path + " has " + std::to_string(size) +
                                " bytes, not a multiple of the 3073-byte record");
  is.seekg(0);
  const int64_t records = size / kCifarRecord;
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(records));
  std::vector<unsigned char> record(kCifarRecord);
  for (int64_t r = 0; r < records; ++r) {
    is.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
    if (!is) fail(ErrorKind::io, "read failure in CIFAR-10 file: " + path);
    const unsigned char label = record[0];
    if (label > 9)
      fail(ErrorKind::format, "CIFAR-10 file " + path + " record " + std::to_string(r) +
                                  " has label byte " + std::to_string(label) + " > 9");
    Sample s;
    s.label = label;
    s.image = Tensor<float>::zeros({3, 32, 32});
    auto px = s.image.data_mut();
    for (int64_t i = 0; i < kCifarPixels; ++i)
      px[static_cast<size_t>(i)] = static_cast<float>(record[static_cast<size_t>(1 + i)]) / 255.0f;
    out.push_back(std::move(s));
  }
  return out;
}

std::mutex g_stats_mutex;
std::map<std::string, std::pair<std::array<float, 3>, std::array<float, 3>>> g_cifar_stats;

}  // namespace

std::vector<Sample> load_cifar10(const std::string& root, const std::string& split) {
  std::vector<Sample> out;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      auto part = read_cifar_file(root + "/data_batch_" + std::to_string(i) + ".bin");
      out.insert(out.end(), std::make_move_iterator(part.begin()),
                 std::make_move_iterator(part.end()));
    }
  } else if (split == "test") {
    out = read_cifar_file(root + "/test_batch.bin");
  } else {
    fail(ErrorKind::config, "CIFAR-10 split must be train or test, got " + split);
  }
  return out;
}

std::vector<Sample> synthetic_dataset(int n, int num_classes, uint64_t seed, int image_size) {
  check_config(n >= 0 && num_classes >= 2 && num_classes <= 12,
               "synthetic_dataset: need 2..12 classes, got " + std::to_string(num_classes));
  check_config(image_size >= 12, "synthetic_dataset: image_size must be >= 12");
  constexpr int kPatch = 4;
  Rng rng(seed);

  // Per-class binary patterns and non-overlapping stamp locations. Offsets are
  // deliberately off the 4-pixel token grid so patterns straddle patch tokens.
  std::vector<std::array<float, 3 * kPatch * kPatch>> patterns(static_cast<size_t>(num_classes));
  for (auto& p : patterns)
    for (auto& v : p) v = rng.below(2) ? 1.0f : 0.0f;
  std::vector<std::pair<int, int>> locations(static_cast<size_t>(num_classes));
  const int span = image_size - kPatch - 2;
  for (int c = 0; c < num_classes; ++c) {
    const int row = 2 + (c / 4) * 7;
    const int col = 2 + (c % 4) * 7;
    locations[static_cast<size_t>(c)] = {std::min(row, span), std::min(col, span)};
  }

  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % num_classes;
    Sample s;
    s.label = label;
    s.image = Tensor<float>::zeros({3, image_size, image_size});
    auto px = s.image.data_mut();
    for (auto& v : px) v = static_cast<float>(rng.uniform(0.2, 0.8));
    const auto [row, col] = locations[static_cast<size_t>(label)];
    const auto& pat = patterns[static_cast<size_t>(label)];
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x)
          px[static_cast<size_t>((c * image_size + row + y) * image_size + col + x)] =
              pat[static_cast<size_t>((c * kPatch + y) * kPatch + x)];
    out.push_back(std::move(s));
  }
  return out;
}

void compute_normalization(const std::vector<Sample>& samples, std::array<float, 3>& mean,
                           std::array<float, 3>& stddev) {
  std::array<double, 3> sum{}, sum_sq{};
  int64_t per_channel = 0;
  for (const auto& s : samples) {
    const int64_t spatial = s.image.dim(1) * s.image.dim(2);
    per_channel += spatial;
    const float* p = s.image.data().data();
    for (int c = 0; c < 3; ++c) {
      const float* slab = p + c * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        sum[static_cast<size_t>(c)] += slab[i];
        sum_sq[static_cast<size_t>(c)] += static_cast<double>(slab[i]) * slab[i];
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    const double m = per_channel > 0 ? sum[static_cast<size_t>(c)] / static_cast<double>(per_channel) : 0.0;
    const double var =
        per_channel > 0 ? sum_sq[static_cast<size_t>(c)] / static_cast<double>(per_channel) - m * m : 1.0;
    mean[static_cast<size_t>(c)] = static_cast<float>(m);
    stddev[static_cast<size_t>(c)] = static_cast<float>(std::sqrt(std::max(var, 1e-12)));
  }
}

Dataset make_dataset(std::vector<Sample> samples, int num_classes,
                     const std::array<float, 3>* mean, const std::array<float, 3>* stddev) {
  Dataset d;
  d.samples = std::move(samples);
  d.num_classes = num_classes;
  if (mean && stddev) {
    d.mean = *mean;
    d.stddev = *stddev;
  } else {
    compute_normalization(d.samples, d.mean, d.stddev);
  }
  return d;
}

TrainVal load_train_val(const DatasetSpec& spec) {
  TrainVal tv;
  if (spec.kind == DatasetKind::cifar10_binary) {
    check_config(!spec.root.empty(), "dataset root directory required for cifar10_binary");
    std::array<float, 3> mean{}, stddev{};
    {
      std::unique_lock lock(g_stats_mutex);
      auto it = g_cifar_stats.find(spec.root);
      if (it == g_cifar_stats.end()) {
        auto full_train = load_cifar10(spec.root, "train");
        compute_normalization(full_train, mean, stddev);
        g_cifar_stats[spec.root] = {mean, stddev};
      } else {
        mean = it->second.first;
        stddev = it->second.second;
      }
    }
    auto train = load_cifar10(spec.root, "train");
    auto test = load_cifar10(spec.root, "test");
    if (spec.subset_size >= 0) {
      check_config(spec.subset_size <= static_cast<int64_t>(train.size()),
                   "subset_size " + std::to_string(spec.subset_size) + " exceeds " +
                       std::to_string(train.size()) + " train samples");
      train.resize(static_cast<size_t>(spec.subset_size));
      train.shrink_to_fit();
    }
    if (spec.val_subset_size >= 0) {
      check_config(spec.val_subset_size <= static_cast<int64_t>(test.size()),
                   "val_subset_size " + std::to_string(spec.val_subset_size) + " exceeds " +
                       std::to_string(test.size()) + " test samples");
      test.resize(static_cast<size_t>(spec.val_subset_size));
      test.shrink_to_fit();
    }
    tv.train = make_dataset(std::move(train), 10, &mean, &stddev);
    tv.val = make_dataset(std::move(test), 10, &mean, &stddev);
  } else {
    const int total = spec.synthetic_train_n + spec.synthetic_val_n;
    auto pool = synthetic_dataset(total, spec.num_classes, spec.seed, spec.image_size);
    std::vector<Sample> train(std::make_move_iterator(pool.begin()),
                              std::make_move_iterator(pool.begin() + spec.synthetic_train_n));
    std::vector<Sample> val(std::make_move_iterator(pool.begin() + spec.synthetic_train_n),
                            std::make_move_iterator(pool.end()));
    if (spec.subset_size >= 0) {
      check_config(spec.subset_size <= static_cast<int64_t>(train.size()),
                   "subset_size exceeds synthetic train pool");
      train.resize(static_cast<size_t>(spec.subset_size));
    }
    if (spec.val_subset_size >= 0) {
      check_config(spec.val_subset_size <= static_cast<int64_t>(val.size()),
                   "val_subset_size exceeds synthetic val pool");
      val.resize(static_cast<size_t>(spec.val_subset_size));
    }
    tv.train = make_dataset(std::move(train), spec.num_classes);
    tv.val = make_dataset(std::move(val), spec.num_classes, &tv.train.mean, &tv.train.stddev);
  }
  return tv;
}

Tensor<float> hflip_image(const Tensor<float>& image) {
  const int64_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out = Tensor<float>::zeros(image.shape());
  const float* pi = image.data().data();
  float* po = out.data_mut().data();
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) po[(c * h + y) * w + x] = pi[(c * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor<float> pad_crop_image(const Tensor<float>& image, int pad, int offset_y, int offset_x) {
  const int64_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  check_contract(offset_y >= 0 && offset_y <= 2 * pad && offset_x >= 0 && offset_x <= 2 * pad,
                 "pad_crop_image: offset outside the padded canvas");
  Tensor<float> out = Tensor<float>::zeros(image.shape());
  const float* pi = image.data().data();
  float* po = out.data_mut().data();
  // Window [offset, offset+h) of the zero-padded canvas; everything that maps
  // outside the source image stays zero.
  for (int64_t c = 0; c < ch; ++c) {
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = y + offset_y - pad;
      if (sy < 0 || sy >= h) continue;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sx = x + offset_x - pad;
        if (sx < 0 || sx >= w) continue;
        po[(c * h + y) * w + x] = pi[(c * h + sy) * w + sx];
      }
    }
  }
  return out;
}

BatchStream::BatchStream(const Dataset& data, int batch_size, uint64_t shuffle_seed,
                         Augmentation augmentation, bool shuffle)
    : data_(data),
      batch_size_(batch_size),
      augmentation_(augmentation),
      shuffle_(shuffle),
      rng_(shuffle_seed) {
  check_config(batch_size_ >= 1, "batch_size must be >= 1, got " + std::to_string(batch_size_));
  order_.resize(data_.samples.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int64_t>(i);
}

void BatchStream::start_epoch() {
  cursor_ = 0;
  if (shuffle_) rng_.shuffle(order_);
}

int64_t BatchStream::steps_per_epoch() const {
  const int64_t n = static_cast<int64_t>(data_.samples.size());
  return (n + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchStream::next() {
  const int64_t n = static_cast<int64_t>(data_.samples.size());
  if (cursor_ >= n) return std::nullopt;
  const int64_t count = std::min<int64_t>(batch_size_, n - cursor_);
  const auto& shape = data_.samples[0].image.shape();
  const int64_t ch = shape[0], h = shape[1], w = shape[2];
  Batch batch;
  batch.images = Tensor<float>::zeros({count, ch, h, w});
  batch.labels.resize(static_cast<size_t>(count));
  float* out = batch.images.data_mut().data();
  const int64_t stride = ch * h * w;
  for (int64_t i = 0; i < count; ++i) {
    const Sample& s = data_.samples[static_cast<size_t>(order_[static_cast<size_t>(cursor_ + i)])];
    batch.labels[static_cast<size_t>(i)] = s.label;
    Tensor<float> img = s.image;
    if (augmentation_ == Augmentation::flip_crop) {
      if (rng_.uniform() < 0.5) img = hflip_image(img);
      const int oy = static_cast<int>(rng_.below(9));
      const int ox = static_cast<int>(rng_.below(9));
      img = pad_crop_image(img, 4, oy, ox);
    }
    const float* pi = img.data().data();
    float* po = out + i * stride;
    const int64_t spatial = h * w;
    for (int64_t c = 0; c < ch; ++c) {
      const float m = data_.mean[static_cast<size_t>(c)];
      const float inv = 1.0f / data_.stddev[static_cast<size_t>(c)];
      for (int64_t k = 0; k < spatial; ++k) po[c * spatial + k] = (pi[c * spatial + k] - m) * inv;
    }
  }
  cursor_ += count;
  return batch;
}

}  // namespace vitdw
