#include "vitdw/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "vitdw/config_json.hpp"

namespace vitdw {
namespace {

constexpr char kMagic[4] = {'V', 'D', 'W', 'C'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) fail(ErrorKind::format, std::string("checkpoint truncated while reading ") + what);
  return value;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kVersion);
  const std::string config = model_config_to_json(model.config());
  write_pod(os, static_cast<uint64_t>(config.size()));
  os.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto& entries = model.entries();
  write_pod(os, static_cast<uint64_t>(entries.size()));
  for (const auto& e : entries) {
    write_pod(os, static_cast<uint64_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_pod(os, static_cast<uint32_t>(e.tensor.rank()));
    for (int64_t d : e.tensor.shape()) write_pod(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(e.tensor.data().data()),
             static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
  }
  if (!os) fail(ErrorKind::io, "write failure for checkpoint: " + path);
}

Model<float> load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorKind::format, "not a checkpoint file (bad magic): " + path);
  const uint32_t version = read_pod<uint32_t>(is, "version");
  if (version != kVersion)
    fail(ErrorKind::format, "unsupported checkpoint version " + std::to_string(version) +
                                " (expected " + std::to_string(kVersion) + ")");
  const uint64_t config_len = read_pod<uint64_t>(is, "config length");
  if (config_len > (1u << 24))
    fail(ErrorKind::format, "implausible checkpoint config length " + std::to_string(config_len));
  std::string config_text(config_len, '\0');
  is.read(config_text.data(), static_cast<std::streamsize>(config_len));
  if (!is) fail(ErrorKind::format, "checkpoint truncated while reading config");
  const ModelConfig config = model_config_from_json(config_text);
  if (expected) {
    const std::string field = first_config_difference(config, *expected);
    if (!field.empty())
      fail(ErrorKind::config,
           "checkpoint config mismatch in field '" + field + "' for " + path);
  }

  Model<float> model(config);
  auto& entries = model.entries();
  const uint64_t count = read_pod<uint64_t>(is, "tensor count");
  if (count != entries.size())
    fail(ErrorKind::format, "checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                                std::to_string(entries.size()));
  for (auto& e : entries) {
    const uint64_t name_len = read_pod<uint64_t>(is, "tensor name length");
    if (name_len > (1u << 16))
      fail(ErrorKind::format, "implausible checkpoint tensor name length " + std::to_string(name_len));
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) fail(ErrorKind::format, "checkpoint truncated while reading tensor name");
    if (name != e.name)
      fail(ErrorKind::format, "checkpoint tensor '" + name + "' where '" + e.name + "' expected");
    const uint32_t rank = read_pod<uint32_t>(is, "tensor rank");
    if (rank != static_cast<uint32_t>(e.tensor.rank()))
      fail(ErrorKind::format, "checkpoint tensor '" + name + "' rank mismatch");
    for (int d = 0; d < e.tensor.rank(); ++d) {
      const uint64_t dim = read_pod<uint64_t>(is, "tensor dim");
      if (dim != static_cast<uint64_t>(e.tensor.dim(d)))
        fail(ErrorKind::format, "checkpoint tensor '" + name + "' shape mismatch on axis " +
                                    std::to_string(d));
    }
    is.read(reinterpret_cast<char*>(e.tensor.data_mut().data()),
            static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
    if (!is) fail(ErrorKind::format, "checkpoint truncated while reading tensor '" + name + "'");
  }
  char extra;
  if (is.read(&extra, 1))
    fail(ErrorKind::format, "trailing bytes after checkpoint payload: " + path);
  return model;
}

}  // namespace vitdw
