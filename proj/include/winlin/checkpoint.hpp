#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "winlin/kv.hpp"
#include "winlin/model.hpp"

namespace winlin {

// On-disk layout (little-endian):
//   "BFCK"                      magic
//   u32 version                 currently 1
//   u64 header_len              byte length of the text header
//   header                      key=value lines (config, epoch, seed, counts)
//   tensor blocks               repeated tensor_count times:
//     u32 name_len, name bytes
//     u32 ndim, u64 dims[ndim]
//     f32 data[numel]
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  bool has_optimizer = false;
  std::int64_t optimizer_step = 0;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t read_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw IoError("checkpoint: truncated " + path);
  return v;
}
inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw IoError("checkpoint: truncated " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write("BFCK", 4);
  detail::write_u32(out, Checkpoint::kVersion);

  std::string header;
  for (const auto& [k, v] : model_config_kv(ckpt.config)) header += k + "=" + v + "\n";
  header += "epoch=" + std::to_string(ckpt.epoch) + "\n";
  header += "seed=" + std::to_string(ckpt.seed) + "\n";
  header += "has_optimizer=" + std::string(ckpt.has_optimizer ? "1" : "0") + "\n";
  header += "optimizer_step=" + std::to_string(ckpt.optimizer_step) + "\n";
  header += "tensor_count=" + std::to_string(ckpt.tensors.size()) + "\n";
  detail::write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  for (const auto& [name, entry] : ckpt.tensors) {
    const auto& [shape, data] = entry;
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::write_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  }
  if (!out) throw IoError("checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "BFCK", 4) != 0)
    throw IoError("checkpoint: " + path + " lacks the BFCK magic");
  const std::uint32_t version = detail::read_u32(in, path);
  if (version != Checkpoint::kVersion)
    throw IoError("checkpoint: " + path + " has version " + std::to_string(version) +
                  ", expected " + std::to_string(Checkpoint::kVersion));
  const std::uint64_t header_len = detail::read_u64(in, path);
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
    throw IoError("checkpoint: truncated header in " + path);

  Checkpoint ckpt;
  std::size_t tensor_count = 0;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("checkpoint: malformed header line '" + line + "' in " + path);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (apply_model_config_key(ckpt.config, key, value)) continue;
    if (key == "epoch")
      ckpt.epoch = parse_int(value, key);
    else if (key == "seed")
      ckpt.seed = static_cast<std::uint64_t>(parse_int(value, key));
    else if (key == "has_optimizer")
      ckpt.has_optimizer = parse_bool(value, key);
    else if (key == "optimizer_step")
      ckpt.optimizer_step = parse_int(value, key);
    else if (key == "tensor_count")
      tensor_count = static_cast<std::size_t>(parse_int(value, key));
    else
      throw IoError("checkpoint: unknown header key '" + key + "' in " + path);
  }

  for (std::size_t t = 0; t < tensor_count; ++t) {
    const std::uint32_t name_len = detail::read_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw IoError("checkpoint: truncated " + path);
    const std::uint32_t ndim = detail::read_u32(in, path);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(detail::read_u64(in, path));
    std::vector<float> data(static_cast<std::size_t>(numel_of(shape)));
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float))))
      throw IoError("checkpoint: truncated tensor '" + name + "' in " + path);
    ckpt.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }
  return ckpt;
}

// Snapshots model weights and BN buffers into a checkpoint.
template <typename T>
Checkpoint snapshot_model(BuildFormer<T>& model, std::int64_t epoch) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.epoch = epoch;
  ckpt.seed = model.init_seed();
  auto registry = model.registry();
  for (auto* p : registry.params) {
    std::vector<float> data(static_cast<std::size_t>(p->tensor.numel()));
    for (std::int64_t i = 0; i < p->tensor.numel(); ++i)
      data[i] = static_cast<float>(p->tensor.data()[i]);
    ckpt.tensors.emplace(p->name, std::make_pair(p->tensor.shape(), std::move(data)));
  }
  for (auto& [name, buf] : registry.buffers) {
    std::vector<float> data(buf->size());
    for (std::size_t i = 0; i < buf->size(); ++i) data[i] = static_cast<float>((*buf)[i]);
    ckpt.tensors.emplace(name,
                         std::make_pair(Shape{static_cast<std::int64_t>(buf->size())},
                                        std::move(data)));
  }
  return ckpt;
}

// Writes checkpoint tensors back into an already-constructed model.
template <typename T>
void restore_model(BuildFormer<T>& model, const Checkpoint& ckpt) {
  auto registry = model.registry();
  for (auto* p : registry.params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end())
      throw IoError("checkpoint: missing parameter '" + p->name + "'");
    const auto& [shape, data] = it->second;
    if (shape != p->tensor.shape())
      throw IoError("checkpoint: parameter '" + p->name + "' has shape " + shape_str(shape) +
                    ", model expects " + shape_str(p->tensor.shape()));
    for (std::int64_t i = 0; i < p->tensor.numel(); ++i)
      p->tensor.data()[i] = static_cast<T>(data[i]);
  }
  for (auto& [name, buf] : registry.buffers) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint: missing buffer '" + name + "'");
    const auto& data = it->second.second;
    if (data.size() != buf->size())
      throw IoError("checkpoint: buffer '" + name + "' has " + std::to_string(data.size()) +
                    " entries, model expects " + std::to_string(buf->size()));
    for (std::size_t i = 0; i < buf->size(); ++i) (*buf)[i] = static_cast<T>(data[i]);
  }
}

// Rebuilds the model a checkpoint describes.
template <typename T>
BuildFormer<T> model_from_checkpoint(const Checkpoint& ckpt) {
  BuildFormer<T> model = BuildFormer<T>::init(ckpt.config, ckpt.seed);
  restore_model(model, ckpt);
  return model;
}

}  // namespace winlin
