#pragma once

// Binary checkpoint format (little-endian), documented in docs/checkpoint_format.md:
//
//   magic     8 bytes  "ICFTCKPT"
//   version   u32      1
//   config    i32 x 6  vocab_size d_model n_layers n_heads d_ff max_seq_len
//   lora      u8       0 | 1, followed when 1 by: i32 rank, u8 target_mlp, u8 target_kv
//   table     tensor table (see write_tensor_table)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

#include "icft/model/parameters.hpp"

namespace icft::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint truncated");
  return v;
}

}  // namespace io

/// Tensor table: u32 count, then per tensor
///   u32 name_len, name bytes, u8 requires_grad, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
/// Entries are written in name order.
inline void write_tensor_table(std::ostream& os, const std::map<std::string, Tensor>& tensors) {
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put<std::uint8_t>(os, t.requires_grad() ? 1 : 0);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

inline std::map<std::string, Tensor> read_tensor_table(std::istream& is) {
  std::map<std::string, Tensor> out;
  const auto count = io::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io::get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("checkpoint: implausible tensor name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const bool rg = io::get<std::uint8_t>(is) != 0;
    const auto ndim = io::get<std::uint32_t>(is);
    if (ndim == 0 || ndim > 8) throw CheckpointError("checkpoint: bad rank for tensor '" + name + "'");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(io::get<std::uint64_t>(is));
    std::vector<double> data(numerics::element_count(shape));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint truncated inside tensor '" + name + "'");
    if (!out.emplace(name, Tensor(shape, std::move(data), rg)).second) {
      throw CheckpointError("checkpoint: duplicate tensor '" + name + "'");
    }
  }
  return out;
}

inline void write_checkpoint(std::ostream& os, const Parameters& p) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  io::put<std::uint32_t>(os, kCheckpointVersion);
  const auto& c = p.config;
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len}) io::put<std::int32_t>(os, v);
  io::put<std::uint8_t>(os, p.lora ? 1 : 0);
  if (p.lora) {
    io::put<std::int32_t>(os, p.lora->rank);
    io::put<std::uint8_t>(os, p.lora->target_mlp);
    io::put<std::uint8_t>(os, p.lora->target_kv);
  }
  write_tensor_table(os, p.tensors);
}

inline Parameters read_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Parameters p;
  auto& c = p.config;
  for (int* f : {&c.vocab_size, &c.d_model, &c.n_layers, &c.n_heads, &c.d_ff, &c.max_seq_len}) {
    *f = io::get<std::int32_t>(is);
  }
  c.validate();
  if (io::get<std::uint8_t>(is)) {
    LoRAConfig l;
    l.rank = io::get<std::int32_t>(is);
    l.target_mlp = io::get<std::uint8_t>(is) != 0;
    l.target_kv = io::get<std::uint8_t>(is) != 0;
    p.lora = l;
  }
  p.tensors = read_tensor_table(is);
  // Names and shapes must be exactly those the config implies.
  Parameters expected = init_params(c, 0);
  if (p.lora) expected = attach_lora(std::move(expected), *p.lora, 0).params;
  if (expected.tensors.size() != p.tensors.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(p.tensors.size()) + " tensors, config implies " +
                          std::to_string(expected.tensors.size()));
  }
  for (const auto& [name, t] : expected.tensors) {
    auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + numerics::to_string(it->second.shape()) +
                            ", config implies " + numerics::to_string(t.shape()));
    }
  }
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const Parameters& p) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    write_checkpoint(os, p);
    if (!os) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Parameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace icft::model
