// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace hyperdec {

namespace {

constexpr std::array<char, 4> kMagic{'H', 'D', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

std::uint32_t narrow(std::size_t v, const std::string& what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw CheckpointError(what + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_checkpoint(std::ostream& out, const NamedTensors& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(out, narrow(name.size(), "name length of " + name));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, narrow(t.rank(), "rank of " + name));
    for (auto e : t.shape()) put_u32(out, narrow(e, "extent of " + name));
    for (float f : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

NamedTensors read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw CheckpointError("not an HDCK checkpoint");
  const auto version = get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  NamedTensors out;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = get_u32(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("truncated checkpoint reading a name");
    const auto rank = get_u32(in, "rank");
    if (rank == 0) throw CheckpointError("tensor " + name + " has rank 0");
    Shape shape(rank);
    for (auto& e : shape) e = get_u32(in, "extent");
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<float>(get_u32(in, "payload"));
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, tensors);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace hyperdec
