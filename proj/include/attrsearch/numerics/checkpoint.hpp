#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attrsearch/numerics/tape.hpp"

namespace attrsearch::checkpoint {

// Layout (all integers u32 little-endian, payload f32 little-endian):
//   "ATSC" | version | tensor count
//   per tensor: name length | name bytes | rank | extents... | payload
inline constexpr std::array<char, 4> kMagic{'A', 'T', 'S', 'C'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LoadError("checkpoint: truncated data");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const ParamSet<float>& tensors) {
  std::string out(kMagic.begin(), kMagic.end());
  detail::put_u32(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline ParamSet<float> decode(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.str(4) != std::string(kMagic.begin(), kMagic.end())) {
    throw LoadError("checkpoint: bad magic");
  }
  if (const std::uint32_t version = r.u32(); version != kVersion) {
    throw LoadError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParamSet<float> out;
  for (std::uint32_t n = 0; n < count; ++n) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    std::vector<float> data(shape_size(shape));
    for (float& v : data) v = std::bit_cast<float>(r.u32());
    if (!out.emplace(name, Tensor<float>(shape, std::move(data))).second) {
      throw LoadError("checkpoint: duplicate tensor " + name);
    }
  }
  if (!r.done()) throw LoadError("checkpoint: trailing bytes");
  return out;
}

inline void save(const std::filesystem::path& path, const ParamSet<float>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw LoadError("checkpoint: cannot write " + path.string());
  const std::string bytes = encode(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw LoadError("checkpoint: write failed for " + path.string());
}

inline ParamSet<float> load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("checkpoint: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

/// Throws LoadError naming every expected tensor that is absent.
inline void require_tensors(const ParamSet<float>& tensors, const std::vector<std::string>& names) {
  std::string missing;
  for (const auto& n : names) {
    if (!tensors.count(n)) missing += (missing.empty() ? "" : ", ") + n;
  }
  if (!missing.empty()) throw LoadError("checkpoint is missing tensors: " + missing);
}

}  // namespace attrsearch::checkpoint
