#pragma once

// Binary persistence for adapters and base weights.
//
//   magic    8 bytes   "TIFADPT1" (adapter) or "TIFBASE1" (base)
//   records  repeated:
//              u16 layer-id, u16 rank, u32 rows, u32 cols,
//              adapter: A (rank x cols) row-major, then B (rows x rank) row-major
//              base:    one matrix (rows x cols) row-major, see below
//   crc      u32       CRC-32 (zlib polynomial) of every byte after the magic
//
// All integers and floats are little-endian; floats are IEEE-754 binary32.
//
// For adapters, rows x cols is the shape of the adapted weight (out x in).
// Base files reuse the record layout with the rank field as a tensor tag:
// tag 0 is the weight matrix W of the layer, tag 1 its bias (rows x 1), and
// layer-id 0xFFFF tag 2 holds the shared condition embedding (cond_dim x 1).
// The adapter scale factor is not stored; it comes from the experiment config.

#include "tif/denoiser.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tif {

inline constexpr std::string_view kAdapterMagic = "TIFADPT1";
inline constexpr std::string_view kBaseMagic = "TIFBASE1";

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void matrix_row_major(const Mat<float>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) f32(m(i, j));
    }
  }
  [[nodiscard]] const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  void put(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return get(4); }
  float f32() { return std::bit_cast<float>(u32()); }
  Mat<float> matrix_row_major(Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<std::size_t>(rows * cols) * 4 > remaining()) throw FormatError("container: truncated matrix");
    Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f32();
    }
    return m;
  }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::uint32_t get(int n) {
    if (remaining() < static_cast<std::size_t>(n)) throw FormatError("container: truncated record");
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_{0};
};

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<unsigned char> seal(std::string_view magic, const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> out(magic.size() + payload.size() + 4);
  std::copy(magic.begin(), magic.end(), out.begin());
  std::copy(payload.begin(), payload.end(), out.begin() + static_cast<std::ptrdiff_t>(magic.size()));
  const auto crc = crc32_of(payload);
  auto* tail = out.data() + out.size() - 4;
  for (int i = 0; i < 4; ++i) tail[i] = static_cast<unsigned char>((crc >> (8 * i)) & 0xFF);
  return out;
}

/// Checks magic and CRC, returns the payload span.
inline std::span<const unsigned char> unseal(std::string_view magic, std::span<const unsigned char> file) {
  if (file.size() < magic.size() + 4 || std::memcmp(file.data(), magic.data(), magic.size()) != 0) {
    throw FormatError("container: bad magic, expected " + std::string(magic));
  }
  const auto payload = file.subspan(magic.size(), file.size() - magic.size() - 4);
  const auto* tail = file.data() + file.size() - 4;
  const std::uint32_t stored = static_cast<std::uint32_t>(tail[0]) | (static_cast<std::uint32_t>(tail[1]) << 8) |
                               (static_cast<std::uint32_t>(tail[2]) << 16) |
                               (static_cast<std::uint32_t>(tail[3]) << 24);
  if (stored != crc32_of(payload)) throw FormatError("container: CRC mismatch");
  return payload;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline constexpr std::uint16_t kEmbeddingId = 0xFFFF;

}  // namespace detail

inline std::vector<unsigned char> encode_adapter(const Adapter& ad) {
  detail::ByteWriter w;
  for (const auto& f : ad.factors) {
    w.u16(static_cast<std::uint16_t>(f.layer));
    w.u16(static_cast<std::uint16_t>(ad.rank));
    w.u32(static_cast<std::uint32_t>(f.B.rows()));
    w.u32(static_cast<std::uint32_t>(f.A.cols()));
    w.matrix_row_major(f.A);
    w.matrix_row_major(f.B);
  }
  return detail::seal(kAdapterMagic, w.bytes());
}

inline Adapter decode_adapter(std::span<const unsigned char> file, float scale) {
  detail::ByteReader r(detail::unseal(kAdapterMagic, file));
  Adapter ad{0, scale, {}};
  while (r.remaining() > 0) {
    const auto id = r.u16();
    const auto rank = r.u16();
    const auto rows = r.u32();
    const auto cols = r.u32();
    if (id > static_cast<std::uint16_t>(LayerId::last)) throw FormatError("adapter: unknown layer id");
    if (rank == 0 || (ad.rank != 0 && ad.rank != rank)) throw FormatError("adapter: inconsistent rank");
    ad.rank = rank;
    LoraFactor<float> f{static_cast<LayerId>(id), {}, {}};
    f.A = r.matrix_row_major(rank, cols);
    f.B = r.matrix_row_major(rows, rank);
    ad.factors.push_back(std::move(f));
  }
  return ad;
}

inline std::vector<unsigned char> encode_base(const Params& p) {
  detail::ByteWriter w;
  auto record = [&](std::uint16_t id, std::uint16_t tag, const Mat<float>& m) {
    w.u16(id);
    w.u16(tag);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    w.matrix_row_major(m);
  };
  record(detail::kEmbeddingId, 2, p.y);
  for (const auto id : kAllLayers) {
    record(static_cast<std::uint16_t>(id), 0, p.layer(id).W);
    record(static_cast<std::uint16_t>(id), 1, p.layer(id).b);
  }
  return detail::seal(kBaseMagic, w.bytes());
}

/// Decodes base weights and checks every tensor against `arch`.
inline Params decode_base(std::span<const unsigned char> file, const Architecture& arch) {
  detail::ByteReader r(detail::unseal(kBaseMagic, file));
  Params p;
  p.arch = arch;
  auto expect = [](bool ok, const std::string& what) {
    if (!ok) throw FormatError("base: " + what + " does not match the configured architecture");
  };
  int seen = 0;
  while (r.remaining() > 0) {
    const auto id = r.u16();
    const auto tag = r.u16();
    const auto rows = r.u32();
    const auto cols = r.u32();
    Mat<float> m = r.matrix_row_major(rows, cols);
    if (id == detail::kEmbeddingId && tag == 2) {
      expect(cols == 1 && static_cast<int>(rows) == arch.cond_dim, "condition embedding");
      p.y = m.col(0);
    } else if (id <= static_cast<std::uint16_t>(LayerId::last) && tag <= 1) {
      const auto lid = static_cast<LayerId>(id);
      const std::string name(layer_name(lid));
      if (tag == 0) {
        expect(static_cast<int>(rows) == arch.out_dim(lid) && static_cast<int>(cols) == arch.in_dim(lid), name + ".W");
        p.layer(lid).W = std::move(m);
      } else {
        expect(static_cast<int>(rows) == arch.out_dim(lid) && cols == 1, name + ".b");
        p.layer(lid).b = m.col(0);
      }
    } else {
      throw FormatError("base: unknown record");
    }
    ++seen;
  }
  if (seen != 9) throw FormatError("base: expected 9 tensors, found " + std::to_string(seen));
  return p;
}

inline void save_adapter(const std::filesystem::path& path, const Adapter& ad) {
  detail::write_file(path, encode_adapter(ad));
}
inline Adapter load_adapter(const std::filesystem::path& path, float scale) {
  return decode_adapter(detail::read_file(path), scale);
}
inline void save_base(const std::filesystem::path& path, const Params& p) {
  detail::write_file(path, encode_base(p));
}
inline Params load_base(const std::filesystem::path& path, const Architecture& arch) {
  return decode_base(detail::read_file(path), arch);
}

/// FNV-1a over the encoded base tensors, for frozen-weight checks.
inline std::uint64_t weights_hash(const Params& p) {
  const auto bytes = encode_base(p);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tif
