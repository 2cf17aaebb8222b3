#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dpcc/common.hpp"
#include "dpcc/diffnet.hpp"
#include "dpcc/diffusion.hpp"
#include "dpcc/geometry.hpp"
#include "dpcc/quantizer.hpp"

namespace dpcc {

// Fixed-width fields, most-significant-bit first, zero-padded to a byte
// boundary.
inline std::vector<std::uint8_t> pack_indices(const std::vector<int>& indices, int bits_per_index) {
  require(bits_per_index >= 1 && bits_per_index <= 32, ErrorKind::argument, "pack_indices: bits out of range");
  std::vector<std::uint8_t> out;
  out.reserve((indices.size() * static_cast<std::size_t>(bits_per_index) + 7) / 8);
  std::uint32_t acc = 0;
  int acc_bits = 0;
  for (int idx : indices) {
    require(idx >= 0 && (bits_per_index == 32 || idx < (1L << bits_per_index)), ErrorKind::argument,
            "pack_indices: index does not fit field width");
    for (int b = bits_per_index - 1; b >= 0; --b) {
      acc = (acc << 1) | static_cast<std::uint32_t>((idx >> b) & 1);
      if (++acc_bits == 8) {
        out.push_back(static_cast<std::uint8_t>(acc & 0xff));
        acc = 0;
        acc_bits = 0;
      }
    }
  }
  if (acc_bits > 0) out.push_back(static_cast<std::uint8_t>((acc << (8 - acc_bits)) & 0xff));
  return out;
}

inline std::vector<int> unpack_indices(const std::vector<std::uint8_t>& bytes, int count, int bits_per_index) {
  require(bits_per_index >= 1 && bits_per_index <= 32, ErrorKind::argument, "unpack_indices: bits out of range");
  require(count >= 0, ErrorKind::argument, "unpack_indices: negative count");
  const std::size_t expected =
      (static_cast<std::size_t>(count) * static_cast<std::size_t>(bits_per_index) + 7) / 8;
  require(bytes.size() == expected, ErrorKind::corrupt_stream, "unpack_indices: payload length mismatch");
  std::vector<int> out(static_cast<std::size_t>(count), 0);
  std::size_t bit = 0;
  for (int i = 0; i < count; ++i) {
    int v = 0;
    for (int b = 0; b < bits_per_index; ++b, ++bit)
      v = (v << 1) | ((bytes[bit / 8] >> (7 - bit % 8)) & 1);
    out[static_cast<std::size_t>(i)] = v;
  }
  for (; bit < bytes.size() * 8; ++bit)
    require(((bytes[bit / 8] >> (7 - bit % 8)) & 1) == 0, ErrorKind::corrupt_stream,
            "unpack_indices: nonzero padding bits");
  return out;
}

// On-disk compressed representation. Byte-exact layout:
// "DPCC" | version u8 | P u32 | d u16 | C u16 | N u16 | model-id u64 |
// centroid 3xf32 | scale f32 | payload. Integers little-endian.
struct Bitstream {
  std::uint32_t P = 0;
  std::uint16_t d = 0;
  std::uint16_t C = 0;
  std::uint16_t N = 0;
  std::uint64_t model_id = 0;
  float centroid[3] = {0, 0, 0};
  float scale = 1.0f;
  std::vector<std::uint8_t> payload;
};

namespace detail {

constexpr char kStreamMagic[4] = {'D', 'P', 'C', 'C'};
constexpr std::uint8_t kStreamVersion = 1;

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_le(out, bits);
}

}  // namespace detail

inline std::string serialize_bitstream(const Bitstream& s) {
  std::string out;
  out.append(detail::kStreamMagic, 4);
  out.push_back(static_cast<char>(detail::kStreamVersion));
  detail::put_le<std::uint32_t>(out, s.P);
  detail::put_le<std::uint16_t>(out, s.d);
  detail::put_le<std::uint16_t>(out, s.C);
  detail::put_le<std::uint16_t>(out, s.N);
  detail::put_le<std::uint64_t>(out, s.model_id);
  for (float c : s.centroid) detail::put_f32(out, c);
  detail::put_f32(out, s.scale);
  out.append(reinterpret_cast<const char*>(s.payload.data()), s.payload.size());
  return out;
}

inline Bitstream parse_bitstream(const std::string& bytes) {
  std::size_t at = 0;
  const auto need = [&](std::size_t n) {
    require(at + n <= bytes.size(), ErrorKind::corrupt_stream, "bitstream: truncated");
  };
  need(5);
  require(std::memcmp(bytes.data(), detail::kStreamMagic, 4) == 0, ErrorKind::corrupt_stream,
          "bitstream: bad magic");
  require(static_cast<std::uint8_t>(bytes[4]) == detail::kStreamVersion, ErrorKind::corrupt_stream,
          "bitstream: unsupported version");
  at = 5;
  const auto get_le = [&](std::size_t n) {
    need(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    at += n;
    return v;
  };
  Bitstream s;
  s.P = static_cast<std::uint32_t>(get_le(4));
  s.d = static_cast<std::uint16_t>(get_le(2));
  s.C = static_cast<std::uint16_t>(get_le(2));
  s.N = static_cast<std::uint16_t>(get_le(2));
  s.model_id = get_le(8);
  for (float& c : s.centroid) {
    const auto bits = static_cast<std::uint32_t>(get_le(4));
    std::memcpy(&c, &bits, 4);
  }
  {
    const auto bits = static_cast<std::uint32_t>(get_le(4));
    std::memcpy(&s.scale, &bits, 4);
  }
  require(s.P >= 1, ErrorKind::corrupt_stream, "bitstream: zero point count");
  require(s.C >= 1 && s.N >= 2 && is_pow2(s.N), ErrorKind::corrupt_stream, "bitstream: bad C/N");
  const std::size_t payload_len =
      (static_cast<std::size_t>(s.C) * static_cast<std::size_t>(log2_exact(s.N)) + 7) / 8;
  require(bytes.size() - at == payload_len, ErrorKind::corrupt_stream, "bitstream: payload length mismatch");
  s.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.end());
  return s;
}

// normalize -> encode -> quantize -> pack. The normalization statistics ride
// in the header so the decoder can return to original coordinates.
inline Bitstream compress(const PointCloud& pc, const Model& model) {
  model.cfg.validate();
  require(pc.size() >= 2, ErrorKind::argument, "compress: need at least 2 points");
  const auto [normed, stats] = normalize(pc);
  const Latent z = encode(model.cfg, model.ps, normed.points);
  const auto q = quantize(z, model_codebook(model), model.cfg.C);

  Bitstream s;
  s.P = static_cast<std::uint32_t>(pc.size());
  s.d = static_cast<std::uint16_t>(model.cfg.d);
  s.C = static_cast<std::uint16_t>(model.cfg.C);
  s.N = static_cast<std::uint16_t>(model.cfg.N);
  s.model_id = model_id(model);
  for (int i = 0; i < 3; ++i) s.centroid[i] = static_cast<float>(stats.centroid(i));
  s.scale = static_cast<float>(stats.scale);
  s.payload = pack_indices(q.indices, log2_exact(static_cast<std::uint64_t>(model.cfg.N)));
  return s;
}

// unpack -> dequantize -> reverse-diffusion decode -> denormalize.
inline PointCloud decompress(const Bitstream& s, const Model& model, std::uint64_t seed) {
  require(s.model_id == model_id(model), ErrorKind::wrong_model, "decompress: stream was made by another model");
  require(s.d == model.cfg.d && s.C == model.cfg.C && s.N == model.cfg.N, ErrorKind::wrong_model,
          "decompress: stream dimensions do not match model");
  const auto indices = unpack_indices(s.payload, s.C, log2_exact(s.N));
  const Latent zhat = dequantize(indices, model_codebook(model));
  const DiffusionSchedule sched = build_schedule(model.cfg);
  PointCloud out;
  out.points = decode(model.cfg, model.ps, zhat, static_cast<Eigen::Index>(s.P), sched, seed);
  NormStats stats;
  stats.centroid = Eigen::Vector3d(s.centroid[0], s.centroid[1], s.centroid[2]);
  stats.scale = s.scale;
  return denormalize(out, stats);
}

// Theoretical rate C*log2(N)/P; header and padding bits are excluded.
inline double bpp(const Bitstream& s) {
  return static_cast<double>(static_cast<long>(s.C) * log2_exact(s.N)) / static_cast<double>(s.P);
}

// Rate including header and padding, as actually written to disk.
inline double wire_bpp(const Bitstream& s) {
  const std::size_t header_bytes = 4 + 1 + 4 + 2 + 2 + 2 + 8 + 12 + 4;
  return static_cast<double>(8 * (header_bytes + s.payload.size())) / static_cast<double>(s.P);
}

inline void save_bitstream(const Bitstream& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  const std::string bytes = serialize_bitstream(s);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::io, "write failed: " + path);
}

inline Bitstream load_bitstream(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_bitstream(bytes);
}

}  // namespace dpcc
