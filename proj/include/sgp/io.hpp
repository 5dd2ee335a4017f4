#pragma once

// SGT tensor files: one JSON header line, then raw little-endian IEEE-754 payload.
//   {"shape":[B,C,h,w],"dtype":"f32","order":"row-major"}\n<bytes>
// PGM export: binary P5, 8-bit, min-max normalised per map.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sgp/tensor.hpp"

namespace sgp::io {

static_assert(std::endian::native == std::endian::little, "SGT payloads are written in host order");

struct IoError : Error {
  using Error::Error;
};

enum class Dtype { f32, f64 };

inline void write_sgt(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::f32) {
  nlohmann::json hdr;
  hdr["shape"] = t.shape();
  hdr["dtype"] = dtype == Dtype::f32 ? "f32" : "f64";
  hdr["order"] = "row-major";
  os << hdr.dump() << '\n';
  if (dtype == Dtype::f32) {
    std::vector<float> buf(t.vec().begin(), t.vec().end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  } else {
    os.write(reinterpret_cast<const char*>(t.vec().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw IoError("write_sgt: stream failure");
}

inline void write_sgt(const std::filesystem::path& p, const Tensor& t, Dtype dtype = Dtype::f32) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  write_sgt(os, t, dtype);
}

inline Tensor read_sgt(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("read_sgt: missing header line");
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("read_sgt: bad header: ") + e.what());
  }
  if (!hdr.contains("shape") || !hdr.contains("dtype")) throw IoError("read_sgt: header lacks shape/dtype");
  if (hdr.value("order", "row-major") != "row-major") throw IoError("read_sgt: only row-major supported");
  const auto shape = hdr["shape"].get<Shape>();
  const auto dtype = hdr["dtype"].get<std::string>();
  const std::size_t n = numel(shape);
  std::vector<double> data(n);
  if (dtype == "f32") {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(buf.begin(), buf.end(), data.begin());
  } else if (dtype == "f64") {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    throw IoError("read_sgt: unsupported dtype " + dtype);
  }
  if (!is) throw IoError("read_sgt: truncated payload");
  return Tensor(shape, std::move(data));
}

inline Tensor read_sgt(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  return read_sgt(is);
}

/// Writes an [h, w] map (any tensor whose trailing two dims are the image) as P5.
inline void write_pgm(const std::filesystem::path& p, std::span<const double> map, std::size_t h, std::size_t w) {
  if (map.size() != h * w) throw ShapeError("write_pgm: map size does not match " + std::to_string(h) + "x" + std::to_string(w));
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> px(h * w);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double t = range > 0 ? (map[i] - lo) / range : 0.0;
    px[i] = static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw IoError("write_pgm: stream failure");
}

struct PgmImage {
  std::size_t h = 0, w = 0;
  std::vector<unsigned char> pixels;
};

inline PgmImage read_pgm(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::string magic;
  PgmImage img;
  int maxval = 0;
  is >> magic >> img.w >> img.h >> maxval;
  if (!is || magic != "P5" || maxval != 255) throw IoError("read_pgm: not an 8-bit P5 file: " + p.string());
  is.get();
  img.pixels.resize(img.h * img.w);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw IoError("read_pgm: truncated " + p.string());
  return img;
}

}  // namespace sgp::io
