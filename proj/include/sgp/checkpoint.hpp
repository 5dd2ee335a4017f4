#pragma once

// Parameter checkpoints: one f64 SGT file per parameter plus manifest.json
// listing {name, shape, frozen, file} in store order.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sgp/autograd.hpp"
#include "sgp/io.hpp"

namespace sgp::ckpt {

inline std::string file_name(const std::string& param) {
  std::string f = param;
  for (char& c : f)
    if (c == '/' || c == '\\') c = '_';
  return f + ".sgt";
}

inline void save(const ag::ParamStore& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto lock = params.read_lock();
  nlohmann::json manifest = nlohmann::json::array();
  for (const ag::Param& p : params.all()) {
    io::write_sgt(dir / file_name(p.name), p.value, io::Dtype::f64);
    manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"frozen", p.frozen}, {"file", file_name(p.name)}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw io::IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

/// Overwrites values of parameters already present in the store; shapes must match.
inline void load(ag::ParamStore& params, const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw io::IoError("cannot read " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(is);
  auto lock = params.write_lock();
  for (const auto& e : manifest) {
    const auto name = e.at("name").get<std::string>();
    ag::Param& p = params.get(name);
    Tensor v = io::read_sgt(dir / e.at("file").get<std::string>());
    if (v.shape() != p.value.shape()) throw ShapeError("checkpoint shape mismatch for " + name);
    p.value = std::move(v);
    p.frozen = e.at("frozen").get<bool>();
  }
}

}  // namespace sgp::ckpt
