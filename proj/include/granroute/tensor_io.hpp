#pragma once

#include "granroute/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace granroute {

// Shared tensor file format: one JSON header line {"shape":[...],"dtype":...}
// terminated by '\n', then the little-endian row-major payload.

template <typename S>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

template <typename S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  nlohmann::json header;
  header["shape"] = t.shape;
  header["dtype"] = dtype_name<S>();
  os << header.dump() << "\n";
  os.write(reinterpret_cast<const char*>(t.data.data()),
           std::streamsize(sizeof(S)) * t.numel());
  if (!os) throw IoError("tensor write failed");
}

template <typename S>
Tensor<S> read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("tensor header missing");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("shape") || !header.contains("dtype"))
    throw CorruptManifest("bad tensor header: " + line);
  if (header["dtype"].get<std::string>() != dtype_name<S>())
    throw CorruptManifest("dtype mismatch, expected " + std::string(dtype_name<S>()));
  Tensor<S> t = Tensor<S>::zeros(header["shape"].get<std::vector<Index>>());
  is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(sizeof(S)) * t.numel());
  if (is.gcount() != std::streamsize(sizeof(S)) * t.numel())
    throw IoError("tensor payload truncated");
  return t;
}

template <typename S>
void save_tensor_file(const std::filesystem::path& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  write_tensor(os, t);
}

template <typename S>
Tensor<S> load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<S>(is);
}

// Named, ordered parameter collection. Order is the optimizer slot order.
template <typename S>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<S>> tensors;

  Index add(const std::string& name, Tensor<S> t) {
    t.requires_grad = true;
    names.push_back(name);
    tensors.push_back(std::move(t));
    return Index(tensors.size()) - 1;
  }
  Index size() const { return Index(tensors.size()); }
  Tensor<S>& operator[](Index i) { return tensors[size_t(i)]; }
  const Tensor<S>& operator[](Index i) const { return tensors[size_t(i)]; }

  Index find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return Index(i);
    throw MissingCheckpoint("parameter not found: " + name);
  }
  Tensor<S>& at(const std::string& name) { return tensors[size_t(find(name))]; }
  const Tensor<S>& at(const std::string& name) const { return tensors[size_t(find(name))]; }

  Index total_scalars() const {
    Index n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  // Checkpoint = directory of tensor files + manifest JSON.
  void save(const std::filesystem::path& dir, nlohmann::json extra_manifest = {}) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = std::move(extra_manifest);
    manifest["params"] = names;
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write manifest in " + dir.string());
    mf << manifest.dump(2) << "\n";
    for (size_t i = 0; i < names.size(); ++i)
      save_tensor_file(dir / (names[i] + ".bin"), tensors[i]);
  }

  static ParamSet load(const std::filesystem::path& dir, nlohmann::json* manifest_out = nullptr) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw MissingCheckpoint("no manifest in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("params"))
      throw CorruptManifest("bad checkpoint manifest in " + dir.string());
    ParamSet ps;
    for (const auto& name : manifest["params"].get<std::vector<std::string>>())
      ps.add(name, load_tensor_file<S>(dir / (name + ".bin")));
    if (manifest_out) *manifest_out = std::move(manifest);
    return ps;
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (size_t i = 0; i < names.size(); ++i) out.add(names[i], tensors[i].template cast<T>());
    return out;
  }
};

}  // namespace granroute
