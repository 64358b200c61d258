#pragma once

// Checkpoint = weights.bin (named float32 tensors) + manifest.json.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refine/hashing.hpp"
#include "refine/nets.hpp"

namespace refine {

inline constexpr int kCheckpointSchemaVersion = 1;

struct TensorBlob {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
};

void save_weights(const std::filesystem::path& path, const std::vector<TensorBlob>& tensors);
std::vector<TensorBlob> load_weights(const std::filesystem::path& path);

template <typename Module>
std::vector<TensorBlob> collect_tensors(const Module& m) {
  std::vector<TensorBlob> out;
  m.for_each_param([&](const std::string& name, const Param<float>& p) {
    TensorBlob b{name, static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()), {}};
    b.data.assign(p.value.data(), p.value.data() + p.value.size());
    out.push_back(std::move(b));
  });
  return out;
}

template <typename Module>
void assign_tensors(Module& m, const std::vector<TensorBlob>& tensors) {
  size_t k = 0;
  m.for_each_param([&](const std::string& name, Param<float>& p) {
    require(k < tensors.size(), ErrorKind::ShapeMismatch, "checkpoint has too few tensors");
    const TensorBlob& b = tensors[k++];
    require(b.name == name, ErrorKind::ShapeMismatch, "checkpoint tensor '" + b.name + "' where '" + name + "' expected");
    require(b.rows == p.value.rows() && b.cols == p.value.cols(), ErrorKind::ShapeMismatch,
            "checkpoint tensor '" + name + "' has wrong shape");
    std::memcpy(p.value.data(), b.data.data(), b.data.size() * sizeof(float));
  });
  require(k == tensors.size(), ErrorKind::ShapeMismatch, "checkpoint has extra tensors");
}

/// SHA-256 over names, shapes and raw values of every parameter.
template <typename Module>
std::string param_checksum(const Module& m) {
  Sha256 h;
  m.for_each_param([&](const std::string& name, const Param<float>& p) {
    h.update(name);
    const std::int64_t shape[2] = {static_cast<std::int64_t>(p.value.rows()), static_cast<std::int64_t>(p.value.cols())};
    h.update(shape, sizeof(shape));
    h.update(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(float));
  });
  return h.hex();
}

/// Records every checkpoint opened through load_* so runs can prove isolation.
struct ArtifactAudit {
  std::vector<std::string> opened;
};

void save_checkpoint(const std::filesystem::path& dir, const std::vector<TensorBlob>& tensors, nlohmann::json manifest);
nlohmann::json read_manifest(const std::filesystem::path& dir);

void save_backbone(const std::filesystem::path& dir, const Backbone<float>& b, nlohmann::json extra);
Backbone<float> load_backbone(const std::filesystem::path& dir, ArtifactAudit* audit = nullptr);

void save_control(const std::filesystem::path& dir, const ControlModule<float>& c, nlohmann::json extra);
ControlModule<float> load_control(const std::filesystem::path& dir, ArtifactAudit* audit = nullptr);

}  // namespace refine
