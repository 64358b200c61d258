#include "refine/checkpoint.hpp"

#include <algorithm>
#include <fstream>

namespace refine {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'R', 'F', 'C', 'K'};

template <typename V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  require(in.good(), ErrorKind::IOFailure, "truncated checkpoint");
  return v;
}

}  // namespace

void save_weights(const fs::path& path, const std::vector<TensorBlob>& tensors) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::IOFailure, "cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols));
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  require(out.good(), ErrorKind::IOFailure, "failed writing " + path.string());
}

std::vector<TensorBlob> load_weights(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::IOFailure, "cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::equal(magic, magic + 4, kMagic), ErrorKind::IOFailure, "bad checkpoint magic in " + path.string());
  require(get<std::uint32_t>(in) == 1, ErrorKind::IOFailure, "unsupported weights version");
  const auto count = get<std::uint32_t>(in);
  std::vector<TensorBlob> out(count);
  for (auto& t : out) {
    const auto len = get<std::uint32_t>(in);
    t.name.resize(len);
    in.read(t.name.data(), len);
    t.rows = static_cast<int>(get<std::uint32_t>(in));
    t.cols = static_cast<int>(get<std::uint32_t>(in));
    t.data.resize(static_cast<size_t>(t.rows) * t.cols);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    require(in.good(), ErrorKind::IOFailure, "truncated checkpoint " + path.string());
  }
  return out;
}

void save_checkpoint(const fs::path& dir, const std::vector<TensorBlob>& tensors, nlohmann::json manifest) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::IOFailure, "cannot create " + dir.string());
  save_weights(dir / "weights.bin", tensors);
  manifest["schema_version"] = kCheckpointSchemaVersion;
  manifest["weights_sha256"] = sha256_file(dir / "weights.bin");
  std::ofstream out(dir / "manifest.json");
  require(out.good(), ErrorKind::IOFailure, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), ErrorKind::MissingArtifact, "no checkpoint manifest in " + dir.string());
  return nlohmann::json::parse(in);
}

void save_backbone(const fs::path& dir, const Backbone<float>& b, nlohmann::json extra) {
  extra["kind"] = "backbone";
  extra["spec"] = to_json(b.spec());
  extra["param_checksum"] = param_checksum(b);
  save_checkpoint(dir, collect_tensors(b), std::move(extra));
}

Backbone<float> load_backbone(const fs::path& dir, ArtifactAudit* audit) {
  const auto manifest = read_manifest(dir);
  require(manifest.at("kind") == "backbone", ErrorKind::MissingArtifact, dir.string() + " is not a backbone checkpoint");
  if (audit) audit->opened.push_back(fs::absolute(dir).lexically_normal().string());
  Backbone<float> b(model_spec_from_json(manifest.at("spec")));
  assign_tensors(b, load_weights(dir / "weights.bin"));
  return b;
}

void save_control(const fs::path& dir, const ControlModule<float>& c, nlohmann::json extra) {
  extra["kind"] = "control";
  extra["role"] = to_string(c.role());
  extra["layers"] = c.layers();
  extra["targets"] = c.targets();
  extra["spec"] = to_json(c.spec());
  extra["param_checksum"] = param_checksum(c);
  save_checkpoint(dir, collect_tensors(c), std::move(extra));
}

ControlModule<float> load_control(const fs::path& dir, ArtifactAudit* audit) {
  const auto manifest = read_manifest(dir);
  require(manifest.at("kind") == "control", ErrorKind::MissingArtifact, dir.string() + " is not a control checkpoint");
  if (audit) audit->opened.push_back(fs::absolute(dir).lexically_normal().string());
  const auto role = manifest.at("role") == "teacher" ? ControlRole::Teacher : ControlRole::Student;
  ControlModule<float> c(model_spec_from_json(manifest.at("spec")), role, manifest.at("layers").get<int>(),
                         manifest.at("targets").get<std::vector<std::vector<int>>>());
  assign_tensors(c, load_weights(dir / "weights.bin"));
  return c;
}

}  // namespace refine
