#include "lpf/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lpf/errors.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lpf {

namespace {

// Checkpoints are always little-endian on disk; every supported target here
// is little-endian, so raw float writes are the wire format.
static_assert(sizeof(float) == 4, "checkpoint format requires 32-bit floats");

void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ParseError("checkpoint: cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  fs::rename(tmp, path);
}

}  // namespace

void Checkpoint::save(const std::string& dir) const {
  fs::create_directories(dir);

  ordered_json index = ordered_json::object();
  std::string blob;
  for (const auto& [name, tensor] : params) {
    ordered_json entry;
    entry["shape"] = tensor.shape;
    entry["offset_bytes"] = blob.size();
    entry["num_elements"] = tensor.numel();
    index[name] = entry;
    blob.append(reinterpret_cast<const char*>(tensor.data.data()),
                tensor.data.size() * sizeof(float));
  }

  ordered_json meta = ordered_json::object();
  for (const auto& [k, v] : this->meta) meta[k] = v;

  write_file_atomic(fs::path(dir) / "params.bin", blob);
  write_file_atomic(fs::path(dir) / "index.json", index.dump(2) + "\n");
  write_file_atomic(fs::path(dir) / "meta.json", meta.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::string& dir) {
  Checkpoint ckpt;
  fs::path base(dir);
  std::ifstream meta_in(base / "meta.json");
  if (!meta_in) throw ParseError("checkpoint: missing meta.json in " + dir);
  ordered_json meta = ordered_json::parse(meta_in);
  for (auto& [k, v] : meta.items())
    ckpt.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();

  std::ifstream index_in(base / "index.json");
  if (!index_in) throw ParseError("checkpoint: missing index.json in " + dir);
  ordered_json index = ordered_json::parse(index_in);

  std::ifstream bin(base / "params.bin", std::ios::binary);
  if (!bin) throw ParseError("checkpoint: missing params.bin in " + dir);
  std::string blob((std::istreambuf_iterator<char>(bin)),
                   std::istreambuf_iterator<char>());

  for (auto& [name, entry] : index.items()) {
    std::vector<int64_t> shape = entry["shape"].get<std::vector<int64_t>>();
    size_t offset = entry["offset_bytes"].get<size_t>();
    int64_t n = Tensor::numel_of(shape);
    if (offset + static_cast<size_t>(n) * sizeof(float) > blob.size())
      throw ParseError("checkpoint: parameter '" + name +
                       "' extends past params.bin");
    Tensor t(shape);
    std::memcpy(t.data.data(), blob.data() + offset,
                static_cast<size_t>(n) * sizeof(float));
    ckpt.params.emplace_back(name, std::move(t));
  }
  return ckpt;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace lpf
