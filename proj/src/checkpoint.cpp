#include "mdbank/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mdbank {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'D', 'B', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CheckpointError("truncated checkpoint");
  return v;
}

fs::path temp_path(const fs::path& path) { return path.string() + ".tmp"; }

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out << text;
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void save_checkpoint(const fs::path& path, const ParamStore& params, const json& config) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string header = json{{"config", config}, {"tensors", index}, {"format", "float64-le"}}.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put(out, kVersion);
    put(out, static_cast<std::uint64_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [_, t] : params) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  if (get<std::uint32_t>(in) != kVersion) throw CheckpointError("unsupported checkpoint version");
  const auto header_len = get<std::uint64_t>(in);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw CheckpointError("truncated checkpoint header");
  const json h = json::parse(header);
  Checkpoint ckpt;
  ckpt.config = h.at("config");
  const auto data_start = in.tellg();
  for (const auto& entry : h.at("tensors")) {
    Tensor& t = ckpt.params.add(entry.at("name").get<std::string>(), entry.at("shape").get<std::vector<int>>());
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>() * sizeof(double)));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("truncated tensor data for " + entry.at("name").get<std::string>());
  }
  return ckpt;
}

void load_params_strict(const Checkpoint& ckpt, ParamStore& into, const std::string& prefix) {
  for (auto& [name, t] : into) {
    const std::string full = prefix + name;
    if (!ckpt.params.contains(full)) throw CheckpointError("checkpoint lacks parameter " + full);
    const Tensor& src = ckpt.params.get(full);
    if (!src.same_shape(t)) {
      throw CheckpointError("shape mismatch for " + full + ": checkpoint " + shape_string(src.shape()) +
                            ", expected " + shape_string(t.shape()));
    }
    t = src;
  }
}

}  // namespace mdbank
