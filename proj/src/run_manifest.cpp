#include "mdbank/run_manifest.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

#include <openssl/evp.h>

namespace mdbank {
namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"command", m.command},         {"config", m.config},         {"dataset_fingerprint", m.dataset_fingerprint},
       {"code_version", m.code_version}, {"started_at", m.started_at}, {"finished_at", m.finished_at}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  m.code_version = j.value("code_version", std::string(kCodeVersion));
  m.started_at = j.value("started_at", std::string());
  m.finished_at = j.value("finished_at", std::string());
}

std::string dataset_fingerprint(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  for (const auto& rel : files) {
    const std::string name = rel.generic_string();
    EVP_DigestUpdate(ctx.get(), name.data(), name.size() + 1);
    std::ifstream in(root / rel, std::ios::binary);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace mdbank
