#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mctn/errors.hpp"
#include "mctn/tensor.hpp"

namespace mctn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

// Checkpoint = JSON manifest (tensor names, shapes, byte offsets, topology)
// next to one flat float32 blob. Values are stored in 32-bit precision.
struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError(cat("checkpoint: tensor '", name, "' not found"));
  }
};

namespace detail {
inline std::uint64_t fnv1a(const std::vector<char>& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& manifest_path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            const nlohmann::json& topology = nlohmann::json::object()) {
  const std::filesystem::path blob_path = std::filesystem::path(manifest_path).replace_extension(".bin");
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = blob.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t[i]);
      const char* p = reinterpret_cast<const char*>(&f);
      blob.insert(blob.end(), p, p + sizeof(float));
    }
    entries.push_back(std::move(e));
  }
  nlohmann::json manifest;
  manifest["format"] = "mctn-checkpoint";
  manifest["version"] = 1;
  manifest["blob"] = blob_path.filename().string();
  manifest["blob_bytes"] = blob.size();
  manifest["blob_fnv1a"] = detail::fnv1a(blob);
  manifest["tensors"] = std::move(entries);
  manifest["topology"] = topology;

  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw IoError(cat("checkpoint: cannot write ", blob_path.string()));
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  bf.close();
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError(cat("checkpoint: cannot write ", manifest_path.string()));
  mf << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError(cat("checkpoint: cannot open ", manifest_path.string()));
  Checkpoint ck;
  try {
    mf >> ck.manifest;
  } catch (const std::exception& e) {
    throw IoError(cat("checkpoint: bad manifest ", manifest_path.string(), ": ", e.what()));
  }
  if (ck.manifest.value("format", "") != "mctn-checkpoint")
    throw IoError(cat("checkpoint: ", manifest_path.string(), " is not a checkpoint manifest"));

  const std::filesystem::path blob_path =
      manifest_path.parent_path() / ck.manifest.at("blob").get<std::string>();
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw IoError(cat("checkpoint: cannot open blob ", blob_path.string()));
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (blob.size() != ck.manifest.at("blob_bytes").get<std::size_t>())
    throw IoError(cat("checkpoint: blob ", blob_path.string(), " integrity error: size ", blob.size(),
                      " != recorded ", ck.manifest.at("blob_bytes").get<std::size_t>()));
  if (detail::fnv1a(blob) != ck.manifest.at("blob_fnv1a").get<std::uint64_t>())
    throw IoError(cat("checkpoint: blob ", blob_path.string(), " integrity error: checksum mismatch"));

  for (const auto& e : ck.manifest.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > blob.size())
      throw IoError(cat("checkpoint: tensor '", e.at("name").get<std::string>(), "' overruns blob"));
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, blob.data() + offset + i * sizeof(float), sizeof(float));
      t[i] = static_cast<double>(f);
    }
    if (!t.all_finite())
      throw IoError(cat("checkpoint: tensor '", e.at("name").get<std::string>(), "' has non-finite values"));
    ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace mctn
