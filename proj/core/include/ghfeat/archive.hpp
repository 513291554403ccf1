#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ghfeat {

struct ArchivedTensor {
  std::vector<int64_t> shape;
  std::vector<float> values;

  bool operator==(const ArchivedTensor&) const = default;
};

/// Named float32 tensors plus a JSON metadata block, stored as one file:
///
///   "GHFEATAR" | u32 version | u64 header bytes | JSON header | payload
///
/// The header lists name, shape, offset and element count of every tensor
/// and the SHA-256 of the payload.
class ParameterArchive {
 public:
  static constexpr uint32_t kFormatVersion = 1;

  void put(const std::string& name, const torch::Tensor& tensor);
  void put(const std::string& name, ArchivedTensor tensor);
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const ArchivedTensor& at(const std::string& name) const;
  torch::Tensor tensor(const std::string& name) const;

  const std::map<std::string, ArchivedTensor>& tensors() const { return tensors_; }
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  // Copies every parameter and buffer of `module` under `prefix.`.
  void add_module(const torch::nn::Module& module, const std::string& prefix);
  // Loads `prefix.*` entries into the module; every module tensor must be present.
  void load_module(torch::nn::Module& module, const std::string& prefix) const;

  // Archive restricted to names under `prefix.`.
  ParameterArchive subset(const std::string& prefix) const;
  void merge(const ParameterArchive& other);

  // SHA-256 over names, shapes and payloads (metadata excluded).
  std::string digest() const;

  std::vector<char> serialize() const;
  static ParameterArchive deserialize(const std::vector<char>& bytes);

  bool operator==(const ParameterArchive& other) const {
    return tensors_ == other.tensors_ && metadata_ == other.metadata_;
  }

 private:
  std::map<std::string, ArchivedTensor> tensors_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

void store_archive(const ParameterArchive& archive, const std::filesystem::path& path);
ParameterArchive load_archive(const std::filesystem::path& path);

// SHA-256 hex of a byte range.
std::string sha256_hex(const void* data, size_t size);
// Digest of every parameter and buffer of a module, in registration order.
std::string module_digest(const torch::nn::Module& module);

}  // namespace ghfeat
