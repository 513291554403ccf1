#include "ghfeat/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "ghfeat/errors.hpp"

namespace ghfeat {

static_assert(std::endian::native == std::endian::little, "archive payloads are little-endian");

namespace {

constexpr std::array<char, 8> kMagic{'G', 'H', 'F', 'E', 'A', 'T', 'A', 'R'};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("failed to initialise SHA-256");
    }
  }
  void update(const void* data, size_t size) { EVP_DigestUpdate(ctx_.get(), data, size); }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 0xF]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

ArchivedTensor to_archived(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  ArchivedTensor out;
  out.shape.assign(c.sizes().begin(), c.sizes().end());
  out.values.assign(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  return out;
}

int64_t element_count(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
void append_pod(std::vector<char>& out, T value) {
  const auto* p = reinterpret_cast<const char*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

std::string sha256_hex(const void* data, size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

void ParameterArchive::put(const std::string& name, const torch::Tensor& tensor) { put(name, to_archived(tensor)); }

void ParameterArchive::put(const std::string& name, ArchivedTensor tensor) {
  GHFEAT_EXPECT(!name.empty(), "archive tensor names must be non-empty");
  GHFEAT_EXPECT(element_count(tensor.shape) == static_cast<int64_t>(tensor.values.size()),
                "archive tensor '" + name + "' payload does not match its shape");
  tensors_[name] = std::move(tensor);
}

const ArchivedTensor& ParameterArchive::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ArchiveError("archive has no tensor named '" + name + "'");
  return it->second;
}

torch::Tensor ParameterArchive::tensor(const std::string& name) const {
  const auto& a = at(name);
  return torch::from_blob(const_cast<float*>(a.values.data()), a.shape, torch::kFloat32).clone();
}

void ParameterArchive::add_module(const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& p : module.named_parameters(true)) put(prefix + "." + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) {
    if (b.value().scalar_type() == torch::kLong) {
      put(prefix + "." + b.key(), b.value().to(torch::kFloat64).to(torch::kFloat32));
    } else {
      put(prefix + "." + b.key(), b.value());
    }
  }
}

void ParameterArchive::load_module(torch::nn::Module& module, const std::string& prefix) const {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor target) {
    const auto name = prefix + "." + key;
    auto source = tensor(name);
    if (source.sizes() != target.sizes()) {
      throw ArchiveError("shape mismatch for '" + name + "'");
    }
    target.copy_(source.to(target.scalar_type()));
  };
  for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

ParameterArchive ParameterArchive::subset(const std::string& prefix) const {
  ParameterArchive out;
  out.metadata_ = metadata_;
  const auto p = prefix + ".";
  for (const auto& [name, t] : tensors_) {
    if (name.starts_with(p)) out.tensors_[name] = t;
  }
  return out;
}

void ParameterArchive::merge(const ParameterArchive& other) {
  for (const auto& [name, t] : other.tensors_) {
    if (tensors_.contains(name)) throw ArchiveError("duplicate tensor name on merge: " + name);
    tensors_[name] = t;
  }
  metadata_.update(other.metadata_);
}

std::string ParameterArchive::digest() const {
  Sha256 h;
  for (const auto& [name, t] : tensors_) {
    h.update(name);
    h.update(t.shape.data(), t.shape.size() * sizeof(int64_t));
    h.update(t.values.data(), t.values.size() * sizeof(float));
  }
  return h.hex();
}

std::string module_digest(const torch::nn::Module& module) {
  Sha256 h;
  auto feed = [&](const std::string& name, const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    h.update(name);
    h.update(c.data_ptr(), static_cast<size_t>(c.numel()) * c.element_size());
  };
  for (const auto& p : module.named_parameters(true)) feed(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) feed(b.key(), b.value());
  return h.hex();
}

std::vector<char> ParameterArchive::serialize() const {
  nlohmann::json index = nlohmann::json::array();
  std::vector<char> payload;
  int64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    index.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset},
                     {"count", static_cast<int64_t>(t.values.size())}});
    const auto* p = reinterpret_cast<const char*>(t.values.data());
    payload.insert(payload.end(), p, p + t.values.size() * sizeof(float));
    offset += static_cast<int64_t>(t.values.size());
  }
  nlohmann::json header{{"tensors", index},
                        {"metadata", metadata_},
                        {"payload_bytes", payload.size()},
                        {"payload_sha256", sha256_hex(payload.data(), payload.size())}};
  const auto text = header.dump();

  std::vector<char> out(kMagic.begin(), kMagic.end());
  append_pod<uint32_t>(out, kFormatVersion);
  append_pod<uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

ParameterArchive ParameterArchive::deserialize(const std::vector<char>& bytes) {
  constexpr size_t fixed = kMagic.size() + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < fixed) throw ArchiveCorruptionError("archive shorter than its fixed header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw ArchiveCorruptionError("bad archive magic");

  uint32_t version = 0;
  uint64_t header_size = 0;
  std::memcpy(&version, bytes.data() + kMagic.size(), sizeof version);
  std::memcpy(&header_size, bytes.data() + kMagic.size() + sizeof version, sizeof header_size);
  if (version != kFormatVersion) {
    throw ArchiveVersionError("archive format version " + std::to_string(version) + " is incompatible with " +
                              std::to_string(kFormatVersion));
  }
  if (header_size > bytes.size() - fixed) throw ArchiveCorruptionError("archive header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + fixed, bytes.begin() + static_cast<std::ptrdiff_t>(fixed + header_size));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveCorruptionError(std::string("archive header is not valid JSON: ") + e.what());
  }

  const size_t payload_start = fixed + header_size;
  const size_t payload_bytes = header.at("payload_bytes").get<size_t>();
  if (bytes.size() - payload_start != payload_bytes) {
    throw ArchiveCorruptionError("archive payload has " + std::to_string(bytes.size() - payload_start) +
                                 " bytes, header says " + std::to_string(payload_bytes));
  }
  const char* payload = bytes.data() + payload_start;
  if (sha256_hex(payload, payload_bytes) != header.at("payload_sha256").get<std::string>()) {
    throw ArchiveCorruptionError("archive payload digest mismatch");
  }

  ParameterArchive out;
  out.metadata_ = header.at("metadata");
  for (const auto& entry : header.at("tensors")) {
    ArchivedTensor t;
    t.shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<int64_t>();
    const auto count = entry.at("count").get<int64_t>();
    if (count != element_count(t.shape) || offset < 0 ||
        static_cast<size_t>(offset + count) * sizeof(float) > payload_bytes) {
      throw ArchiveCorruptionError("archive index entry out of range: " + entry.at("name").get<std::string>());
    }
    t.values.resize(static_cast<size_t>(count));
    std::memcpy(t.values.data(), payload + offset * static_cast<int64_t>(sizeof(float)),
                static_cast<size_t>(count) * sizeof(float));
    const auto name = entry.at("name").get<std::string>();
    if (out.tensors_.contains(name)) throw ArchiveCorruptionError("duplicate tensor name: " + name);
    out.tensors_[name] = std::move(t);
  }
  return out;
}

void store_archive(const ParameterArchive& archive, const std::filesystem::path& path) {
  const auto bytes = archive.serialize();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open archive for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("failed writing archive: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ParameterArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ParameterArchive::deserialize(bytes);
}

}  // namespace ghfeat
