#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "ghfeat/archive.hpp"
#include "ghfeat/encoder.hpp"
#include "ghfeat/generator.hpp"

namespace ghfeat {

// Tensor name prefixes inside archives.
inline constexpr const char* kGeneratorPrefix = "generator";
inline constexpr const char* kEncoderPrefix = "encoder";
inline constexpr const char* kDiscriminatorPrefix = "discriminator";
inline constexpr const char* kPerceptualPrefix = "perceptual";

// Writes generator weights plus the spec needed to rebuild it.
void add_generator(ParameterArchive& archive, const Generator& generator);
void add_encoder(ParameterArchive& archive, const Encoder& encoder);

// Rebuild from the spec in archive metadata; both throw ArchiveError when
// the spec or any tensor is missing.
Generator load_generator(const ParameterArchive& archive);
Encoder load_encoder(const ParameterArchive& archive);

bool has_generator(const ParameterArchive& archive);
bool has_encoder(const ParameterArchive& archive);

/// Generator + encoder pair as consumed by editing and the service. Both
/// modules are in eval mode with gradients disabled.
struct ModelBundle {
  Generator generator{nullptr};
  Encoder encoder{nullptr};
  std::string generator_digest;
  std::string encoder_digest;

  const GeneratorSpec& spec() const { return generator->spec(); }
};

// An encoder archive normally carries its generator too; `generator_path`
// overrides it when given.
ModelBundle load_bundle(const std::filesystem::path& encoder_path, const std::filesystem::path& generator_path = {});
ModelBundle make_bundle(Generator generator, Encoder encoder);

void freeze(torch::nn::Module& module);

}  // namespace ghfeat
