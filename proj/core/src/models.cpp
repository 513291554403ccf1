#include "ghfeat/models.hpp"

#include "ghfeat/errors.hpp"

namespace ghfeat {

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.set_requires_grad(false);
  module.eval();
}

void add_generator(ParameterArchive& archive, const Generator& generator) {
  archive.add_module(*generator, kGeneratorPrefix);
  archive.metadata()["generator_spec"] = generator->spec().to_json();
  archive.metadata()["generator_digest"] = module_digest(*generator);
}

void add_encoder(ParameterArchive& archive, const Encoder& encoder) {
  archive.add_module(*encoder, kEncoderPrefix);
  archive.metadata()["encoder_spec"] = encoder->spec().to_json();
  archive.metadata()["encoder_digest"] = module_digest(*encoder);
  if (!archive.metadata().contains("generator_spec")) {
    archive.metadata()["generator_spec"] = encoder->generator_spec().to_json();
  }
}

bool has_generator(const ParameterArchive& archive) {
  return archive.metadata().contains("generator_spec") &&
         archive.contains(std::string(kGeneratorPrefix) + ".const_input");
}

bool has_encoder(const ParameterArchive& archive) {
  return archive.metadata().contains("encoder_spec") && archive.metadata().contains("generator_spec");
}

Generator load_generator(const ParameterArchive& archive) {
  if (!has_generator(archive)) throw ArchiveError("archive does not contain a generator");
  GeneratorSpec spec;
  try {
    spec = GeneratorSpec::from_json(archive.metadata().at("generator_spec"));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("malformed generator spec: ") + e.what());
  }
  Generator g(spec);
  archive.load_module(*g, kGeneratorPrefix);
  return g;
}

Encoder load_encoder(const ParameterArchive& archive) {
  if (!has_encoder(archive)) throw ArchiveError("archive does not contain an encoder");
  EncoderSpec spec;
  GeneratorSpec gspec;
  try {
    spec = EncoderSpec::from_json(archive.metadata().at("encoder_spec"));
    gspec = GeneratorSpec::from_json(archive.metadata().at("generator_spec"));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("malformed encoder spec: ") + e.what());
  }
  Encoder e(spec, gspec);
  archive.load_module(*e, kEncoderPrefix);
  return e;
}

ModelBundle make_bundle(Generator generator, Encoder encoder) {
  if (!(encoder->generator_spec() == generator->spec())) {
    throw ConfigurationError("encoder was built for a different generator spec");
  }
  freeze(*generator);
  freeze(*encoder);
  ModelBundle b;
  b.generator_digest = module_digest(*generator);
  b.encoder_digest = module_digest(*encoder);
  b.generator = std::move(generator);
  b.encoder = std::move(encoder);
  return b;
}

ModelBundle load_bundle(const std::filesystem::path& encoder_path, const std::filesystem::path& generator_path) {
  const auto enc_archive = load_archive(encoder_path);
  auto encoder = load_encoder(enc_archive);
  auto generator = generator_path.empty() ? load_generator(enc_archive) : load_generator(load_archive(generator_path));
  return make_bundle(std::move(generator), std::move(encoder));
}

}  // namespace ghfeat
