#pragma once

#include "fdn/baselines.hpp"
#include "fdn/dataset.hpp"
#include "fdn/model.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <optional>
#include <string>
#include <vector>

namespace fdn::checkpoint {

enum class Stage { Scratch, Pretrain, LinearProbe, FineTune };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);

/// Plain-text description stored next to the parameter blob.
struct Manifest {
    std::string kind = "fdn";  // "fdn" or a baseline name
    Stage stage = Stage::Scratch;
    model::ModelConfig model{};
    std::optional<baselines::BaselineConfig> baseline;
    dataset::NormStats stats;
    uint64_t seed = 0;
    int64_t steps = 0;  // optimizer steps taken; 0 means untrained
    std::vector<std::string> test_episodes;
    std::string hash;  // SHA-256 of the parameter blob, filled on save

    bool trained() const { return steps > 0; }
};

inline constexpr const char* kBlobName = "parameters.bin";
inline constexpr const char* kManifestName = "manifest.txt";

/// Hex SHA-256 of a byte string / file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Named parameters and buffers serialized in registration order as float64.
std::string serialize_parameters(torch::nn::Module& module);
void deserialize_parameters(torch::nn::Module& module, const std::string& blob);

/// SHA-256 over the serialized tensors whose names start with one of `prefixes`
/// (all tensors when empty).
std::string parameter_hash(torch::nn::Module& module, const std::vector<std::string>& prefixes = {});

/// Writes `dir/parameters.bin` and `dir/manifest.txt`; returns the manifest with its hash set.
Manifest save(const std::filesystem::path& dir, torch::nn::Module& module, Manifest manifest);

Manifest read_manifest(const std::filesystem::path& dir);

/// Loads parameters after checking the blob hash and that the stored model
/// configuration is compatible with `expected`.
void load_fdn(const std::filesystem::path& dir, model::FDN& model, const Manifest& manifest);
void load_baseline(const std::filesystem::path& dir, baselines::Baseline& model, const Manifest& manifest);

/// Copies every tensor whose name starts with one of `prefixes` from `source`
/// into `target`; shapes must agree. Returns the number of tensors copied.
size_t copy_parameters(torch::nn::Module& source, torch::nn::Module& target, const std::vector<std::string>& prefixes);

/// Manifest key-value serialization of the configuration structures.
void write_model_config(std::ostream& os, const std::string& prefix, const model::ModelConfig& cfg);
model::ModelConfig read_model_config(const std::map<std::string, std::string>& kv, const std::string& prefix);

}  // namespace fdn::checkpoint
