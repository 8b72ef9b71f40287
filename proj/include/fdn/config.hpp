#pragma once

#include "fdn/baselines.hpp"
#include "fdn/dataset.hpp"
#include "fdn/evaluation.hpp"
#include "fdn/model.hpp"
#include "fdn/training.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace fdn::config {

/// Every setting a CLI run can consume.
struct RunConfig {
    dataset::SynthConfig synth{};
    dataset::SavGolConfig savgol{};
    model::ModelConfig model{};
    training::TrainConfig train{};
    int window_stride = 1;
    double test_fraction = 1.0 / 3.0;
    int mlp_width = 256;
    int mlp_depth = 3;

    training::CorpusConfig corpus{};
    int pretrain_stride = 10;
    int64_t pretrain_iterations = 100000;

    training::TrainConfig probe{};
    training::TrainConfig fine_tune{};

    evaluation::EvalConfig eval{};
    std::vector<double> delays_ms{100.0, 1000.0};

    RunConfig();

    /// Propagates the shared filter settings into every consumer.
    void set_filter(const spectral::FilterSpec& spec);
};

/// Applies one `section.key = value` setting; throws std::invalid_argument on
/// unknown keys or malformed values.
void apply(RunConfig& cfg, const std::string& key, const std::string& value);

/// Reads a `key = value` file with [section] headers.
RunConfig load(const std::filesystem::path& path);

/// All keys with their current values, in the file format accepted by load().
void write(std::ostream& os, const RunConfig& cfg);

std::vector<double> parse_numbers(const std::string& list);

}  // namespace fdn::config
