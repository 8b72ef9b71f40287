#pragma once

#include "fdn/baselines.hpp"
#include "fdn/checkpoint.hpp"
#include "fdn/dataset.hpp"
#include "fdn/model.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fdn::training {

using checkpoint::Stage;

struct TrainConfig {
    int batch_size = 64;
    int epochs = 5;
    int64_t max_steps = 0;  // > 0: fixed iteration budget, overrides epochs
    double learning_rate = 1e-3;
    double clip_norm = 5.0;  // <= 0 disables clipping
    double data_fraction = 1.0;  // share of windows used, drawn with the seed
    uint64_t seed = 0;
    Stage stage = Stage::Scratch;
    std::filesystem::path metrics_log;  // optional append-only CSV

    void validate() const;
};

struct StepRecord {
    int64_t step = 0;
    double total = 0.0;
    double trend = 0.0;
    double residual = 0.0;
    double wall_s = 0.0;
};

struct TrainResult {
    std::vector<StepRecord> history;
    int64_t steps = 0;
    bool aborted = false;
    std::string abort_reason;
};

using LossFn = std::function<model::LossParts(const dataset::Batch&)>;

/// Adam over `params` with seeded shuffling. A non-finite loss or gradient stops
/// the run before the offending update, so parameters stay at the last good step.
TrainResult optimize(const std::vector<torch::Tensor>& params, const dataset::WindowSet& data, const TrainConfig& cfg,
                     const LossFn& loss_fn);

/// Normalized-scale FDN loss on a raw batch, in the dtype of the model.
model::LossParts fdn_loss(model::FDN& net, const dataset::Batch& batch, const dataset::NormStats& stats);

/// Mean loss over all windows of a set without gradient tracking.
double mean_loss(model::FDN& net, const dataset::WindowSet& data, const dataset::NormStats& stats,
                 int batch_size = 256);

/// Seeds the global generator, then builds the model.
model::FDN make_fdn(const model::ModelConfig& cfg, uint64_t seed);
baselines::Baseline make_baseline(const baselines::BaselineConfig& cfg, uint64_t seed);

std::vector<torch::Tensor> trainable(torch::nn::Module& module);

TrainResult train(model::FDN& net, const dataset::WindowSet& data, const dataset::NormStats& stats,
                  const TrainConfig& cfg);
TrainResult train(baselines::Baseline& net, const dataset::WindowSet& data, const dataset::NormStats& stats,
                  const TrainConfig& cfg);

/// Rows excluded from normalization when the actuation signal is masked.
std::vector<bool> actuation_rows(int dof);

/// Generator settings for the surrogate pretraining corpus: trend-dominated
/// wrench profile with a weak vibration band.
dataset::SynthConfig surrogate_synth_config();

struct CorpusConfig {
    dataset::SynthConfig synth = surrogate_synth_config();
    int episodes = 12;
    uint64_t seed = 0;
};

/// Alternating 7- and 6-DoF episodes, preprocessed and embedded in the 7-DoF layout.
std::vector<dataset::Episode> surrogate_corpus(const CorpusConfig& cfg);

struct PretrainConfig {
    model::ModelConfig model{};  // forced to n = 7 with the actuation path masked
    TrainConfig train{};
    int window_stride = 10;
};

struct Trained {
    model::FDN model{nullptr};
    dataset::NormStats stats;
    TrainResult result;
};

Trained pretrain(const std::vector<dataset::Episode>& corpus, const PretrainConfig& cfg);

struct TransferConfig {
    TrainConfig probe{};
    TrainConfig fine_tune{};
    bool run_fine_tune = true;
    uint64_t seed = 0;  // initialization of the non-transferred layers
};

struct TransferResult {
    model::FDN model{nullptr};
    dataset::NormStats stats;
    TrainResult probe;
    TrainResult fine_tune;
    std::string frozen_hash_before;
    std::string frozen_hash_after_probe;
};

/// Input normalization for transfer: pretraining statistics for every row
/// except the actuation rows, which were masked during pretraining and come
/// from the downstream fit; wrench statistics come from the downstream fit.
dataset::NormStats merge_transfer_stats(const dataset::NormStats& pretrained, const dataset::NormStats& downstream);

/// `downstream` windows must use the pretrained n (7-DoF layout).
TransferResult transfer(const std::filesystem::path& pretrained_dir, const dataset::WindowSet& downstream,
                        const TransferConfig& cfg);

}  // namespace fdn::training
