#pragma once

#include "fdn/dataset.hpp"
#include "fdn/model.hpp"

#include <torch/torch.h>

#include <string>

namespace fdn::baselines {

enum class BaselineKind { PointMlp, Seq2SeqPatch, Seq2SeqPatchGaussian };

std::string to_string(BaselineKind kind);
/// Accepts point_mlp, seq2seq_patch, seq2seq_patch_gaussian.
BaselineKind parse_baseline(const std::string& name);

struct BaselineConfig {
    BaselineKind kind = BaselineKind::Seq2SeqPatch;
    int dof = 6;
    int history = 100;
    int horizon = 100;
    int latent = 128;
    int patch = 24;
    int stride = 24;
    model::EncoderSpec encoder{};
    int mlp_width = 256;
    int mlp_depth = 3;

    /// Shares n, L, T, D, P, S and the encoder shape with an FDN configuration.
    static BaselineConfig matching(BaselineKind kind, const model::ModelConfig& cfg);

    int num_patches() const { return (history - patch) / stride + 2; }
    bool distributional() const { return kind == BaselineKind::Seq2SeqPatchGaussian; }
    bool pointwise() const { return kind == BaselineKind::PointMlp; }
    void validate() const;
    bool operator==(const BaselineConfig&) const = default;
};

/// Single-step regression [B x 4n] -> [B x 6].
class PointMLPImpl : public torch::nn::Module {
public:
    PointMLPImpl(int dof, int width, int depth);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential layers{nullptr};
    torch::nn::Linear output{nullptr};
};
TORCH_MODULE(PointMLP);

struct SequenceForecast {
    torch::Tensor mu;      // [B x 6 x T]
    torch::Tensor logvar;  // undefined for the deterministic variant
};

/// Shared patch encoder over the 4n absolute input channels, RevIN inverted on
/// the representations, channel mix to 6 and an affine horizon head.
class PatchForecasterImpl : public torch::nn::Module {
public:
    PatchForecasterImpl(const BaselineConfig& cfg);
    SequenceForecast forward(const torch::Tensor& x);  // x [B x 4n x L]

    bool gaussian() const { return !head_logvar_.is_empty(); }

private:
    int dof_;
    model::PatchEncoder encoder_{nullptr};
    torch::nn::Linear channel_mix_{nullptr};
    torch::nn::Linear head_mu_{nullptr};
    torch::nn::Linear head_logvar_{nullptr};
};
TORCH_MODULE(PatchForecaster);

/// Either baseline behind one handle.
class BaselineImpl : public torch::nn::Module {
public:
    explicit BaselineImpl(BaselineConfig cfg);

    const BaselineConfig& config() const { return cfg_; }

    /// point_mlp only: x [B x 4n] normalized absolute inputs -> [B x 6].
    torch::Tensor point(const torch::Tensor& x);
    /// Sequence variants only: x [B x 4n x L] -> forecast over the horizon.
    SequenceForecast sequence(const torch::Tensor& x);

    /// Normalized-scale training loss on a raw batch (MSE, or NLL for the Gaussian variant).
    model::LossParts loss(const dataset::Batch& batch, const dataset::NormStats& stats);

private:
    BaselineConfig cfg_;
    PointMLP mlp_{nullptr};
    PatchForecaster seq_{nullptr};
};
TORCH_MODULE(Baseline);

}  // namespace fdn::baselines
