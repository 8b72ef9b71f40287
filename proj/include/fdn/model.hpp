#pragma once

#include "fdn/spectral.hpp"

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

namespace fdn::model {

/// Architectural ablations. Each flag removes one component of the full model.
struct AblationFlags {
    bool no_fef = false;          // no frequency enhancement filter
    bool no_fef_weights = false;  // M filters, uniform expert weights
    bool no_fef_moe = false;      // single unweighted filter (M = 1)
    bool no_fpf = false;          // no output band filters
    bool shared_encoder = false;  // one encoder for all time-varying modalities
    bool no_trend_head = false;
    bool no_res_head = false;

    /// Parses a comma-separated list of flag names; throws on unknown names.
    static AblationFlags parse(const std::string& list);
    static const std::vector<std::string>& all_names();
    static AblationFlags single(const std::string& name);

    std::string to_string() const;
    bool operator==(const AblationFlags&) const = default;
};

struct EncoderSpec {
    int layers = 3;
    int heads = 8;
    int ffn_multiplier = 4;

    bool operator==(const EncoderSpec&) const = default;
};

struct ModelConfig {
    int dof = 6;
    int history = 100;  // L
    int horizon = 100;  // T
    int latent = 128;   // D
    int patch = 24;     // P
    int stride = 24;    // S, equal to P
    int experts = 32;   // M
    spectral::FilterSpec filter{};
    bool mask_u = false;
    AblationFlags ablation{};
    EncoderSpec encoder{};

    int num_patches() const { return (history - patch) / stride + 2; }
    int bins() const { return history / 2 + 1; }
    int effective_experts() const { return ablation.no_fef_moe ? 1 : experts; }

    void validate() const;

    /// Architecture equality; `mask_u` is a freeze flag and is ignored.
    bool compatible_with(const ModelConfig& other) const;
};

/// Log-variance written into the residual fields when the residual head is removed.
inline constexpr double kDegenerateLogVar = -80.0;
inline constexpr double kLogVarMin = -12.0;
inline constexpr double kLogVarMax = 8.0;

/// Step- and channel-wise forecast. All fields are [..., 6, T].
struct ForecastDistribution {
    torch::Tensor trend;   // filtered trend
    torch::Tensor mu_res;  // filtered residual mean
    torch::Tensor logvar;  // residual log-variance

    torch::Tensor predictive_mean() const { return trend + mu_res; }
    torch::Tensor sigma() const { return torch::exp(logvar / 2.0); }

    /// trend + sampled residual.
    torch::Tensor sample(uint64_t seed) const;
};

/// mu + eps * exp(logvar / 2) with eps ~ N(0, I) drawn per element from `seed`.
torch::Tensor sample_residual(const torch::Tensor& mu, const torch::Tensor& logvar, uint64_t seed);

struct RevinStats {
    torch::Tensor mean;    // [B x C]
    torch::Tensor stddev;  // [B x C], sqrt(var + eps)
};

inline constexpr double kRevinEps = 1e-5;

/// Per-sample, per-channel normalization over the time axis of x [B x C x L]
/// using the biased variance. Channels with active[c] == false keep mean 0 / std 1.
std::pair<torch::Tensor, RevinStats> revin_norm(const torch::Tensor& x, const torch::Tensor& active = {});

/// Applies the inverse transform to representations z [B x C x N x D].
torch::Tensor revin_invert(const torch::Tensor& z, const RevinStats& stats);

/// Pre-norm transformer encoder over sequences [S x N x D].
class TransformerEncoderImpl : public torch::nn::Module {
public:
    TransformerEncoderImpl(int latent, const EncoderSpec& spec);
    torch::Tensor forward(torch::Tensor x);

private:
    struct Block {
        torch::nn::LayerNorm norm_attn{nullptr};
        torch::nn::Linear qkv{nullptr};
        torch::nn::Linear proj{nullptr};
        torch::nn::LayerNorm norm_ff{nullptr};
        torch::nn::Linear ff_in{nullptr};
        torch::nn::Linear ff_out{nullptr};
    };

    int heads_;
    std::vector<Block> blocks_;
    torch::nn::LayerNorm final_norm_{nullptr};
};
TORCH_MODULE(TransformerEncoder);

/// Patch embedding + positional encoding + transformer, applied channel-independently.
/// Input [B x C x L], output [B x C x N x D].
class PatchEncoderImpl : public torch::nn::Module {
public:
    PatchEncoderImpl(int history, int patch, int stride, int latent, const EncoderSpec& spec);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Linear embedding{nullptr};
    TransformerEncoder encoder{nullptr};

private:
    int patch_;
    int stride_;
    torch::Tensor positions_;
};
TORCH_MODULE(PatchEncoder);

/// Mixture of learnable spectral filters over inputs [B x C x L].
class FrequencyEnhancementImpl : public torch::nn::Module {
public:
    enum class Weighting { Gated, Uniform };

    FrequencyEnhancementImpl(int channels, int history, int experts, Weighting weighting);

    torch::Tensor forward(const torch::Tensor& x);

    /// Expert weights alpha [B x M] for the given inputs.
    torch::Tensor expert_weights(const torch::Tensor& x);

    /// Filters with externally supplied expert weights alpha [B x M].
    torch::Tensor forward_with_weights(const torch::Tensor& x, const torch::Tensor& alpha);

    int experts() const { return experts_; }

    torch::Tensor filter_weights;  // W_f [M x C x bins], softplus gives the gain
    torch::nn::Linear gate{nullptr};

private:
    void check_input(const torch::Tensor& x) const;

    int channels_;
    int history_;
    int experts_;
    Weighting weighting_;
};
TORCH_MODULE(FrequencyEnhancement);

struct RawHeads {
    torch::Tensor trend;   // [B x 6 x T], undefined without a trend head
    torch::Tensor mu;      // undefined without a residual head
    torch::Tensor logvar;  // clamped to [kLogVarMin, kLogVarMax]
};

/// Zeroes the actuation rows of x [B x 5n x L] and returns zeros in place of z_u.
/// Throws if the configuration does not mask the actuation signal.
std::pair<torch::Tensor, torch::Tensor> mask_for_pretraining(const ModelConfig& cfg, const torch::Tensor& x,
                                                             const torch::Tensor& z_u);

class FDNImpl : public torch::nn::Module {
public:
    explicit FDNImpl(ModelConfig cfg);

    /// x: normalized inputs [B x 5n x L].
    ForecastDistribution forward(const torch::Tensor& x);

    /// Final representation z [B x 6 x N x D].
    torch::Tensor encode(const torch::Tensor& x);

    RawHeads heads_forward(const torch::Tensor& z);

    /// Band filters on the raw head outputs; returns (trend, mu_res).
    std::pair<torch::Tensor, torch::Tensor> output_filter(const torch::Tensor& trend_raw,
                                                          const torch::Tensor& mu_raw) const;

    const ModelConfig& config() const { return cfg_; }

    /// Parameters excluded from training when the actuation path is masked.
    std::vector<torch::Tensor> actuation_parameters();

    /// Prefixes of the submodules carried over by transfer learning.
    static const std::vector<std::string>& transferable_prefixes();

    FrequencyEnhancement fef{nullptr};

private:
    ModelConfig cfg_;
    std::vector<PatchEncoder> encoders_;  // dq, qd, qdd, u; or one shared encoder
    torch::nn::Sequential q0_encoder_{nullptr};
    torch::nn::Linear channel_mix_{nullptr};
    torch::nn::Linear head_trend_{nullptr};
    torch::nn::Linear head_mu_{nullptr};
    torch::nn::Linear head_logvar_{nullptr};
    torch::Tensor active_channels_;
};
TORCH_MODULE(FDN);

struct LossParts {
    torch::Tensor total;
    torch::Tensor trend;
    torch::Tensor residual;
};

/// Mean over elements of 0.5 * ((target - mu)^2 / exp(logvar) + logvar).
torch::Tensor gaussian_nll(const torch::Tensor& target, const torch::Tensor& mu, const torch::Tensor& logvar);

/// Trend MSE + residual NLL on the filtered outputs. With an ablated head the
/// surviving head is scored against the full wrench. Throws std::runtime_error
/// naming the component when a loss term is non-finite.
LossParts loss(const ForecastDistribution& pred, const torch::Tensor& W_trend, const torch::Tensor& W_res,
               const AblationFlags& flags = {});

int64_t parameter_count(torch::nn::Module& module);

}  // namespace fdn::model
