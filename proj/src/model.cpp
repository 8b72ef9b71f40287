#include "fdn/model.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fdn::model {

namespace {

struct FlagEntry {
    const char* name;
    bool AblationFlags::*member;
};

constexpr FlagEntry kFlags[] = {
    {"no_fef", &AblationFlags::no_fef},
    {"no_fef_weights", &AblationFlags::no_fef_weights},
    {"no_fef_moe", &AblationFlags::no_fef_moe},
    {"no_fpf", &AblationFlags::no_fpf},
    {"shared_encoder", &AblationFlags::shared_encoder},
    {"no_trend_head", &AblationFlags::no_trend_head},
    {"no_res_head", &AblationFlags::no_res_head},
};

}  // namespace

AblationFlags AblationFlags::parse(const std::string& list)
{
    AblationFlags flags;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty() || item == "none")
            continue;
        bool found = false;
        for (const auto& f : kFlags) {
            if (item == f.name) {
                flags.*(f.member) = true;
                found = true;
            }
        }
        if (!found)
            throw std::invalid_argument("unknown ablation flag '" + item + "'");
    }
    return flags;
}

const std::vector<std::string>& AblationFlags::all_names()
{
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& f : kFlags)
            out.emplace_back(f.name);
        return out;
    }();
    return names;
}

AblationFlags AblationFlags::single(const std::string& name)
{
    return parse(name);
}

std::string AblationFlags::to_string() const
{
    std::string out;
    for (const auto& f : kFlags) {
        if (this->*(f.member))
            out += (out.empty() ? "" : ",") + std::string(f.name);
    }
    return out.empty() ? "none" : out;
}

void ModelConfig::validate() const
{
    auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
    if (dof < 1)
        fail("dof must be >= 1");
    if (patch < 1 || history < patch)
        fail("need 1 <= P <= L");
    if (stride != patch)
        fail("stride must equal patch length");
    if (horizon < 4)
        fail("horizon must be >= 4");
    if (latent < 1 || encoder.heads < 1 || latent % encoder.heads != 0)
        fail("latent width must be a multiple of the head count");
    if (encoder.layers < 0 || encoder.ffn_multiplier < 1)
        fail("bad encoder depth/width");
    if (experts < 1)
        fail("experts must be >= 1");
    if (ablation.no_trend_head && ablation.no_res_head)
        fail("cannot remove both heads");
    filter.validate();
}

bool ModelConfig::compatible_with(const ModelConfig& o) const
{
    return dof == o.dof && history == o.history && horizon == o.horizon && latent == o.latent && patch == o.patch &&
           stride == o.stride && experts == o.experts && filter.cutoff_hz == o.filter.cutoff_hz &&
           filter.denoise_cutoff_hz == o.filter.denoise_cutoff_hz && filter.order == o.filter.order &&
           filter.sample_rate == o.filter.sample_rate && ablation == o.ablation && encoder == o.encoder;
}

torch::Tensor sample_residual(const torch::Tensor& mu, const torch::Tensor& logvar, uint64_t seed)
{
    auto gen = at::detail::createCPUGenerator(seed);
    auto eps = torch::randn(mu.sizes(), gen, mu.options());
    return mu + eps * torch::exp(logvar / 2.0);
}

torch::Tensor ForecastDistribution::sample(uint64_t seed) const
{
    return trend + sample_residual(mu_res, logvar, seed);
}

std::pair<torch::Tensor, RevinStats> revin_norm(const torch::Tensor& x, const torch::Tensor& active)
{
    RevinStats stats;
    stats.mean = x.mean(-1);
    stats.stddev = torch::sqrt(x.var(-1, /*unbiased=*/false) + kRevinEps);
    if (active.defined()) {
        auto keep = active.to(torch::kBool);
        stats.mean = torch::where(keep, stats.mean, torch::zeros_like(stats.mean));
        stats.stddev = torch::where(keep, stats.stddev, torch::ones_like(stats.stddev));
    }
    auto normalized = (x - stats.mean.unsqueeze(-1)) / stats.stddev.unsqueeze(-1);
    return {normalized, stats};
}

torch::Tensor revin_invert(const torch::Tensor& z, const RevinStats& stats)
{
    return z * stats.stddev.unsqueeze(-1).unsqueeze(-1) + stats.mean.unsqueeze(-1).unsqueeze(-1);
}

TransformerEncoderImpl::TransformerEncoderImpl(int latent, const EncoderSpec& spec) : heads_(spec.heads)
{
    const int hidden = latent * spec.ffn_multiplier;
    for (int i = 0; i < spec.layers; ++i) {
        const auto tag = "layer" + std::to_string(i) + "_";
        Block b;
        b.norm_attn = register_module(tag + "norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({latent})));
        b.qkv = register_module(tag + "qkv", torch::nn::Linear(latent, 3 * latent));
        b.proj = register_module(tag + "proj", torch::nn::Linear(latent, latent));
        b.norm_ff = register_module(tag + "norm_ff", torch::nn::LayerNorm(torch::nn::LayerNormOptions({latent})));
        b.ff_in = register_module(tag + "ff_in", torch::nn::Linear(latent, hidden));
        b.ff_out = register_module(tag + "ff_out", torch::nn::Linear(hidden, latent));
        blocks_.push_back(b);
    }
    final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({latent})));
}

torch::Tensor TransformerEncoderImpl::forward(torch::Tensor x)
{
    const auto seqs = x.size(0);
    const auto tokens = x.size(1);
    const auto latent = x.size(2);
    const auto head_dim = latent / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (auto& b : blocks_) {
        auto qkv = b.qkv(b.norm_attn(x)).view({seqs, tokens, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
        auto attn = torch::softmax(torch::matmul(qkv[0], qkv[1].transpose(-2, -1)) * scale, -1);
        auto mixed = torch::matmul(attn, qkv[2]).permute({0, 2, 1, 3}).reshape({seqs, tokens, latent});
        x = x + b.proj(mixed);
        x = x + b.ff_out(torch::gelu(b.ff_in(b.norm_ff(x))));
    }
    return final_norm_(x);
}

PatchEncoderImpl::PatchEncoderImpl(int history, int patch, int stride, int latent, const EncoderSpec& spec)
    : patch_(patch), stride_(stride)
{
    embedding = register_module("embedding", torch::nn::Linear(patch, latent));
    encoder = register_module("encoder", TransformerEncoder(latent, spec));

    const int patches = (history - patch) / stride + 2;
    auto pos = torch::arange(patches, torch::kFloat64).unsqueeze(1);
    auto dim = torch::arange(0, latent, 2, torch::kFloat64);
    auto freq = torch::exp(-std::log(10000.0) * dim / static_cast<double>(latent));
    auto table = torch::zeros({patches, latent}, torch::kFloat64);
    table.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)},
                     torch::sin(pos * freq));
    table.index_put_({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)},
                     torch::cos(pos * freq).slice(1, 0, latent / 2));
    positions_ = register_buffer("positions", table.to(torch::kFloat32));
}

torch::Tensor PatchEncoderImpl::forward(const torch::Tensor& x)
{
    const auto batch = x.size(0);
    const auto channels = x.size(1);
    // Replicate the last step so that N = floor((L-P)/S) + 2 patches fit.
    auto padded = torch::cat({x, x.narrow(-1, x.size(-1) - 1, 1).expand({batch, channels, stride_})}, -1);
    auto patches = padded.unfold(-1, patch_, stride_);  // [B x C x N x P]
    auto tokens = embedding(patches) + positions_;
    const auto n = tokens.size(2);
    const auto d = tokens.size(3);
    auto encoded = encoder(tokens.reshape({batch * channels, n, d}));
    return encoded.view({batch, channels, n, d});
}

FrequencyEnhancementImpl::FrequencyEnhancementImpl(int channels, int history, int experts, Weighting weighting)
    : channels_(channels), history_(history), experts_(experts), weighting_(weighting)
{
    // softplus(log(e - 1)) = 1: every expert starts as the identity filter.
    const double identity = std::log(std::numbers::e - 1.0);
    filter_weights = register_parameter("filter_weights",
                                        torch::full({experts, channels, history / 2 + 1}, identity));
    if (weighting == Weighting::Gated) {
        gate = register_module("gate", torch::nn::Linear(torch::nn::LinearOptions(channels * history, experts).bias(false)));
        torch::NoGradGuard no_grad;
        gate->weight.zero_();
    }
}

void FrequencyEnhancementImpl::check_input(const torch::Tensor& x) const
{
    if (x.dim() != 3 || x.size(1) != channels_ || x.size(2) != history_)
        throw std::invalid_argument("fef: input must be [B x " + std::to_string(channels_) + " x " +
                                    std::to_string(history_) + "]");
}

torch::Tensor FrequencyEnhancementImpl::expert_weights(const torch::Tensor& x)
{
    check_input(x);
    const auto batch = x.size(0);
    if (weighting_ == Weighting::Uniform)
        return torch::full({batch, experts_}, 1.0 / experts_, x.options());
    return torch::softmax(gate(x.reshape({batch, channels_ * history_})), -1);
}

torch::Tensor FrequencyEnhancementImpl::forward_with_weights(const torch::Tensor& x, const torch::Tensor& alpha)
{
    check_input(x);
    if (alpha.size(-1) != experts_)
        throw std::invalid_argument("fef: expert weight count mismatch");
    auto spectrum = torch::fft::rfft(x, history_, -1);
    auto gains = torch::nn::functional::softplus(filter_weights);
    // Linear in the filter, so the weighted sum of expert outputs equals one
    // pass with the weighted sum of expert gains.
    auto combined = torch::einsum("bm,mcf->bcf", {alpha, gains});
    return torch::fft::irfft(spectrum * combined, history_, -1);
}

torch::Tensor FrequencyEnhancementImpl::forward(const torch::Tensor& x)
{
    return forward_with_weights(x, expert_weights(x));
}

std::pair<torch::Tensor, torch::Tensor> mask_for_pretraining(const ModelConfig& cfg, const torch::Tensor& x,
                                                             const torch::Tensor& z_u)
{
    if (!cfg.mask_u)
        throw std::logic_error("mask_for_pretraining: configuration does not mask the actuation signal");
    const int n = cfg.dof;
    auto keep = torch::ones({x.size(-2)}, x.options());
    keep.slice(0, 3 * n, 4 * n).zero_();
    auto masked_x = x * keep.unsqueeze(-1);
    return {masked_x, z_u.defined() ? torch::zeros_like(z_u) : z_u};
}

namespace {

const char* const kEncoderNames[4] = {"enc_dq", "enc_qd", "enc_qdd", "enc_u"};

}  // namespace

FDNImpl::FDNImpl(ModelConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    const int n = cfg_.dof;
    const int d = cfg_.latent;
    const auto& ab = cfg_.ablation;

    if (!ab.no_fef) {
        const auto weighting = (ab.no_fef_weights || ab.no_fef_moe) ? FrequencyEnhancementImpl::Weighting::Uniform
                                                                     : FrequencyEnhancementImpl::Weighting::Gated;
        fef = register_module("fef", FrequencyEnhancement(4 * n, cfg_.history, cfg_.effective_experts(), weighting));
    }

    if (ab.shared_encoder) {
        encoders_.push_back(register_module(
            "enc_shared", PatchEncoder(cfg_.history, cfg_.patch, cfg_.stride, d, cfg_.encoder)));
    } else {
        for (const char* name : kEncoderNames)
            encoders_.push_back(
                register_module(name, PatchEncoder(cfg_.history, cfg_.patch, cfg_.stride, d, cfg_.encoder)));
    }

    q0_encoder_ = register_module("q0_encoder", torch::nn::Sequential(torch::nn::Linear(n, d), torch::nn::GELU(),
                                                                      torch::nn::Linear(d, d)));
    channel_mix_ = register_module("channel_mix", torch::nn::Linear(4 * n, 6));

    const int flat = cfg_.num_patches() * d;
    if (!ab.no_trend_head)
        head_trend_ = register_module("head_trend", torch::nn::Linear(flat, cfg_.horizon));
    if (!ab.no_res_head) {
        head_mu_ = register_module("head_mu", torch::nn::Linear(flat, cfg_.horizon));
        head_logvar_ = register_module("head_logvar", torch::nn::Linear(flat, cfg_.horizon));
    }

    active_channels_ = torch::ones({4 * n}, torch::kBool);
    if (cfg_.mask_u) {
        active_channels_.slice(0, 3 * n, 4 * n).fill_(false);
        for (auto& p : actuation_parameters())
            p.requires_grad_(false);
    }
}

std::vector<torch::Tensor> FDNImpl::actuation_parameters()
{
    if (cfg_.ablation.shared_encoder)
        return {};
    return encoders_[3]->parameters();
}

const std::vector<std::string>& FDNImpl::transferable_prefixes()
{
    static const std::vector<std::string> prefixes = {"enc_dq.", "enc_qd.", "enc_qdd.", "q0_encoder."};
    return prefixes;
}

torch::Tensor FDNImpl::encode(const torch::Tensor& x_in)
{
    const int n = cfg_.dof;
    if (x_in.dim() != 3 || x_in.size(1) != 5 * n || x_in.size(2) != cfg_.history)
        throw std::invalid_argument("fdn: input must be [B x " + std::to_string(5 * n) + " x " +
                                    std::to_string(cfg_.history) + "]");
    auto x = x_in;
    if (cfg_.mask_u)
        x = mask_for_pretraining(cfg_, x, {}).first;

    auto x_delta = x.narrow(1, 0, 4 * n);
    auto q0 = x.select(2, cfg_.history - 1).narrow(1, 4 * n, n);

    auto [normalized, stats] = revin_norm(x_delta, active_channels_);
    auto enhanced = fef ? fef(normalized) : normalized;

    std::vector<torch::Tensor> parts;
    if (cfg_.ablation.shared_encoder) {
        auto z = revin_invert(encoders_[0](enhanced), stats);
        parts = z.split(n, 1);
        if (cfg_.mask_u)
            parts[3] = mask_for_pretraining(cfg_, x, parts[3]).second;
    } else {
        for (int m = 0; m < 4; ++m) {
            RevinStats sub{stats.mean.narrow(1, m * n, n), stats.stddev.narrow(1, m * n, n)};
            if (m == 3 && cfg_.mask_u) {
                const auto batch = x.size(0);
                auto zeros = torch::zeros({batch, n, cfg_.num_patches(), cfg_.latent}, x.options());
                parts.push_back(mask_for_pretraining(cfg_, x, zeros).second);
                continue;
            }
            parts.push_back(revin_invert(encoders_[static_cast<size_t>(m)](enhanced.narrow(1, m * n, n)), sub));
        }
    }
    parts[0] = parts[0] + q0_encoder_->forward(q0).unsqueeze(1).unsqueeze(1);

    auto joined = torch::cat(parts, 1);                            // [B x 4n x N x D]
    return channel_mix_(joined.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});  // [B x 6 x N x D]
}

RawHeads FDNImpl::heads_forward(const torch::Tensor& z)
{
    auto flat = z.flatten(2);  // [B x 6 x N*D]
    RawHeads out;
    if (head_trend_)
        out.trend = head_trend_(flat);
    if (head_mu_) {
        out.mu = head_mu_(flat);
        out.logvar = head_logvar_(flat).clamp(kLogVarMin, kLogVarMax);
    }
    return out;
}

std::pair<torch::Tensor, torch::Tensor> FDNImpl::output_filter(const torch::Tensor& trend_raw,
                                                               const torch::Tensor& mu_raw) const
{
    const auto& ab = cfg_.ablation;
    if (ab.no_fpf)
        return {trend_raw, mu_raw};
    const auto wide = cfg_.filter.with_cutoff(cfg_.filter.denoise_cutoff_hz);
    torch::Tensor trend, mu;
    if (trend_raw.defined())
        trend = spectral::lowpass(trend_raw, ab.no_res_head ? wide : cfg_.filter);
    if (mu_raw.defined())
        mu = ab.no_trend_head ? spectral::lowpass(mu_raw, wide) : spectral::highpass(mu_raw, cfg_.filter);
    return {trend, mu};
}

ForecastDistribution FDNImpl::forward(const torch::Tensor& x)
{
    auto raw = heads_forward(encode(x));
    auto [trend, mu] = output_filter(raw.trend, raw.mu);
    ForecastDistribution out;
    if (cfg_.ablation.no_trend_head) {
        out.mu_res = mu;
        out.logvar = raw.logvar;
        out.trend = torch::zeros_like(mu);
    } else if (cfg_.ablation.no_res_head) {
        out.trend = trend;
        out.mu_res = torch::zeros_like(trend);
        out.logvar = torch::full_like(trend, kDegenerateLogVar);
    } else {
        out.trend = trend;
        out.mu_res = mu;
        out.logvar = raw.logvar;
    }
    return out;
}

torch::Tensor gaussian_nll(const torch::Tensor& target, const torch::Tensor& mu, const torch::Tensor& logvar)
{
    return (0.5 * ((target - mu).pow(2) * torch::exp(-logvar) + logvar)).mean();
}

LossParts loss(const ForecastDistribution& pred, const torch::Tensor& W_trend, const torch::Tensor& W_res,
               const AblationFlags& flags)
{
    if (pred.trend.sizes() != W_trend.sizes() || pred.mu_res.sizes() != W_res.sizes())
        throw std::invalid_argument("loss: prediction and target shapes differ");
    LossParts parts;
    auto zero = torch::zeros({}, W_trend.options());
    if (flags.no_trend_head) {
        parts.trend = zero;
        parts.residual = gaussian_nll(W_trend + W_res, pred.mu_res, pred.logvar);
    } else if (flags.no_res_head) {
        parts.trend = (W_trend + W_res - pred.trend).pow(2).mean();
        parts.residual = zero;
    } else {
        parts.trend = (W_trend - pred.trend).pow(2).mean();
        parts.residual = gaussian_nll(W_res, pred.mu_res, pred.logvar);
    }
    if (!std::isfinite(parts.trend.item<double>()))
        throw std::runtime_error("loss: non-finite trend component");
    if (!std::isfinite(parts.residual.item<double>()))
        throw std::runtime_error("loss: non-finite residual component");
    parts.total = parts.trend + parts.residual;
    return parts;
}

int64_t parameter_count(torch::nn::Module& module)
{
    int64_t count = 0;
    for (const auto& p : module.parameters())
        count += p.numel();
    return count;
}

}  // namespace fdn::model
