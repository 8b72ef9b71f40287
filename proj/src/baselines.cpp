#include "fdn/baselines.hpp"

#include <stdexcept>

namespace fdn::baselines {

std::string to_string(BaselineKind kind)
{
    switch (kind) {
    case BaselineKind::PointMlp:
        return "point_mlp";
    case BaselineKind::Seq2SeqPatch:
        return "seq2seq_patch";
    case BaselineKind::Seq2SeqPatchGaussian:
        return "seq2seq_patch_gaussian";
    }
    throw std::logic_error("unreachable baseline kind");
}

BaselineKind parse_baseline(const std::string& name)
{
    for (auto kind : {BaselineKind::PointMlp, BaselineKind::Seq2SeqPatch, BaselineKind::Seq2SeqPatchGaussian})
        if (to_string(kind) == name)
            return kind;
    throw std::invalid_argument("unknown baseline '" + name +
                                "' (expected point_mlp, seq2seq_patch or seq2seq_patch_gaussian)");
}

BaselineConfig BaselineConfig::matching(BaselineKind kind, const model::ModelConfig& m)
{
    BaselineConfig c;
    c.kind = kind;
    c.dof = m.dof;
    c.history = m.history;
    c.horizon = m.horizon;
    c.latent = m.latent;
    c.patch = m.patch;
    c.stride = m.stride;
    c.encoder = m.encoder;
    return c;
}

void BaselineConfig::validate() const
{
    if (dof < 1 || history < patch || patch < 1 || stride != patch || horizon < 1)
        throw std::invalid_argument("baseline config: bad window/patch geometry");
    if (latent < 1 || encoder.heads < 1 || latent % encoder.heads != 0)
        throw std::invalid_argument("baseline config: latent width must be a multiple of the head count");
    if (mlp_width < 1 || mlp_depth < 1)
        throw std::invalid_argument("baseline config: bad MLP shape");
}

PointMLPImpl::PointMLPImpl(int dof, int width, int depth)
{
    layers = register_module("layers", torch::nn::Sequential());
    int in = 4 * dof;
    for (int i = 0; i + 1 < depth; ++i) {
        layers->push_back(torch::nn::Linear(in, width));
        layers->push_back(torch::nn::GELU());
        in = width;
    }
    output = register_module("output", torch::nn::Linear(in, 6));
}

torch::Tensor PointMLPImpl::forward(const torch::Tensor& x)
{
    return output(layers->is_empty() ? x : layers->forward(x));
}

PatchForecasterImpl::PatchForecasterImpl(const BaselineConfig& cfg) : dof_(cfg.dof)
{
    encoder_ = register_module(
        "encoder", model::PatchEncoder(cfg.history, cfg.patch, cfg.stride, cfg.latent, cfg.encoder));
    channel_mix_ = register_module("channel_mix", torch::nn::Linear(4 * cfg.dof, 6));
    const int flat = cfg.num_patches() * cfg.latent;
    head_mu_ = register_module("head_mu", torch::nn::Linear(flat, cfg.horizon));
    if (cfg.distributional())
        head_logvar_ = register_module("head_logvar", torch::nn::Linear(flat, cfg.horizon));
}

SequenceForecast PatchForecasterImpl::forward(const torch::Tensor& x)
{
    if (x.dim() != 3 || x.size(1) != 4 * dof_)
        throw std::invalid_argument("seq2seq baseline: input must be [B x " + std::to_string(4 * dof_) + " x L]");
    auto [normalized, stats] = model::revin_norm(x);
    auto z = model::revin_invert(encoder_(normalized), stats);                // [B x 4n x N x D]
    auto mixed = channel_mix_(z.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});  // [B x 6 x N x D]
    auto flat = mixed.flatten(2);
    SequenceForecast out;
    out.mu = head_mu_(flat);
    if (head_logvar_)
        out.logvar = head_logvar_(flat).clamp(model::kLogVarMin, model::kLogVarMax);
    return out;
}

BaselineImpl::BaselineImpl(BaselineConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    if (cfg_.pointwise())
        mlp_ = register_module("mlp", PointMLP(cfg_.dof, cfg_.mlp_width, cfg_.mlp_depth));
    else
        seq_ = register_module("seq", PatchForecaster(cfg_));
}

torch::Tensor BaselineImpl::point(const torch::Tensor& x)
{
    if (!mlp_)
        throw std::logic_error("point estimate requested from a sequence baseline");
    if (x.size(-1) != 4 * cfg_.dof)
        throw std::invalid_argument("point_mlp: input must have " + std::to_string(4 * cfg_.dof) + " features");
    return mlp_(x);
}

SequenceForecast BaselineImpl::sequence(const torch::Tensor& x)
{
    if (!seq_)
        throw std::logic_error("sequence forecast requested from point_mlp");
    return seq_(x);
}

model::LossParts BaselineImpl::loss(const dataset::Batch& batch, const dataset::NormStats& stats)
{
    const auto dtype = parameters().front().scalar_type();
    auto inputs = dataset::absolute_inputs(batch.x, stats).to(dtype);
    model::LossParts parts;
    if (mlp_) {
        auto target = dataset::normalize_wrench(batch.W_now.unsqueeze(-1), stats).squeeze(-1).to(dtype);
        parts.trend = (point(inputs.select(-1, inputs.size(-1) - 1)) - target).pow(2).mean();
        parts.residual = torch::zeros({}, parts.trend.options());
    } else {
        auto target = dataset::normalize_wrench(batch.W_future, stats).to(dtype);
        auto pred = sequence(inputs);
        if (pred.logvar.defined()) {
            parts.residual = model::gaussian_nll(target, pred.mu, pred.logvar);
            parts.trend = torch::zeros({}, parts.residual.options());
        } else {
            parts.trend = (pred.mu - target).pow(2).mean();
            parts.residual = torch::zeros({}, parts.trend.options());
        }
    }
    if (!std::isfinite(parts.trend.item<double>()) || !std::isfinite(parts.residual.item<double>()))
        throw std::runtime_error("baseline loss: non-finite value");
    parts.total = parts.trend + parts.residual;
    return parts;
}

}  // namespace fdn::baselines
