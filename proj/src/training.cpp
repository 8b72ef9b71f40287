#include "fdn/training.hpp"

#include "fdn/log.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fdn::training {

using dataset::Batch;
using dataset::NormStats;
using dataset::WindowSet;

void TrainConfig::validate() const
{
    if (batch_size < 1)
        throw std::invalid_argument("train config: batch size must be >= 1");
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("train config: learning rate must be positive");
    if (epochs < 0 || max_steps < 0)
        throw std::invalid_argument("train config: negative epoch or step budget");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0))
        throw std::invalid_argument("train config: data fraction must be in (0, 1]");
}

namespace {

double gradient_norm(const std::vector<torch::Tensor>& params)
{
    double sq = 0.0;
    for (const auto& p : params)
        if (p.grad().defined())
            sq += p.grad().pow(2).sum().item<double>();
    return std::sqrt(sq);
}

}  // namespace

TrainResult optimize(const std::vector<torch::Tensor>& params, const WindowSet& data, const TrainConfig& cfg,
                     const LossFn& loss_fn)
{
    cfg.validate();
    TrainResult result;
    if (data.size() == 0)
        throw std::invalid_argument("train: no training windows");

    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> pool(data.size());
    std::iota(pool.begin(), pool.end(), size_t{0});
    if (cfg.data_fraction < 1.0) {
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.data_fraction * pool.size()))));
    }
    const auto per_epoch = static_cast<int64_t>((pool.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int64_t budget = cfg.max_steps > 0 ? cfg.max_steps : per_epoch * cfg.epochs;
    if (budget == 0 || params.empty())
        return result;

    torch::optim::Adam optimizer(params, torch::optim::AdamOptions(cfg.learning_rate).betas({0.9, 0.999}).eps(1e-8));

    std::ofstream log;
    if (!cfg.metrics_log.empty()) {
        const bool fresh = !std::filesystem::exists(cfg.metrics_log);
        log.open(cfg.metrics_log, std::ios::app);
        if (!log)
            throw std::runtime_error("cannot open metrics log " + cfg.metrics_log.string());
        log.precision(10);
        if (fresh)
            log << "step,total,trend,residual,wall_time\n";
    }

    const auto start = std::chrono::steady_clock::now();
    size_t cursor = pool.size();
    std::vector<size_t> ids;
    while (result.steps < budget) {
        if (cursor >= pool.size()) {
            std::shuffle(pool.begin(), pool.end(), rng);
            cursor = 0;
        }
        const size_t end = std::min(pool.size(), cursor + static_cast<size_t>(cfg.batch_size));
        ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(cursor), pool.begin() + static_cast<std::ptrdiff_t>(end));
        cursor = end;

        optimizer.zero_grad();
        model::LossParts parts;
        try {
            parts = loss_fn(data.batch(ids));
        } catch (const std::runtime_error& err) {
            result.aborted = true;
            result.abort_reason = "step " + std::to_string(result.steps + 1) + ": " + err.what();
            log::warn("training stopped: " + result.abort_reason);
            break;
        }
        parts.total.backward();
        const double norm = cfg.clip_norm > 0.0 ? torch::nn::utils::clip_grad_norm_(params, cfg.clip_norm)
                                                : gradient_norm(params);
        if (!std::isfinite(norm)) {
            result.aborted = true;
            result.abort_reason = "step " + std::to_string(result.steps + 1) + ": non-finite gradient";
            log::warn("training stopped: " + result.abort_reason);
            break;
        }
        optimizer.step();
        ++result.steps;

        StepRecord rec;
        rec.step = result.steps;
        rec.total = parts.total.item<double>();
        rec.trend = parts.trend.item<double>();
        rec.residual = parts.residual.item<double>();
        rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.push_back(rec);
        if (log)
            log << rec.step << ',' << rec.total << ',' << rec.trend << ',' << rec.residual << ',' << rec.wall_s
                << '\n';
    }
    return result;
}

model::LossParts fdn_loss(model::FDN& net, const Batch& batch, const NormStats& stats)
{
    const auto dtype = net->parameters().front().scalar_type();
    auto x = dataset::apply_norm(batch.x, stats).to(dtype);
    auto trend = dataset::normalize_wrench(batch.W_trend, stats).to(dtype);
    auto res = (batch.W_res / stats.w_std.to(batch.W_res.scalar_type()).unsqueeze(1)).to(dtype);
    return model::loss(net->forward(x), trend, res, net->config().ablation);
}

double mean_loss(model::FDN& net, const WindowSet& data, const NormStats& stats, int batch_size)
{
    torch::NoGradGuard no_grad;
    double sum = 0.0;
    std::vector<size_t> ids;
    for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch_size)) {
        ids.clear();
        for (size_t i = start; i < std::min(data.size(), start + static_cast<size_t>(batch_size)); ++i)
            ids.push_back(i);
        sum += fdn_loss(net, data.batch(ids), stats).total.item<double>() * static_cast<double>(ids.size());
    }
    return sum / static_cast<double>(data.size());
}

model::FDN make_fdn(const model::ModelConfig& cfg, uint64_t seed)
{
    torch::manual_seed(seed);
    return model::FDN(cfg);
}

baselines::Baseline make_baseline(const baselines::BaselineConfig& cfg, uint64_t seed)
{
    torch::manual_seed(seed);
    return baselines::Baseline(cfg);
}

std::vector<torch::Tensor> trainable(torch::nn::Module& module)
{
    std::vector<torch::Tensor> out;
    for (const auto& p : module.parameters())
        if (p.requires_grad())
            out.push_back(p);
    return out;
}

TrainResult train(model::FDN& net, const WindowSet& data, const NormStats& stats, const TrainConfig& cfg)
{
    net->train();
    auto result = optimize(trainable(*net), data, cfg, [&](const Batch& b) { return fdn_loss(net, b, stats); });
    net->eval();
    return result;
}

TrainResult train(baselines::Baseline& net, const WindowSet& data, const NormStats& stats, const TrainConfig& cfg)
{
    net->train();
    auto result = optimize(trainable(*net), data, cfg, [&](const Batch& b) { return net->loss(b, stats); });
    net->eval();
    return result;
}

std::vector<bool> actuation_rows(int dof)
{
    std::vector<bool> rows(static_cast<size_t>(5 * dof), false);
    for (int j = 3 * dof; j < 4 * dof; ++j)
        rows[static_cast<size_t>(j)] = true;
    return rows;
}

dataset::SynthConfig surrogate_synth_config()
{
    dataset::SynthConfig c;
    c.duration_s = 60.0;
    c.trend_gain = 1.0;
    c.residual_force_n = 4.0;
    c.residual_torque_nm = 1.2;
    return c;
}

std::vector<dataset::Episode> surrogate_corpus(const CorpusConfig& cfg)
{
    if (cfg.episodes < 1)
        throw std::invalid_argument("surrogate corpus: need at least one episode");
    std::vector<dataset::Episode> out;
    for (int i = 0; i < cfg.episodes; ++i) {
        auto synth = cfg.synth;
        synth.dof = (i % 2 == 0) ? 7 : 6;
        auto raw = dataset::synth_episode(synth, cfg.seed * 1000003ULL + static_cast<uint64_t>(i));
        raw.name = "surrogate_" + std::to_string(i);
        raw.session = "surrogate";
        out.push_back(dataset::pad_dof(dataset::preprocess_episode(raw, synth.filter), 7));
    }
    return out;
}

Trained pretrain(const std::vector<dataset::Episode>& corpus, const PretrainConfig& cfg)
{
    if (corpus.empty())
        throw std::invalid_argument("pretrain: surrogate corpus is empty");
    auto mcfg = cfg.model;
    mcfg.dof = 7;
    mcfg.mask_u = true;
    WindowSet windows(mcfg.history, mcfg.horizon, mcfg.filter);
    for (const auto& e : corpus) {
        if (e.dof() != 7)
            throw std::invalid_argument("pretrain: corpus episodes must use the 7-DoF layout");
        windows.add_episode(e, cfg.window_stride);
    }
    Trained out;
    out.stats = dataset::fit_norm(windows, actuation_rows(7));
    out.model = make_fdn(mcfg, cfg.train.seed);
    auto tcfg = cfg.train;
    tcfg.stage = Stage::Pretrain;
    out.result = train(out.model, windows, out.stats, tcfg);
    return out;
}

NormStats merge_transfer_stats(const NormStats& pre, const NormStats& down)
{
    if (pre.dof() != down.dof())
        throw std::invalid_argument("transfer: pretraining and downstream layouts differ");
    const int n = pre.dof();
    NormStats out;
    out.x_mean = pre.x_mean.clone();
    out.x_std = pre.x_std.clone();
    out.x_mean.slice(0, 3 * n, 4 * n).copy_(down.x_mean.slice(0, 3 * n, 4 * n));
    out.x_std.slice(0, 3 * n, 4 * n).copy_(down.x_std.slice(0, 3 * n, 4 * n));
    out.abs_q_mean = pre.abs_q_mean.clone();
    out.abs_q_std = pre.abs_q_std.clone();
    out.w_mean = down.w_mean.clone();
    out.w_std = down.w_std.clone();
    return out;
}

TransferResult transfer(const std::filesystem::path& pretrained_dir, const WindowSet& downstream,
                        const TransferConfig& cfg)
{
    const auto manifest = checkpoint::read_manifest(pretrained_dir);
    if (manifest.kind != "fdn" || manifest.stage != Stage::Pretrain)
        throw std::runtime_error("transfer: " + pretrained_dir.string() + " is not a pretraining checkpoint (stage " +
                                 checkpoint::to_string(manifest.stage) + ")");
    if (downstream.input_rows() != 5 * manifest.model.dof)
        throw std::invalid_argument("transfer: downstream windows must use the " +
                                    std::to_string(manifest.model.dof) + "-DoF layout");

    model::FDN source(manifest.model);
    checkpoint::load_fdn(pretrained_dir, source, manifest);

    auto mcfg = manifest.model;
    mcfg.mask_u = false;
    TransferResult out;
    out.model = make_fdn(mcfg, cfg.seed);
    const auto& prefixes = model::FDNImpl::transferable_prefixes();
    checkpoint::copy_parameters(*source, *out.model, prefixes);
    out.stats = merge_transfer_stats(manifest.stats, dataset::fit_norm(downstream));

    std::vector<torch::Tensor> probe_params;
    for (auto& item : out.model->named_parameters()) {
        bool transferred = false;
        for (const auto& p : prefixes)
            transferred = transferred || item.key().rfind(p, 0) == 0;
        if (!transferred)
            probe_params.push_back(item.value());
    }
    out.frozen_hash_before = checkpoint::parameter_hash(*out.model, prefixes);
    auto probe_cfg = cfg.probe;
    probe_cfg.stage = Stage::LinearProbe;
    out.model->train();
    out.probe = optimize(probe_params, downstream, probe_cfg,
                         [&](const Batch& b) { return fdn_loss(out.model, b, out.stats); });
    out.frozen_hash_after_probe = checkpoint::parameter_hash(*out.model, prefixes);

    if (cfg.run_fine_tune) {
        auto fine_cfg = cfg.fine_tune;
        fine_cfg.stage = Stage::FineTune;
        out.fine_tune = optimize(out.model->parameters(), downstream, fine_cfg,
                                 [&](const Batch& b) { return fdn_loss(out.model, b, out.stats); });
    }
    out.model->eval();
    return out;
}

}  // namespace fdn::training
