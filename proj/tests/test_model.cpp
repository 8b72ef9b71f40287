#include "fdn/model.hpp"
#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace fdn::model;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

double max_abs(const torch::Tensor& x)
{
    return x.abs().max().item<double>();
}

torch::Tensor& param(torch::nn::Module& m, const std::string& name)
{
    auto params = m.named_parameters();
    REQUIRE(params.contains(name));
    return params[name];
}

ModelConfig small_config()
{
    ModelConfig cfg;
    cfg.latent = 16;
    cfg.experts = 4;
    cfg.encoder = {1, 2, 2};
    return cfg;
}

}  // namespace

TEST_CASE("ablation flag parsing")
{
    auto f = AblationFlags::parse("no_fef,no_res_head");
    CHECK(f.no_fef);
    CHECK(f.no_res_head);
    CHECK_FALSE(f.no_fpf);
    CHECK(f.to_string() == "no_fef,no_res_head");
    CHECK(AblationFlags::parse(f.to_string()) == f);
    CHECK(AblationFlags::parse("none") == AblationFlags{});
    CHECK(AblationFlags{}.to_string() == "none");
    CHECK(AblationFlags::all_names().size() == 7);
    for (const auto& name : AblationFlags::all_names())
        CHECK(AblationFlags::single(name).to_string() == name);
    CHECK_THROWS_AS(AblationFlags::parse("no_such_flag"), std::invalid_argument);
}

TEST_CASE("model configuration checks")
{
    ModelConfig cfg;
    CHECK(cfg.num_patches() == 5);
    CHECK(cfg.bins() == 51);
    CHECK_NOTHROW(cfg.validate());

    auto bad = cfg;
    bad.stride = 12;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.ablation.no_res_head = bad.ablation.no_trend_head = true;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.latent = 100;  // not divisible by 8 heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    auto masked = cfg;
    masked.mask_u = true;
    CHECK(cfg.compatible_with(masked));
    masked.latent = 64;
    CHECK_FALSE(cfg.compatible_with(masked));

    auto single = cfg;
    single.ablation.no_fef_moe = true;
    CHECK(single.effective_experts() == 1);
}

TEST_CASE("default architecture shapes")
{
    torch::manual_seed(0);
    FDN model(ModelConfig{});
    auto x = torch::randn({2, 30, 100});
    auto z = model->encode(x);
    CHECK(z.sizes() == torch::IntArrayRef{2, 6, 5, 128});
    CHECK(param(*model, "head_trend.weight").sizes() == torch::IntArrayRef{100, 640});
    CHECK(param(*model, "fef.filter_weights").sizes() == torch::IntArrayRef{32, 24, 51});
    CHECK(param(*model, "fef.gate.weight").sizes() == torch::IntArrayRef{32, 2400});

    auto out = model->forward(x);
    for (const auto& t : {out.trend, out.mu_res, out.logvar})
        CHECK(t.sizes() == torch::IntArrayRef{2, 6, 100});
    CHECK(torch::equal(out.predictive_mean(), out.trend + out.mu_res));
    CHECK(torch::isfinite(out.sigma()).all().item<bool>());
    CHECK((out.sigma() > 0).all().item<bool>());
    CHECK_THROWS_AS(model->encode(torch::randn({2, 30, 50})), std::invalid_argument);
}

TEST_CASE("frequency enhancement with unit gains is the identity")
{
    torch::manual_seed(1);
    FrequencyEnhancement fef(4, 20, 3, FrequencyEnhancementImpl::Weighting::Gated);
    {
        torch::NoGradGuard g;
        fef->gate->weight.normal_();  // any gate
    }
    auto x = torch::randn({5, 4, 20});
    CHECK(max_abs(fef(x) - x) < 1e-6);
}

TEST_CASE("frequency enhancement with gains of two doubles the input")
{
    FrequencyEnhancement fef(3, 17, 2, FrequencyEnhancementImpl::Weighting::Gated);
    {
        torch::NoGradGuard g;
        fef->filter_weights.fill_(std::log(std::exp(2.0) - 1.0));
        fef->gate->weight.uniform_(-1.0, 1.0);
    }
    auto x = torch::randn({2, 3, 17});
    CHECK(max_abs(fef(x) - 2.0 * x) < 1e-6);
}

TEST_CASE("frequency enhancement mixes experts convexly")
{
    torch::manual_seed(2);
    FrequencyEnhancement fef(2, 16, 3, FrequencyEnhancementImpl::Weighting::Gated);
    fef->to(torch::kFloat64);
    {
        torch::NoGradGuard g;
        fef->filter_weights.normal_();
    }
    auto x = torch::randn({1, 2, 16}, kF64);
    auto alpha = torch::tensor({{0.2, 0.3, 0.5}}, kF64);
    auto mixed = fef->forward_with_weights(x, alpha);

    // one expert at a time, written out per bin
    auto spectrum = torch::fft::rfft(x, 16, -1);
    auto expected = torch::zeros_like(x);
    const double weights[3] = {0.2, 0.3, 0.5};
    for (int m = 0; m < 3; ++m) {
        auto gains = torch::log1p(torch::exp(fef->filter_weights[m].detach()));
        expected += weights[m] * torch::fft::irfft(spectrum * gains, 16, -1);
    }
    CHECK(max_abs(mixed - expected) < 1e-8);

    auto softplus = torch::nn::functional::softplus(fef->filter_weights);
    CHECK((softplus > 0).all().item<bool>());
    auto gate_alpha = fef->expert_weights(torch::randn({4, 2, 16}, kF64));
    CHECK((gate_alpha >= 0).all().item<bool>());
    CHECK(max_abs(gate_alpha.sum(-1) - 1.0) < 1e-12);

    CHECK_THROWS_AS(fef(torch::randn({1, 3, 16}, kF64)), std::invalid_argument);
    CHECK_THROWS_AS(fef->forward_with_weights(x, torch::ones({1, 2}, kF64)), std::invalid_argument);
}

TEST_CASE("single-expert enhancement reduces to one filter")
{
    torch::manual_seed(3);
    auto cfg = small_config();
    cfg.dof = 2;
    cfg.ablation.no_fef_moe = true;
    FDN model(cfg);
    REQUIRE(model->fef->experts() == 1);
    model->to(torch::kFloat64);
    {
        torch::NoGradGuard g;
        model->fef->filter_weights.normal_();
    }
    auto x = torch::randn({3, 8, 100}, kF64);
    auto alpha = model->fef->expert_weights(x);
    CHECK(torch::equal(alpha, torch::ones_like(alpha)));
    auto gains = torch::log1p(torch::exp(model->fef->filter_weights[0].detach()));
    auto hand = torch::fft::irfft(torch::fft::rfft(x, 100, -1) * gains, 100, -1);
    CHECK(max_abs(model->fef(x) - hand) < 1e-12);
}

TEST_CASE("instance normalization")
{
    torch::manual_seed(4);
    auto x = torch::randn({3, 5, 100}, kF64) * 10.0 + 4.0;
    auto [xn, stats] = revin_norm(x);
    CHECK(max_abs(xn.mean(-1)) < 1e-6);
    CHECK(max_abs(xn.std(-1, false) - 1.0) < 1e-6);

    // with unit-scale data the epsilon shows up exactly as sqrt(var / (var + eps))
    auto u = torch::randn({2, 4, 64}, kF64);
    auto [un, ustats] = revin_norm(u);
    auto var = u.var(-1, false);
    CHECK(max_abs(un.std(-1, false) - torch::sqrt(var / (var + kRevinEps))) < 1e-12);

    // identity representation path: one feature per step
    auto back = revin_invert(xn.unsqueeze(-1), stats).squeeze(-1);
    CHECK(max_abs(back - x) < 1e-6);

    auto c = torch::full({1, 2, 30}, 7.0, kF64);
    auto [cn, cstats] = revin_norm(c);
    CHECK(max_abs(cn) == 0.0);
    CHECK(max_abs(revin_invert(cn.unsqueeze(-1), cstats).squeeze(-1) - c) < 1e-12);

    auto active = torch::tensor({true, false, true, true, false});
    auto [mn, mstats] = revin_norm(x, active);
    CHECK(torch::equal(mn.select(1, 1), x.select(1, 1)));
    CHECK(mstats.stddev.select(1, 4).eq(1.0).all().item<bool>());
}

TEST_CASE("actuation masking")
{
    torch::manual_seed(5);
    auto cfg = small_config();
    cfg.dof = 7;
    cfg.mask_u = true;
    FDN model(cfg);
    auto x = torch::randn({2, 35, 100});
    auto y = x.clone();
    y.slice(1, 21, 28) = torch::randn({2, 7, 100}) * 50.0;
    CHECK(torch::equal(model->encode(x), model->encode(y)));
    auto a = model->forward(x);
    auto b = model->forward(y);
    CHECK(torch::equal(a.trend, b.trend));
    CHECK(torch::equal(a.logvar, b.logvar));

    auto target = torch::randn({2, 6, 100});
    auto la = loss(a, target, target).total.item<double>();
    auto lb = loss(b, target, target).total.item<double>();
    CHECK(la == lb);

    for (auto& p : model->actuation_parameters())
        CHECK_FALSE(p.requires_grad());
    CHECK_FALSE(model->actuation_parameters().empty());
    loss(model->forward(x), target, target).total.backward();
    for (auto& p : model->actuation_parameters())
        CHECK_FALSE(p.grad().defined());

    auto masked = mask_for_pretraining(cfg, x, torch::ones({2, 7, 5, 16}));
    CHECK(max_abs(masked.first.slice(1, 21, 28)) == 0.0);
    CHECK(torch::equal(masked.first.slice(1, 0, 21), x.slice(1, 0, 21)));
    CHECK(max_abs(masked.second) == 0.0);

    auto plain = cfg;
    plain.mask_u = false;
    CHECK_THROWS_AS(mask_for_pretraining(plain, x, {}), std::logic_error);
}

TEST_CASE("shared encoder has fewer parameters")
{
    auto cfg = small_config();
    FDN full(cfg);
    cfg.ablation.shared_encoder = true;
    FDN shared(cfg);
    CHECK(parameter_count(*shared) < parameter_count(*full));
    CHECK(shared->named_parameters().contains("enc_shared.embedding.weight"));
    CHECK_FALSE(shared->named_parameters().contains("enc_u.embedding.weight"));
}

TEST_CASE("parameter counts follow the architecture")
{
    auto cfg = small_config();
    cfg.dof = 2;
    FDN model(cfg);
    const int64_t d = cfg.latent, n = cfg.dof, L = cfg.history, T = cfg.horizon, P = cfg.patch;
    const int64_t M = cfg.experts, N = cfg.num_patches(), hidden = d * cfg.encoder.ffn_multiplier;
    const int64_t block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    const int64_t encoder = (P * d + d) + cfg.encoder.layers * block + 2 * d;
    const int64_t fef = M * 4 * n * (L / 2 + 1) + 4 * n * L * M;
    const int64_t q0 = (n * d + d) + (d * d + d);
    const int64_t mix = 4 * n * 6 + 6;
    const int64_t heads = 3 * (N * d * T + T);
    CHECK(parameter_count(*model) == fef + 4 * encoder + q0 + mix + heads);
}

TEST_CASE("heads are affine and channel-separable")
{
    torch::manual_seed(6);
    auto cfg = small_config();
    FDN model(cfg);
    {
        torch::NoGradGuard g;
        for (const char* b : {"head_trend.bias", "head_mu.bias", "head_logvar.bias"})
            param(*model, b).zero_();
    }
    auto zero = torch::zeros({1, 6, 5, 16});
    auto out = model->heads_forward(zero);
    CHECK(max_abs(out.trend) == 0.0);
    CHECK(max_abs(out.mu) == 0.0);
    CHECK(max_abs(out.logvar) == 0.0);

    auto z = torch::randn({1, 6, 5, 16});
    auto z2 = z.clone();
    z2[0][3] += torch::randn({5, 16});
    auto a = model->heads_forward(z);
    auto b = model->heads_forward(z2);
    for (int c = 0; c < 6; ++c) {
        const bool same = torch::equal(a.trend[0][c], b.trend[0][c]) && torch::equal(a.mu[0][c], b.mu[0][c]);
        CHECK(same == (c != 3));
    }
}

TEST_CASE("log-variance is clamped")
{
    auto cfg = small_config();
    FDN model(cfg);
    {
        torch::NoGradGuard g;
        param(*model, "head_logvar.bias").fill_(100.0);
    }
    auto out = model->heads_forward(torch::zeros({1, 6, 5, 16}));
    CHECK(out.logvar.max().item<double>() == kLogVarMax);
    {
        torch::NoGradGuard g;
        param(*model, "head_logvar.bias").fill_(-100.0);
    }
    CHECK(model->heads_forward(torch::zeros({1, 6, 5, 16})).logvar.min().item<double>() == kLogVarMin);
}

TEST_CASE("output filters")
{
    auto cfg = small_config();
    FDN model(cfg);
    auto c = torch::full({1, 6, 100}, 3.0, kF64);
    auto [trend, mu] = model->output_filter(c, c);
    CHECK(max_abs(trend - 3.0) < 1e-9);
    CHECK(max_abs(mu.slice(-1, 25, 75)) < 1e-6);

    auto bypass = cfg;
    bypass.ablation.no_fpf = true;
    FDN raw(bypass);
    auto r = torch::randn({1, 6, 100}, kF64);
    auto [rt, rm] = raw->output_filter(r, r);
    CHECK(torch::equal(rt, r));
    CHECK(torch::equal(rm, r));

    // a surviving head is lowpassed at the denoising cutoff
    auto no_trend = cfg;
    no_trend.ablation.no_trend_head = true;
    FDN nt(no_trend);
    auto wide = cfg.filter.with_cutoff(cfg.filter.denoise_cutoff_hz);
    CHECK(max_abs(nt->output_filter({}, r).second - fdn::spectral::lowpass(r, wide)) < 1e-12);
    auto no_res = cfg;
    no_res.ablation.no_res_head = true;
    FDN nr(no_res);
    CHECK(max_abs(nr->output_filter(r, {}).first - fdn::spectral::lowpass(r, wide)) < 1e-12);
}

TEST_CASE("output band prior on a long horizon")
{
    torch::manual_seed(7);
    auto cfg = small_config();
    cfg.dof = 2;
    cfg.history = 48;
    cfg.horizon = 1024;
    FDN model(cfg);
    auto out = model->forward(torch::randn({2, 10, 48}));
    auto interior = [](const torch::Tensor& t) { return t.slice(-1, 256, 768).to(torch::kFloat64); };
    auto freqs = fdn::spectral::rfft_frequencies(512, 100.0);
    auto f = torch::tensor(freqs, kF64);

    auto trend_energy = torch::fft::rfft(interior(out.trend), c10::nullopt, -1).abs().pow(2);
    auto above = (trend_energy * (f > 2.0).to(torch::kFloat64)).sum() / trend_energy.sum();
    CHECK(above.item<double>() < 0.01);

    auto mu_energy = torch::fft::rfft(interior(out.mu_res), c10::nullopt, -1).abs().pow(2);
    auto below = (mu_energy * (f < 0.5).to(torch::kFloat64)).sum() / mu_energy.sum();
    CHECK(below.item<double>() < 0.01);
}

TEST_CASE("residual sampling")
{
    auto mu = torch::randn({6, 100}, kF64);
    auto tiny = torch::full({6, 100}, kDegenerateLogVar, kF64);
    CHECK(max_abs(sample_residual(mu, tiny, 3) - mu) <= 1e-15);

    auto logvar = torch::randn({6, 100}, kF64);
    CHECK(torch::equal(sample_residual(mu, logvar, 11), sample_residual(mu, logvar, 11)));
    CHECK_FALSE(torch::equal(sample_residual(mu, logvar, 11), sample_residual(mu, logvar, 12)));

    // 1e5 draws at one element, spread along a batch axis
    auto one_mu = torch::full({100000}, 0.5, kF64);
    auto one_lv = torch::full({100000}, 1.3, kF64);
    auto draws = sample_residual(one_mu, one_lv, 5);
    const double sigma = std::exp(1.3 / 2.0);
    CHECK(std::abs(draws.std().item<double>() / sigma - 1.0) < 0.01);
}

TEST_CASE("sampled forecasts average to the predictive mean")
{
    ForecastDistribution d;
    d.trend = torch::randn({6, 20}, kF64);
    d.mu_res = torch::randn({6, 20}, kF64);
    d.logvar = torch::randn({6, 20}, kF64);
    auto sum = torch::zeros_like(d.trend);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i)
        sum += d.sample(static_cast<uint64_t>(i));
    auto err = (sum / draws - d.predictive_mean()).abs();
    CHECK((err <= 3.0 * d.sigma() / 100.0).all().item<bool>());
}

TEST_CASE("removing the residual head yields a point forecast")
{
    auto cfg = small_config();
    cfg.ablation.no_res_head = true;
    FDN model(cfg);
    auto out = model->forward(torch::randn({2, 30, 100}));
    CHECK(max_abs(out.mu_res) == 0.0);
    CHECK(out.logvar.eq(kDegenerateLogVar).all().item<bool>());
    CHECK(max_abs(out.sample(1) - out.trend) < 1e-12);
    CHECK_FALSE(model->named_parameters().contains("head_mu.weight"));
}

TEST_CASE("loss values")
{
    auto trend = torch::randn({2, 6, 10}, kF64);
    auto res = torch::randn({2, 6, 10}, kF64);
    ForecastDistribution p{trend, res, torch::zeros_like(res)};
    auto zero = loss(p, trend, res);
    CHECK(zero.total.item<double>() == 0.0);

    ForecastDistribution q{trend, res, torch::full_like(res, 2.0)};
    auto two = loss(q, trend, res);
    CHECK(two.residual.item<double>() == 1.0);
    CHECK(two.trend.item<double>() == 0.0);

    // brute-force mean over elements
    auto r = torch::randn({2, 6, 10}, kF64);
    auto lv = torch::randn({2, 6, 10}, kF64) * 0.5;
    ForecastDistribution s{trend + 0.1, r, lv};
    auto parts = loss(s, trend, res);
    double nll = 0.0;
    for (int64_t i = 0; i < res.numel(); ++i) {
        const double e = res.view(-1)[i].item<double>() - r.view(-1)[i].item<double>();
        const double v = lv.view(-1)[i].item<double>();
        nll += 0.5 * (e * e / std::exp(v) + v);
    }
    CHECK(parts.residual.item<double>() == doctest::Approx(nll / res.numel()).epsilon(1e-12));
    CHECK(parts.trend.item<double>() == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(parts.total.item<double>() == doctest::Approx(parts.trend.item<double>() + parts.residual.item<double>()));

    // ablated heads are scored against the whole wrench
    AblationFlags no_res;
    no_res.no_res_head = true;
    ForecastDistribution point{trend + res, torch::zeros_like(res), torch::full_like(res, kDegenerateLogVar)};
    CHECK(loss(point, trend, res, no_res).total.item<double>() < 1e-24);

    auto bad = trend.clone();
    bad[0][0][0] = std::numeric_limits<double>::quiet_NaN();
    ForecastDistribution nan_trend{bad, res, torch::zeros_like(res)};
    CHECK_THROWS_WITH(loss(nan_trend, trend, res), doctest::Contains("trend"));
    ForecastDistribution nan_res{trend, res, torch::full_like(res, std::numeric_limits<double>::infinity())};
    CHECK_THROWS_WITH(loss(nan_res, trend, res), doctest::Contains("residual"));
    CHECK_THROWS_AS(loss(p, trend.slice(-1, 0, 5), res), std::invalid_argument);
}

TEST_CASE("forecasts are deterministic in the seed")
{
    auto cfg = small_config();
    torch::manual_seed(21);
    FDN a(cfg);
    torch::manual_seed(21);
    FDN b(cfg);
    auto x = torch::randn({2, 30, 100});
    auto fa = a->forward(x);
    auto fb = b->forward(x);
    CHECK(torch::equal(fa.trend, fb.trend));
    CHECK(torch::equal(fa.mu_res, fb.mu_res));
    CHECK(torch::equal(fa.logvar, fb.logvar));
}

TEST_CASE("loss gradients match finite differences")
{
    for (const char* flags : {"none", "no_fef", "no_fpf", "shared_encoder", "no_trend_head"}) {
        CAPTURE(flags);
        torch::manual_seed(31);
        FDN model(oracle::tiny_config(AblationFlags::parse(flags)));
        model->to(torch::kFloat64);
        oracle::perturb(model, 8);
        auto x = torch::randn({3, 10, 16}, kF64);
        auto W_trend = torch::randn({3, 6, 16}, kF64);
        auto W_res = torch::randn({3, 6, 16}, kF64);
        const auto ab = model->config().ablation;
        auto objective = [&] { return loss(model->forward(x), W_trend, W_res, ab).total; };
        auto errors = oracle::gradient_errors(*model, objective, 1e-4, 24);
        CHECK(errors.size() > 10);
        for (const auto& [name, e] : errors) {
            CAPTURE(name);
            CHECK(e.relative < 1e-3);
        }
    }
}
