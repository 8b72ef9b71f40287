#include "fdn/evaluation.hpp"
#include "fdn/training.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace fdn::evaluation;
using fdn::spectral::Series;

namespace {

std::vector<double> row(const torch::Tensor& x, int64_t c)
{
    auto r = x[c].to(torch::kFloat64).contiguous();
    return {r.data_ptr<double>(), r.data_ptr<double>() + r.numel()};
}

Series series(const torch::Tensor& x)
{
    return {x.to(torch::kFloat64), 100.0};
}

const fixture::Data& episodes()
{
    static const auto data = fixture::synthetic(2, 20.0, 50, 11);
    return data;
}

const torch::Tensor& unit_std()
{
    static const auto t = torch::ones({6}, torch::kFloat64);
    return t;
}

}  // namespace

TEST_CASE("delay specs")
{
    CHECK(DelaySpec{100.0}.steps(100.0) == 10);
    CHECK(DelaySpec{1000.0}.steps(100.0) == 100);
    CHECK(DelaySpec{0.0, DelayMode::ZohPoint}.steps(100.0) == 0);
    CHECK_THROWS_AS(DelaySpec{15.0}.steps(100.0), std::invalid_argument);
    CHECK_THROWS_AS(DelaySpec{-10.0}.steps(100.0), std::invalid_argument);
    CHECK(to_string(DelayMode::ZohPoint) == "zoh_point");
    CHECK(to_string(DelayMode::DelayCompensated) == "delay_compensated");
}

TEST_CASE("window rms and wrmse against double loops")
{
    torch::manual_seed(21);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = torch::randn({6, 500}, torch::kFloat64);
        auto b = torch::randn({6, 500}, torch::kFloat64) * 2.0;
        auto sigma = torch::rand({6, 500}, torch::kFloat64);
        auto w = wrmse(series(a), series(b), 10);
        auto we = wrmse_expected(series(a), series(sigma), series(b), 10);
        auto p = prmse(series(a), series(b));
        auto tracks = window_rms(a, 10);
        REQUIRE(tracks.size(1) == 491);
        for (int64_t c = 0; c < 6; ++c) {
            const auto ra = oracle::window_rms(row(a, c), 10);
            const auto rb = oracle::window_rms(row(b, c), 10);
            const auto re = oracle::window_rms_expected(row(a, c), row(sigma, c), 10);
            CHECK(std::abs(w[c].item<double>() - oracle::rmse(ra, rb)) <= 1e-10);
            CHECK(std::abs(we[c].item<double>() - oracle::rmse(re, rb)) <= 1e-10);
            CHECK(std::abs(p[c].item<double>() - oracle::rmse(row(a, c), row(b, c))) <= 1e-12);
            CHECK(std::abs(tracks[c][7].item<double>() - ra[7]) <= 1e-12);
        }
    }
}

TEST_CASE("metric identities")
{
    auto a = torch::randn({6, 200}, torch::kFloat64);
    CHECK(wrmse(series(a), series(a)).abs().max().item<double>() == 0.0);
    CHECK(prmse(series(a), series(a)).abs().max().item<double>() == 0.0);

    auto zero = torch::zeros({6, 200}, torch::kFloat64);
    auto konst = torch::full({6, 200}, -2.5, torch::kFloat64);
    CHECK(wrmse(series(zero), series(konst)).sub(2.5).abs().max().item<double>() <= 1e-12);
    CHECK(prmse(series(a + 1.5), series(a)).sub(1.5).abs().max().item<double>() <= 1e-12);
    CHECK(torch::equal(wrmse_expected(series(a), series(zero), series(konst)), wrmse(series(a), series(konst))));

    CHECK_THROWS_AS(wrmse(series(a), series(a), 201), std::invalid_argument);
    CHECK_THROWS_AS(wrmse(series(a), series(a.narrow(1, 0, 100))), std::invalid_argument);
    CHECK_THROWS_AS(prmse(series(a), series(a.narrow(0, 0, 3))), std::invalid_argument);
    CHECK_THROWS_AS(wrmse_expected(series(a), series(-konst * 0.0 - 1.0), series(a)), std::invalid_argument);
    CHECK_THROWS_AS(window_rms(a, 0), std::invalid_argument);
}

TEST_CASE("expected wrmse with a calibrated sigma")
{
    const double s = 3.0;
    torch::manual_seed(22);
    auto truth = torch::randn({6, 100000}, torch::kFloat64) * s;
    auto mu = torch::zeros_like(truth);
    auto sigma = torch::full_like(truth, s);

    // at w = 10 the windowed RMS of the truth is s * sqrt(chi2_10 / 10), so the
    // error settles at s * sqrt(2 - 2 E[sqrt(chi2_10 / 10)]) rather than at zero
    const double mean_r = std::sqrt(2.0 / 10.0) * std::tgamma(5.5) / std::tgamma(5.0);
    const double limit = s * std::sqrt(2.0 - 2.0 * mean_r);
    auto narrow = wrmse_expected(series(mu), series(sigma), series(truth), 10);
    for (int c = 0; c < 6; ++c)
        CHECK(narrow[c].item<double>() == doctest::Approx(limit).epsilon(0.02));

    // wide windows concentrate the truth's RMS at s
    auto wide = wrmse_expected(series(mu), series(sigma), series(truth), 1000);
    CHECK(wide.max().item<double>() < 0.05 * s);
}

TEST_CASE("gaussian crps")
{
    CHECK(crps_point(3.0, 5.0) == 2.0);
    CHECK(crps_point(5.0, 3.0) == 2.0);
    CHECK(crps_gaussian(0.0, 1.0, 0.0) == doctest::Approx(0.23370).epsilon(1e-5));
    CHECK(crps_gaussian(2.0, 1.0, 2.0) == doctest::Approx(oracle::crps_gaussian_trapezoid(2.0, 1.0, 2.0)).epsilon(1e-6));
    CHECK(std::abs(crps_gaussian(1.0, 1e-12, 4.0) - 3.0) <= 1e-9);
    CHECK(crps_gaussian(1.0, 0.0, -1.0) == 2.0);
    CHECK_THROWS_AS(crps_gaussian(0.0, -1.0, 0.0), std::invalid_argument);

    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> mu_d(-5.0, 5.0), sigma_d(0.05, 4.0), off(-3.0, 3.0);
    auto mus = torch::empty({100}, torch::kFloat64), sigmas = torch::empty_like(mus), ys = torch::empty_like(mus);
    for (int i = 0; i < 100; ++i) {
        const double mu = mu_d(rng), sigma = sigma_d(rng), y = mu + off(rng) * sigma;
        const double ref = oracle::crps_gaussian_quadrature(mu, sigma, y);
        CHECK(std::abs(crps_gaussian(mu, sigma, y) - ref) <= 1e-4);
        mus[i] = mu;
        sigmas[i] = sigma;
        ys[i] = y;
    }
    auto t = crps_gaussian(mus, sigmas, ys);
    for (int i = 0; i < 100; ++i)
        CHECK(t[i].item<double>() == doctest::Approx(crps_gaussian(mus[i].item<double>(), sigmas[i].item<double>(),
                                                                   ys[i].item<double>()))
                                         .epsilon(1e-12));
    auto zero = crps_gaussian(mus, torch::zeros_like(sigmas), ys);
    CHECK(torch::equal(zero, (ys - mus).abs()));
    CHECK_THROWS_AS(crps_gaussian(mus, -sigmas, ys), std::invalid_argument);
}

TEST_CASE("sample crps")
{
    // energy form E|X - y| - E|X - X'| / 2 of the empirical distribution
    std::mt19937_64 rng(24);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> xs(50 + trial);
        for (auto& x : xs)
            x = n(rng);
        const double y = n(rng);
        double first = 0.0, second = 0.0;
        for (double a : xs) {
            first += std::abs(a - y);
            for (double b : xs)
                second += std::abs(a - b);
        }
        const double m = static_cast<double>(xs.size());
        CHECK(crps_samples(xs, y) == doctest::Approx(first / m - second / (2.0 * m * m)).epsilon(1e-12));
    }
    const std::vector<double> single{3.0};
    CHECK(crps_samples(single, 5.0) == doctest::Approx(2.0));
    CHECK_THROWS_AS(crps_samples(std::vector<double>{}, 0.0), std::invalid_argument);
}

TEST_CASE("crps is proper")
{
    std::mt19937_64 rng(25);
    const double mu = 1.0, sigma = 2.0;
    std::normal_distribution<double> n(mu, sigma);
    double truth = 0.0, plus = 0.0, minus = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double y = n(rng);
        truth += crps_gaussian(mu, sigma, y);
        plus += crps_gaussian(mu + 0.5 * sigma, sigma, y);
        minus += crps_gaussian(mu - 0.5 * sigma, sigma, y);
    }
    CHECK(truth <= plus);
    CHECK(truth <= minus);
}

TEST_CASE("oracle forecaster scores zero at both delays")
{
    const auto& e = episodes().episodes[0];
    OracleForecaster oracle(100, 100);
    for (double delay : {100.0, 1000.0}) {
        auto rec = reconstruct_episode(oracle, e, DelaySpec{delay});
        const int64_t k = static_cast<int64_t>(delay / 10.0);
        CHECK(rec.delay_steps == k);
        CHECK(rec.first_valid == 100 + k);
        CHECK(rec.valid.sum().item<int64_t>() == e.steps() - 100 - k);
        CHECK_FALSE(rec.valid[99 + k].item<bool>());
        const auto len = e.steps() - rec.first_valid;
        CHECK(torch::equal(rec.mean.narrow(1, rec.first_valid, len), e.W.to(torch::kFloat64).narrow(1, rec.first_valid, len)));
        auto report = score(rec, e, EvalConfig{}, unit_std());
        for (size_t c = 0; c < 6; ++c) {
            CHECK(report.physical.wrmse[c] == 0.0);
            CHECK(report.physical.prmse[c] == 0.0);
            CHECK(report.physical.crps[c] == 0.0);
        }
    }
}

TEST_CASE("point oracle under zero-order hold")
{
    const auto& e = episodes().episodes[0];
    PointOracle oracle(100);
    auto W = e.W.to(torch::kFloat64);
    for (double delay : {0.0, 100.0, 1000.0}) {
        auto rec = reconstruct_episode(oracle, e, DelaySpec{delay, DelayMode::ZohPoint}, 37);
        const int64_t k = rec.delay_steps;
        CHECK(rec.first_valid == 99 + k + 1);
        const auto len = e.steps() - rec.first_valid;
        CHECK(torch::equal(rec.mean.narrow(1, rec.first_valid, len), W.narrow(1, rec.first_valid - k, len)));
    }
    CHECK_THROWS_AS(reconstruct_episode(oracle, e, DelaySpec{100.0, DelayMode::DelayCompensated}), std::invalid_argument);
}

TEST_CASE("forecaster delay limits")
{
    const auto& e = episodes().episodes[0];
    OracleForecaster oracle(100, 100);
    CHECK_THROWS_AS(reconstruct_episode(oracle, e, DelaySpec{0.0}), std::invalid_argument);
    CHECK_THROWS_AS(reconstruct_episode(oracle, e, DelaySpec{1010.0}), std::invalid_argument);
    CHECK_THROWS_AS(reconstruct_episode(oracle, e, DelaySpec{100.0, DelayMode::ZohPoint}), std::invalid_argument);
    auto raw = fdn::dataset::synth_episode(fdn::dataset::SynthConfig{}, 1);
    CHECK_THROWS_AS(reconstruct_episode(oracle, raw, DelaySpec{100.0}), std::invalid_argument);
}

TEST_CASE("chunking does not change the reconstruction")
{
    const auto& e = episodes().episodes[1];
    auto net = fdn::training::make_fdn(fixture::small_model(), 3);
    FdnEstimator est(net, episodes().stats);
    auto a = reconstruct_episode(est, e, DelaySpec{100.0}, 128);
    auto b = reconstruct_episode(est, e, DelaySpec{100.0}, 41);
    CHECK(torch::allclose(a.mean, b.mean, 1e-6, 1e-6));
    CHECK(torch::allclose(a.sigma, b.sigma, 1e-6, 1e-6));
    CHECK(a.sigma.narrow(1, a.first_valid, e.steps() - a.first_valid).min().item<double>() > 0.0);
}

TEST_CASE("zero forecaster")
{
    const auto& e = episodes().episodes[0];
    ZeroForecaster zero(100, 100);
    auto rec = reconstruct_episode(zero, e, DelaySpec{100.0});
    auto report = score(rec, e, EvalConfig{}, unit_std());
    const int64_t v0 = rec.first_valid;
    auto truth = e.W.to(torch::kFloat64).narrow(1, v0, e.steps() - v0).contiguous();
    auto trend = fdn::spectral::decompose(series(truth), fdn::spectral::FilterSpec{}).trend.values;
    for (int64_t c = 0; c < 6; ++c) {
        double s = 0.0, mae = 0.0;
        for (int64_t t = 0; t < truth.size(1); ++t) {
            s += std::pow(trend[c][t].item<double>(), 2);
            mae += std::abs(truth[c][t].item<double>());
        }
        CHECK(std::abs(report.physical.prmse[static_cast<size_t>(c)] - std::sqrt(s / static_cast<double>(truth.size(1)))) <= 1e-9);
        CHECK(report.physical.crps[static_cast<size_t>(c)] == doctest::Approx(mae / static_cast<double>(truth.size(1))).epsilon(1e-12));
    }
    CHECK_FALSE(report.distributional);
}

TEST_CASE("prmse ignores content above the cutoff")
{
    const auto& e = episodes().episodes[0];
    ZeroForecaster zero(100, 100);
    auto rec = reconstruct_episode(zero, e, DelaySpec{100.0});
    auto base = score(rec, e, EvalConfig{}, unit_std());
    // a Hann taper keeps the 5 Hz burst band-limited on the scored segment, whose
    // length is not a whole number of periods
    const int64_t len = e.steps() - rec.first_valid;
    auto t = torch::arange(len, torch::kFloat64) / 100.0;
    auto burst = 5.0 * torch::sin(2.0 * M_PI * 5.0 * t) * torch::hann_window(len, torch::kFloat64);
    rec.mean.narrow(1, rec.first_valid, len).add_(burst.unsqueeze(0));
    auto injected = score(rec, e, EvalConfig{}, unit_std());
    for (size_t c = 0; c < 6; ++c)
        CHECK(std::abs(injected.physical.prmse[c] - base.physical.prmse[c]) < 1e-3 * base.physical.prmse[c]);
    CHECK(injected.physical.wrmse[0] != base.physical.wrmse[0]);
}

TEST_CASE("deterministic baselines score crps as mae")
{
    const auto& data = episodes();
    const auto& e = data.episodes[1];
    auto cfg = fdn::baselines::BaselineConfig::matching(fdn::baselines::BaselineKind::Seq2SeqPatch, fixture::small_model());
    BaselineEstimator est(fdn::training::make_baseline(cfg, 4), data.stats, true);
    CHECK(est.untrained());
    CHECK_FALSE(est.distributional());
    auto rec = reconstruct_episode(est, e, DelaySpec{100.0});
    CHECK_FALSE(rec.sigma.defined());
    auto report = score(rec, e, EvalConfig{}, data.stats.w_std);
    const int64_t v0 = rec.first_valid;
    const int64_t len = e.steps() - v0;
    auto err = (rec.mean.narrow(1, v0, len) - e.W.to(torch::kFloat64).narrow(1, v0, len)).abs();
    for (int64_t c = 0; c < 6; ++c) {
        double mae = 0.0;
        for (int64_t t = 0; t < len; ++t)
            mae += err[c][t].item<double>();
        CHECK(report.physical.crps[static_cast<size_t>(c)] == doctest::Approx(mae / static_cast<double>(len)).epsilon(1e-12));
        CHECK(report.normalized.crps[static_cast<size_t>(c)] ==
              doctest::Approx(report.physical.crps[static_cast<size_t>(c)] / data.stats.w_std[c].item<double>()));
    }

    auto point_cfg = fdn::baselines::BaselineConfig::matching(fdn::baselines::BaselineKind::PointMlp, fixture::small_model());
    BaselineEstimator point(fdn::training::make_baseline(point_cfg, 4), data.stats);
    CHECK(point.pointwise());
    auto prec = reconstruct_episode(point, e, DelaySpec{100.0, DelayMode::ZohPoint});
    CHECK(prec.first_valid == 110);
}

TEST_CASE("evaluate, report and summary")
{
    const auto& data = episodes();
    auto net = fdn::training::make_fdn(fixture::small_model(), 5);
    FdnEstimator est(net, data.stats);
    const std::vector<double> delays{100.0, 1000.0};
    auto reports = evaluate(est, data.episodes, delays, EvalConfig{}, data.stats.w_std);
    REQUIRE(reports.size() == data.episodes.size() * delays.size());
    CHECK(reports[0].episode == "episode_0");
    CHECK(reports[1].delay_ms == 1000.0);
    CHECK(reports[2].episode == "episode_1");
    for (const auto& r : reports) {
        CHECK(r.model == "fdn");
        CHECK(r.distributional);
        CHECK(r.mode == DelayMode::DelayCompensated);
        for (size_t c = 0; c < 6; ++c) {
            for (double v : {r.physical.wrmse[c], r.physical.prmse[c], r.physical.crps[c], r.normalized.crps[c]}) {
                CHECK(std::isfinite(v));
                CHECK(v >= 0.0);
            }
        }
    }

    auto dir = oracle::scratch_dir("eval_report");
    write_report_csv(dir / "report.csv", reports);
    std::ifstream in(dir / "report.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "model,episode,delay_ms,mode,channel,wrmse,prmse,crps,normalized");
    int rows = 0;
    while (std::getline(in, line))
        ++rows;
    CHECK(rows == 4 * (8 + 9));

    const auto text = summarize(reports);
    CHECK(text.find("wRMSE_N") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);

    auto rec = reconstruct_episode(est, data.episodes[0], DelaySpec{100.0});
    write_plot_svg(dir / "plot.svg", data.episodes[0], rec, "fdn");
    std::ifstream svg(dir / "plot.svg");
    std::getline(svg, line);
    CHECK(line.rfind("<svg", 0) == 0);

    ChannelMetrics m;
    m.wrmse = {1, 2, 3, 4, 5, 6};
    CHECK(m.force(m.wrmse) == 2.0);
    CHECK(m.torque(m.wrmse) == 5.0);
    CHECK(m.all(m.wrmse) == 3.5);
}
