#include "fdn/evaluation.hpp"

#include "fdn/log.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fdn::evaluation {

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

// Input windows ending at each listed step: [B x rows x L].
torch::Tensor history_windows(const torch::Tensor& features, std::span<const int64_t> times, int history)
{
    std::vector<torch::Tensor> windows;
    windows.reserve(times.size());
    for (auto t : times) {
        if (t < history - 1 || t >= features.size(1))
            throw std::out_of_range("prediction time " + std::to_string(t) + " lacks a full history");
        windows.push_back(features.narrow(1, t - history + 1, history));
    }
    return torch::stack(windows);
}

}  // namespace

std::string to_string(DelayMode mode)
{
    return mode == DelayMode::ZohPoint ? "zoh_point" : "delay_compensated";
}

int64_t DelaySpec::steps(double sample_rate) const
{
    const double k = delay_ms * sample_rate / 1000.0;
    const double rounded = std::round(k);
    if (!(delay_ms >= 0.0) || std::abs(k - rounded) > 1e-9 * std::max(1.0, k)) {
        std::ostringstream os;
        os << "delay " << delay_ms << " ms is not a nonnegative multiple of the sample period at " << sample_rate
           << " Hz";
        throw std::invalid_argument(os.str());
    }
    return static_cast<int64_t>(rounded);
}

FdnEstimator::FdnEstimator(model::FDN net, dataset::NormStats stats, std::string name, bool untrained)
    : net_(std::move(net)), stats_(std::move(stats)), name_(std::move(name)), untrained_(untrained)
{
    net_->eval();
}

int FdnEstimator::history() const
{
    return net_->config().history;
}

int FdnEstimator::horizon() const
{
    return net_->config().horizon;
}

Prediction FdnEstimator::predict(const dataset::Episode& e, std::span<const int64_t> times)
{
    torch::NoGradGuard no_grad;
    const auto& cfg = net_->config();
    const auto episode = e.dof() < cfg.dof ? dataset::pad_dof(e, cfg.dof) : e;
    if (episode.dof() != cfg.dof)
        throw std::invalid_argument("fdn estimator: episode has " + std::to_string(e.dof()) + " joints, model expects " +
                                    std::to_string(cfg.dof));
    const auto dtype = net_->parameters().front().scalar_type();
    auto x = dataset::apply_norm(history_windows(dataset::episode_features(episode), times, cfg.history), stats_);
    auto out = net_->forward(x.to(dtype));
    Prediction p;
    p.mean = dataset::denormalize_wrench(out.trend.to(torch::kFloat64), stats_) +
             dataset::scale_wrench(out.mu_res.to(torch::kFloat64), stats_);
    p.sigma = dataset::scale_wrench(out.sigma().to(torch::kFloat64), stats_);
    return p;
}

BaselineEstimator::BaselineEstimator(baselines::Baseline net, dataset::NormStats stats, bool untrained)
    : net_(std::move(net)), stats_(std::move(stats)), untrained_(untrained)
{
    net_->eval();
}

std::string BaselineEstimator::name() const
{
    return baselines::to_string(net_->config().kind);
}

bool BaselineEstimator::pointwise() const
{
    return net_->config().pointwise();
}

bool BaselineEstimator::distributional() const
{
    return net_->config().distributional();
}

int BaselineEstimator::history() const
{
    // Point estimators use one sample but share the forecasters' evaluation mask.
    return net_->config().history;
}

int BaselineEstimator::horizon() const
{
    return pointwise() ? 0 : net_->config().horizon;
}

Prediction BaselineEstimator::predict(const dataset::Episode& e, std::span<const int64_t> times)
{
    torch::NoGradGuard no_grad;
    const auto& cfg = net_->config();
    if (e.dof() != cfg.dof)
        throw std::invalid_argument("baseline estimator: joint count mismatch");
    const auto dtype = net_->parameters().front().scalar_type();
    const auto features = dataset::episode_features(e);
    Prediction p;
    if (pointwise()) {
        auto x = dataset::absolute_inputs(history_windows(features, times, 1), stats_).squeeze(-1);
        p.mean = dataset::denormalize_wrench(net_->point(x.to(dtype)).to(torch::kFloat64).unsqueeze(-1), stats_);
        return p;
    }
    auto x = dataset::absolute_inputs(history_windows(features, times, cfg.history), stats_);
    auto out = net_->sequence(x.to(dtype));
    p.mean = dataset::denormalize_wrench(out.mu.to(torch::kFloat64), stats_);
    if (out.logvar.defined())
        p.sigma = dataset::scale_wrench(torch::exp(out.logvar.to(torch::kFloat64) / 2.0), stats_);
    return p;
}

Prediction OracleForecaster::predict(const dataset::Episode& e, std::span<const int64_t> times)
{
    const auto steps = e.steps();
    auto mean = torch::zeros({static_cast<int64_t>(times.size()), 6, horizon_}, kF64);
    for (size_t b = 0; b < times.size(); ++b) {
        const int64_t first = times[b] + 1;
        const int64_t count = std::clamp<int64_t>(steps - first, 0, horizon_);
        if (count > 0)
            mean[static_cast<int64_t>(b)].narrow(1, 0, count).copy_(e.W.narrow(1, first, count));
    }
    return {mean, {}};
}

Prediction PointOracle::predict(const dataset::Episode& e, std::span<const int64_t> times)
{
    auto idx = torch::tensor(std::vector<int64_t>(times.begin(), times.end()), torch::kLong);
    return {e.W.to(torch::kFloat64).index_select(1, idx).t().unsqueeze(-1).contiguous(), {}};
}

Prediction ZeroForecaster::predict(const dataset::Episode&, std::span<const int64_t> times)
{
    return {torch::zeros({static_cast<int64_t>(times.size()), 6, horizon_}, kF64), {}};
}

namespace {

std::vector<Reconstruction> reconstruct_all(Estimator& est, const dataset::Episode& e,
                                            std::span<const DelaySpec> delays, int64_t chunk)
{
    if (!e.preprocessed())
        throw std::invalid_argument("reconstruct: episode '" + e.name + "' is not preprocessed");
    const int64_t steps = e.steps();
    const int64_t L = est.history();
    const int64_t T = est.horizon();
    const bool dist = est.distributional();

    std::vector<Reconstruction> recs;
    std::vector<int64_t> ks;
    int64_t k_min = std::numeric_limits<int64_t>::max();
    for (const auto& d : delays) {
        const int64_t k = d.steps(e.sample_rate);
        if (est.pointwise()) {
            if (d.mode != DelayMode::ZohPoint)
                throw std::invalid_argument("point estimator '" + est.name() + "' requires zoh_point delay mode");
        } else {
            if (d.mode != DelayMode::DelayCompensated)
                throw std::invalid_argument("forecaster '" + est.name() + "' requires delay_compensated mode");
            if (k < 1)
                throw std::invalid_argument("delay_compensated mode needs a delay of at least one sample");
            if (k > T)
                throw std::invalid_argument("delay of " + std::to_string(k) + " steps exceeds the horizon T=" +
                                            std::to_string(T));
        }
        if (L + k >= steps)
            throw std::invalid_argument("episode '" + e.name + "' is too short for the evaluation window");
        Reconstruction r;
        r.mean = torch::zeros({6, steps}, kF64);
        if (dist)
            r.sigma = torch::zeros({6, steps}, kF64);
        r.first_valid = L + k;
        r.delay_steps = k;
        r.valid = torch::arange(steps) >= r.first_valid;
        recs.push_back(std::move(r));
        ks.push_back(k);
        k_min = std::min(k_min, k);
    }
    if (recs.empty())
        return recs;

    // Issue times: the point estimator for t is evaluated at t - k; the forecaster
    // issued at t lands at t + k. Either way issue times span [L-1, steps-1-k].
    const int64_t first = std::max<int64_t>(L - 1, 0);
    const int64_t last = steps - 1 - k_min;
    std::vector<int64_t> times;
    for (int64_t s0 = first; s0 <= last; s0 += chunk) {
        times.clear();
        for (int64_t s = s0; s <= std::min(last, s0 + chunk - 1); ++s)
            times.push_back(s);
        auto pred = est.predict(e, times);
        for (size_t r = 0; r < recs.size(); ++r) {
            const int64_t k = ks[r];
            const int64_t index = est.pointwise() ? 0 : k - 1;
            const int64_t usable = std::min<int64_t>(static_cast<int64_t>(times.size()), steps - k - times.front());
            if (usable <= 0)
                continue;
            const int64_t dest = times.front() + k;
            recs[r].mean.narrow(1, dest, usable).copy_(pred.mean.narrow(0, 0, usable).select(2, index).t());
            if (dist)
                recs[r].sigma.narrow(1, dest, usable).copy_(pred.sigma.narrow(0, 0, usable).select(2, index).t());
        }
    }
    return recs;
}

}  // namespace

Reconstruction reconstruct_episode(Estimator& est, const dataset::Episode& e, const DelaySpec& delay, int64_t chunk)
{
    return reconstruct_all(est, e, std::span<const DelaySpec>(&delay, 1), chunk).front();
}

torch::Tensor window_rms(const torch::Tensor& x, int64_t w)
{
    if (w < 1 || w > x.size(-1))
        throw std::invalid_argument("window_rms: window " + std::to_string(w) + " outside [1, " +
                                    std::to_string(x.size(-1)) + "]");
    return x.pow(2).unfold(-1, w, 1).mean(-1).sqrt();
}

namespace {

void check_pair(const Series& a, const Series& b, const char* what)
{
    if (a.values.sizes() != b.values.sizes())
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

torch::Tensor rmse_over_steps(const torch::Tensor& a, const torch::Tensor& b)
{
    return (a - b).pow(2).mean(-1).sqrt();
}

}  // namespace

torch::Tensor wrmse(const Series& pred_res, const Series& true_res, int64_t w)
{
    check_pair(pred_res, true_res, "wrmse");
    return rmse_over_steps(window_rms(pred_res.values, w), window_rms(true_res.values, w));
}

torch::Tensor wrmse_expected(const Series& mu_res, const Series& sigma, const Series& true_res, int64_t w)
{
    check_pair(mu_res, true_res, "wrmse_expected");
    check_pair(sigma, true_res, "wrmse_expected");
    if ((sigma.values < 0).any().item<bool>())
        throw std::invalid_argument("wrmse_expected: negative sigma");
    auto second_moment = mu_res.values.pow(2) + sigma.values.pow(2);
    if (w < 1 || w > second_moment.size(-1))
        throw std::invalid_argument("wrmse_expected: window larger than the series");
    auto predicted = second_moment.unfold(-1, w, 1).mean(-1).sqrt();
    return rmse_over_steps(predicted, window_rms(true_res.values, w));
}

torch::Tensor prmse(const Series& pred_trend, const Series& true_trend)
{
    check_pair(pred_trend, true_trend, "prmse");
    return rmse_over_steps(pred_trend.values, true_trend.values);
}

double crps_point(double value, double obs)
{
    return std::abs(obs - value);
}

double crps_gaussian(double mu, double sigma, double obs)
{
    if (!(sigma >= 0.0))
        throw std::invalid_argument("crps: sigma must be nonnegative");
    if (sigma == 0.0)
        return std::abs(obs - mu);
    const double z = (obs - mu) / sigma;
    const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

double crps_samples(std::span<const double> samples, double obs)
{
    if (samples.empty())
        throw std::invalid_argument("crps: empty sample set");
    std::vector<double> xs(samples.begin(), samples.end());
    std::sort(xs.begin(), xs.end());
    const double m = static_cast<double>(xs.size());
    double abs_obs = 0.0;
    double spread = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        abs_obs += std::abs(xs[i] - obs);
        spread += (2.0 * static_cast<double>(i + 1) - m - 1.0) * xs[i];
    }
    return abs_obs / m - spread / (m * m);
}

torch::Tensor crps_gaussian(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& obs)
{
    if ((sigma < 0).any().item<bool>())
        throw std::invalid_argument("crps: sigma must be nonnegative");
    auto safe = sigma.clamp_min(1e-300);
    auto z = (obs - mu) / safe;
    auto cdf = 0.5 * torch::erfc(-z / std::numbers::sqrt2);
    auto pdf = torch::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    auto value = safe * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
    return torch::where(sigma > 0, value, (obs - mu).abs());
}

namespace {

std::array<double, 6> to_array(const torch::Tensor& v)
{
    std::array<double, 6> out{};
    auto c = v.to(torch::kFloat64).contiguous();
    for (int i = 0; i < 6; ++i)
        out[static_cast<size_t>(i)] = c[i].item<double>();
    return out;
}

std::array<double, 6> divide(std::array<double, 6> m, const std::array<double, 6>& scale)
{
    for (size_t i = 0; i < 6; ++i)
        m[i] /= scale[i];
    return m;
}

}  // namespace

MetricsReport score(const Reconstruction& rec, const dataset::Episode& e, const EvalConfig& cfg,
                    const torch::Tensor& w_std)
{
    const int64_t v0 = rec.first_valid;
    const int64_t len = e.steps() - v0;
    auto spec = cfg.filter;
    spec.sample_rate = e.sample_rate;

    Series truth{e.W.to(torch::kFloat64).narrow(1, v0, len).contiguous(), e.sample_rate};
    Series pred{rec.mean.narrow(1, v0, len).contiguous(), e.sample_rate};
    auto true_parts = spectral::decompose(truth, spec);
    auto pred_parts = spectral::decompose(pred, spec);

    MetricsReport r;
    r.episode = e.name;
    r.distributional = rec.sigma.defined();
    torch::Tensor wr, cr;
    if (rec.sigma.defined()) {
        Series sigma{rec.sigma.narrow(1, v0, len).contiguous(), e.sample_rate};
        wr = wrmse_expected(pred_parts.residual, sigma, true_parts.residual, cfg.window);
        cr = crps_gaussian(pred.values, sigma.values, truth.values).mean(-1);
    } else {
        wr = wrmse(pred_parts.residual, true_parts.residual, cfg.window);
        cr = (pred.values - truth.values).abs().mean(-1);
    }
    r.physical.wrmse = to_array(wr);
    r.physical.prmse = to_array(prmse(pred_parts.trend, true_parts.trend));
    r.physical.crps = to_array(cr);

    const auto scale = to_array(w_std);
    r.normalized.wrmse = divide(r.physical.wrmse, scale);
    r.normalized.prmse = divide(r.physical.prmse, scale);
    r.normalized.crps = divide(r.physical.crps, scale);
    return r;
}

std::vector<MetricsReport> evaluate(Estimator& est, std::span<const dataset::Episode> episodes,
                                    std::span<const double> delays_ms, const EvalConfig& cfg,
                                    const torch::Tensor& w_std)
{
    if (est.untrained())
        log::warn("evaluating '" + est.name() + "', whose checkpoint was never trained");
    std::vector<DelaySpec> delays;
    for (double d : delays_ms)
        delays.push_back({d, est.pointwise() ? DelayMode::ZohPoint : DelayMode::DelayCompensated});
    std::vector<MetricsReport> reports;
    for (const auto& e : episodes) {
        auto recs = reconstruct_all(est, e, delays, 128);
        for (size_t i = 0; i < recs.size(); ++i) {
            auto r = score(recs[i], e, cfg, w_std);
            r.model = est.name();
            r.delay_ms = delays[i].delay_ms;
            r.mode = delays[i].mode;
            reports.push_back(std::move(r));
        }
    }
    return reports;
}

void write_report_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    out << "model,episode,delay_ms,mode,channel,wrmse,prmse,crps,normalized\n";
    char buf[256];
    auto row = [&](const MetricsReport& r, const std::string& channel, double w, double p, double c, int norm) {
        std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g,%d", w, p, c, norm);
        out << r.model << ',' << r.episode << ',' << r.delay_ms << ',' << to_string(r.mode) << ',' << channel << ','
            << buf << '\n';
    };
    for (const auto& r : reports) {
        for (int norm = 0; norm < 2; ++norm) {
            const auto& m = norm ? r.normalized : r.physical;
            for (size_t c = 0; c < 6; ++c)
                row(r, kChannelNames[c], m.wrmse[c], m.prmse[c], m.crps[c], norm);
            row(r, "force", m.force(m.wrmse), m.force(m.prmse), m.force(m.crps), norm);
            row(r, "torque", m.torque(m.wrmse), m.torque(m.prmse), m.torque(m.crps), norm);
            if (norm)
                row(r, "all", m.all(m.wrmse), m.all(m.prmse), m.all(m.crps), norm);
        }
    }
}

std::string summarize(std::span<const MetricsReport> reports)
{
    struct Acc {
        double fw = 0, fp = 0, fc = 0, tw = 0, tp = 0, tc = 0, nw = 0, np = 0, nc = 0;
        int count = 0;
    };
    std::vector<std::pair<std::string, double>> order;
    std::map<std::pair<std::string, double>, Acc> acc;
    for (const auto& r : reports) {
        auto key = std::make_pair(r.model, r.delay_ms);
        if (!acc.count(key))
            order.push_back(key);
        auto& a = acc[key];
        const auto& p = r.physical;
        const auto& n = r.normalized;
        a.fw += p.force(p.wrmse);
        a.fp += p.force(p.prmse);
        a.fc += p.force(p.crps);
        a.tw += p.torque(p.wrmse);
        a.tp += p.torque(p.prmse);
        a.tc += p.torque(p.crps);
        a.nw += n.all(n.wrmse);
        a.np += n.all(n.prmse);
        a.nc += n.all(n.crps);
        ++a.count;
    }
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(26) << "model" << std::right << std::setw(9) << "delay_ms" << std::setw(10) << "episodes"
       << std::setw(11) << "wRMSE_N" << std::setw(11) << "pRMSE_N" << std::setw(11) << "CRPS_N" << std::setw(11)
       << "wRMSE_Nm" << std::setw(11) << "pRMSE_Nm" << std::setw(11) << "CRPS_Nm" << std::setw(11) << "wRMSE_n"
       << std::setw(11) << "pRMSE_n" << std::setw(11) << "CRPS_n" << '\n';
    for (const auto& key : order) {
        const auto& a = acc[key];
        const double c = a.count;
        os << std::left << std::setw(26) << key.first << std::right << std::setw(9) << std::setprecision(0)
           << key.second << std::setw(10) << a.count << std::setprecision(4) << std::setw(11) << a.fw / c
           << std::setw(11) << a.fp / c << std::setw(11) << a.fc / c << std::setw(11) << a.tw / c << std::setw(11)
           << a.tp / c << std::setw(11) << a.tc / c << std::setw(11) << a.nw / c << std::setw(11) << a.np / c
           << std::setw(11) << a.nc / c << '\n';
    }
    return os.str();
}

void write_plot_svg(const std::filesystem::path& path, const dataset::Episode& e, const Reconstruction& rec,
                    const std::string& title)
{
    constexpr double width = 1200, panel = 160, margin = 50;
    const int64_t v0 = rec.first_valid;
    const int64_t len = e.steps() - v0;
    const int64_t stride = std::max<int64_t>(1, len / 1500);
    auto truth = e.W.to(torch::kFloat64).narrow(1, v0, len).contiguous();
    auto mean = rec.mean.narrow(1, v0, len).contiguous();
    auto band = rec.sigma.defined() ? 3.0 * rec.sigma.narrow(1, v0, len).contiguous() : torch::zeros_like(mean);

    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
    const double height = margin + 6 * (panel + 20);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << margin << "\" y=\"25\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
    out << std::fixed << std::setprecision(2);
    for (int c = 0; c < 6; ++c) {
        auto lo = (mean[c] - band[c]).min().item<double>();
        auto hi = (mean[c] + band[c]).max().item<double>();
        lo = std::min(lo, truth[c].min().item<double>());
        hi = std::max(hi, truth[c].max().item<double>());
        if (hi - lo < 1e-12)
            hi = lo + 1.0;
        const double top = margin + c * (panel + 20);
        auto px = [&](int64_t i) { return margin + (width - 2 * margin) * static_cast<double>(i) / static_cast<double>(len - 1); };
        auto py = [&](double v) { return top + panel * (1.0 - (v - lo) / (hi - lo)); };
        auto line = [&](const torch::Tensor& y, const char* colour) {
            out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1\" points=\"";
            for (int64_t i = 0; i < len; i += stride)
                out << px(i) << ',' << py(y[i].item<double>()) << ' ';
            out << "\"/>\n";
        };
        out << "<rect x=\"" << margin << "\" y=\"" << top << "\" width=\"" << width - 2 * margin << "\" height=\""
            << panel << "\" fill=\"none\" stroke=\"#999\"/>\n"
            << "<text x=\"5\" y=\"" << top + panel / 2 << "\" font-family=\"sans-serif\" font-size=\"12\">"
            << kChannelNames[static_cast<size_t>(c)] << "</text>\n";
        if (rec.sigma.defined()) {
            out << "<polygon fill=\"#9ecae1\" fill-opacity=\"0.6\" stroke=\"none\" points=\"";
            for (int64_t i = 0; i < len; i += stride)
                out << px(i) << ',' << py(mean[c][i].item<double>() + band[c][i].item<double>()) << ' ';
            for (int64_t i = ((len - 1) / stride) * stride; i >= 0; i -= stride)
                out << px(i) << ',' << py(mean[c][i].item<double>() - band[c][i].item<double>()) << ' ';
            out << "\"/>\n";
        }
        line(truth[c], "black");
        line(mean[c], "#d62728");
    }
    out << "</svg>\n";
}

}  // namespace fdn::evaluation
