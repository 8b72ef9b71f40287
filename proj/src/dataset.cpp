#include "fdn/dataset.hpp"

#include "fdn/log.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fdn::dataset {

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

at::Generator make_generator(uint64_t seed)
{
    return at::detail::createCPUGenerator(seed);
}

uint64_t mix_seed(uint64_t seed, uint64_t salt)
{
    // splitmix64 finalizer
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double uniform(at::Generator& gen, double lo, double hi)
{
    return torch::rand({1}, gen, kF64).item<double>() * (hi - lo) + lo;
}

// Per-channel wrench scales: forces then torques.
torch::Tensor channel_scale(double force, double torque)
{
    return torch::tensor({force, force, force, torque, torque, torque}, kF64);
}

}  // namespace

void SynthConfig::validate() const
{
    if (dof < 1)
        throw std::invalid_argument("synth: dof must be >= 1");
    if (!(sample_rate > 0.0) || !(duration_s > static_s + ramp_s))
        throw std::invalid_argument("synth: duration must exceed static + ramp segments");
    FilterSpec spec = filter;
    spec.sample_rate = sample_rate;
    spec.validate();
    if (!(trend_band_hz > 0.0 && trend_band_hz <= spec.cutoff_hz))
        throw std::invalid_argument("synth: trend band edge must lie in (0, f_c]");
}

void Episode::validate() const
{
    if (!q.defined() || !u.defined() || !W.defined() || !t.defined())
        throw std::invalid_argument("episode: missing channels");
    if (q.dim() != 2 || u.dim() != 2 || W.dim() != 2 || t.dim() != 1)
        throw std::invalid_argument("episode: bad tensor ranks");
    const auto steps = q.size(1);
    if (u.size(1) != steps || W.size(1) != steps || t.size(0) != steps)
        throw std::invalid_argument("episode: channels differ in length");
    if (u.size(0) != q.size(0) || W.size(0) != 6)
        throw std::invalid_argument("episode: expected n joints, n actuators and 6 wrench channels");
    if (steps >= 2) {
        auto dt = t.slice(0, 1) - t.slice(0, 0, steps - 1);
        const double expected = 1.0 / sample_rate;
        if ((dt - expected).abs().max().item<double>() > 1e-9)
            throw std::invalid_argument("episode: timestamps not uniform at sample_rate");
    }
}

Episode synth_episode(const SynthConfig& cfg, uint64_t seed)
{
    cfg.validate();
    const int n = cfg.dof;
    const auto steps = static_cast<int64_t>(std::llround(cfg.duration_s * cfg.sample_rate));
    auto gen = make_generator(seed);

    Episode e;
    e.name = "synth-" + std::to_string(seed);
    e.session = "synthetic";
    e.sample_rate = cfg.sample_rate;
    e.static_end_s = cfg.static_s;
    e.t = torch::arange(steps, kF64) / cfg.sample_rate;

    // Smooth onset s(tau) of motion and contact after the static segment.
    auto tau = e.t - cfg.static_s;
    auto x = (tau / cfg.ramp_s).clamp(0.0, 1.0);
    auto moving = (tau >= 0.0).to(torch::kFloat64);
    auto ramp = x * x * (3.0 - 2.0 * x);
    auto inside = ((x > 0.0) & (x < 1.0)).to(torch::kFloat64);
    auto ramp_d = 6.0 * x * (1.0 - x) / cfg.ramp_s * inside;
    auto ramp_dd = (6.0 - 12.0 * x) / (cfg.ramp_s * cfg.ramp_s) * inside;
    auto tau_pos = tau.clamp_min(0.0);

    auto dq = torch::zeros({n, steps}, kF64);
    auto qd = torch::zeros({n, steps}, kF64);
    auto qdd = torch::zeros({n, steps}, kF64);
    e.q0 = torch::zeros({n}, kF64);
    for (int j = 0; j < n; ++j) {
        e.q0[j] = uniform(gen, -1.0, 1.0);
        auto amps = torch::rand({5}, gen, kF64);
        amps = amps / amps.sum() * uniform(gen, 0.3, 1.0);
        auto g = torch::zeros({steps}, kF64);
        auto gd = torch::zeros({steps}, kF64);
        auto gdd = torch::zeros({steps}, kF64);
        for (int i = 0; i < 5; ++i) {
            const double f = uniform(gen, 0.02, 0.4);
            const double phase = uniform(gen, 0.0, 2.0 * std::numbers::pi);
            const double w = 2.0 * std::numbers::pi * f;
            const double a = amps[i].item<double>();
            auto arg = tau_pos * w + phase;
            g += a * (torch::sin(arg) - std::sin(phase));
            gd += a * w * torch::cos(arg);
            gdd -= a * w * w * torch::sin(arg);
        }
        dq[j] = moving * ramp * g;
        qd[j] = moving * (ramp_d * g + ramp * gd);
        qdd[j] = moving * (ramp_dd * g + 2.0 * ramp_d * gd + ramp * gdd);
    }

    // Per-joint maps so that joints shared across DoF counts share structure.
    auto trend_map = torch::zeros({6, 3 * n}, kF64);
    auto envelope_map = torch::zeros({6, 2 * n}, kF64);
    auto act_state = torch::zeros({n, 3}, kF64);
    auto act_load = torch::zeros({n, 6}, kF64);
    for (int j = 0; j < n; ++j) {
        auto tg = make_generator(mix_seed(cfg.trend_seed, static_cast<uint64_t>(j)));
        trend_map.slice(1, 3 * j, 3 * j + 3).copy_(torch::randn({6, 3}, tg, kF64));
        act_state[j] = torch::randn({3}, tg, kF64);
        act_load[j] = torch::randn({6}, tg, kF64) / std::sqrt(6.0);
        auto eg = make_generator(mix_seed(cfg.envelope_seed, static_cast<uint64_t>(j)));
        envelope_map.slice(1, 2 * j, 2 * j + 2).copy_(torch::randn({6, 2}, eg, kF64));
    }
    trend_map *= cfg.trend_gain / std::sqrt(18.0);
    envelope_map /= std::sqrt(2.0 * n);

    auto state = torch::zeros({3 * n, steps}, kF64);
    auto pos_vel = torch::zeros({2 * n, steps}, kF64);
    for (int j = 0; j < n; ++j) {
        state[3 * j] = dq[j];
        state[3 * j + 1] = qd[j];
        state[3 * j + 2] = qdd[j];
        pos_vel[2 * j] = dq[j];
        pos_vel[2 * j + 1] = qd[j];
    }

    auto trend_scale = channel_scale(cfg.trend_force_n, cfg.trend_torque_nm).unsqueeze(1);
    FilterSpec trend_spec = cfg.filter;
    trend_spec.sample_rate = cfg.sample_rate;
    auto trend = spectral::lowpass(torch::tanh(trend_map.matmul(state)) * trend_scale,
                                   trend_spec.with_cutoff(cfg.trend_band_hz)) * ramp;

    auto reference = channel_scale(cfg.residual_force_n, cfg.residual_torque_nm).unsqueeze(1);
    auto sigma = ramp * reference * torch::exp(cfg.envelope_gain * envelope_map.matmul(pos_vel));

    FilterSpec band = cfg.filter;
    band.sample_rate = cfg.sample_rate;
    auto noise = spectral::highpass(torch::randn({6, steps}, gen, kF64), band);
    noise = noise / noise.pow(2).mean(1, true).sqrt();
    auto residual = sigma * noise;

    auto offset = (torch::rand({6}, gen, kF64) * 2.0 - 1.0) * cfg.wrench_offset;
    auto clean = trend + residual;
    e.W = clean + offset.unsqueeze(1) + cfg.wrench_noise * torch::randn({6, steps}, gen, kF64);

    auto load = clean / channel_scale(100.0, 30.0).unsqueeze(1);
    e.u = torch::zeros({n, steps}, kF64);
    for (int j = 0; j < n; ++j) {
        e.u[j] = act_state[j].matmul(state.slice(0, 3 * j, 3 * j + 3)) + act_load[j].matmul(load);
    }
    e.u += cfg.u_noise * torch::randn({n, steps}, gen, kF64);
    e.q = e.q0.unsqueeze(1) + dq + cfg.q_noise_rad * torch::randn({n, steps}, gen, kF64);

    SynthMeta meta;
    meta.seed = seed;
    meta.qd = qd;
    meta.qdd = qdd;
    meta.sigma = sigma;
    meta.trend = trend;
    meta.residual = residual;
    meta.offset = offset;
    meta.envelope_map = envelope_map;
    e.meta = std::move(meta);
    return e;
}

namespace {

// Filter taps (oldest sample first) evaluating the deriv-th derivative at the
// newest of `m` samples, per step.
torch::Tensor savgol_taps(int m, int order, int deriv)
{
    const int p = std::min(order, m - 1);
    if (deriv > p)
        return torch::zeros({m}, kF64);
    auto pos = torch::arange(-(m - 1), 1, kF64);
    auto vander = torch::stack([&] {
        std::vector<torch::Tensor> cols;
        for (int k = 0; k <= p; ++k)
            cols.push_back(pos.pow(k));
        return cols;
    }(), 1);
    auto pinv = torch::linalg_pinv(vander);
    double factorial = 1.0;
    for (int k = 2; k <= deriv; ++k)
        factorial *= k;
    return pinv[deriv] * factorial;
}

}  // namespace

Series savitzky_golay_causal(const Series& s, int window, int order, int deriv)
{
    s.validate();
    if (order < 0 || deriv < 0 || deriv > order)
        throw std::invalid_argument("savgol: need 0 <= deriv <= order");
    if (window < order + 1)
        throw std::invalid_argument("savgol: window must be >= order + 1");
    if (window > s.steps())
        throw std::invalid_argument("savgol: window longer than series");

    auto values = s.values.to(torch::kFloat64);
    const double scale = std::pow(s.sample_rate, deriv);
    auto out = torch::empty_like(values);

    auto taps = savgol_taps(window, order, deriv);
    auto frames = values.unfold(1, window, 1);  // [C x steps-window+1 x window]
    out.slice(1, window - 1).copy_(frames.matmul(taps));
    for (int t = 0; t < window - 1; ++t) {
        auto prefix = values.slice(1, 0, t + 1);
        out.select(1, t).copy_(prefix.matmul(savgol_taps(t + 1, order, deriv)));
    }
    return {out * scale, s.sample_rate};
}

torch::Tensor zoh_align(const torch::Tensor& source_t, const torch::Tensor& source_values,
                        const torch::Tensor& dest_t)
{
    auto src = source_t.contiguous().to(torch::kFloat64);
    auto dst = dest_t.contiguous().to(torch::kFloat64);
    // Index of the last source sample with time <= dest time; before the first
    // source sample the first value is held.
    auto idx = torch::searchsorted(src, dst, /*out_int32=*/false, /*right=*/true) - 1;
    idx = idx.clamp(0, src.size(0) - 1);
    return source_values.index_select(1, idx);
}

torch::Tensor remove_static_offset(const torch::Tensor& W, const torch::Tensor& t, double static_end_s)
{
    auto static_mask = t < static_end_s;
    const auto count = static_mask.sum().item<int64_t>();
    if (count < 1)
        throw std::invalid_argument("preprocess: static segment contains no samples");
    auto mean = W.index({torch::indexing::Slice(), static_mask}).mean(1, true);
    return W - mean;
}

Episode preprocess_episode(const Episode& raw, const FilterSpec& spec, const SavGolConfig& sg)
{
    raw.validate();
    spec.validate();
    if (raw.static_end_s < 0.0)
        throw std::invalid_argument("preprocess: no static segment marked; set static_end_s for episode '" +
                                    raw.name + "'");

    const auto denoise = spec.with_cutoff(spec.denoise_cutoff_hz);
    Episode e = raw;
    e.q = spectral::lowpass(raw.q.to(torch::kFloat64), denoise);
    e.u = spectral::lowpass(raw.u.to(torch::kFloat64), denoise);

    auto W = raw.W.to(torch::kFloat64);
    if (raw.wrench_t.defined() && !torch::equal(raw.wrench_t, raw.t))
        W = zoh_align(raw.wrench_t, W, raw.t);
    e.wrench_t = torch::Tensor();
    W = remove_static_offset(W, raw.t, raw.static_end_s);
    e.W = spectral::lowpass(W, denoise);

    Series qs{e.q, e.sample_rate};
    e.qd = savitzky_golay_causal(qs, sg.window, sg.order, 1).values;
    e.qdd = savitzky_golay_causal(qs, sg.window, sg.order, 2).values;
    if (!e.q0.defined())
        e.q0 = e.q.select(1, 0).clone();
    return e;
}

Episode pad_dof(const Episode& e, int n)
{
    const int have = e.dof();
    if (n < have)
        throw std::invalid_argument("pad_dof: target layout smaller than episode");
    if (n == have)
        return e;
    auto pad = [&](const torch::Tensor& m) {
        if (!m.defined())
            return m;
        if (m.dim() == 1)
            return torch::cat({m, torch::zeros({n - have}, m.options())});
        return torch::cat({m, torch::zeros({n - have, m.size(1)}, m.options())});
    };
    Episode out = e;
    out.q = pad(e.q);
    out.u = pad(e.u);
    out.qd = pad(e.qd);
    out.qdd = pad(e.qdd);
    out.q0 = pad(e.q0);
    return out;
}

torch::Tensor episode_features(const Episode& e)
{
    if (!e.preprocessed())
        throw std::invalid_argument("episode_features: episode is not preprocessed");
    auto q0 = e.q0.to(torch::kFloat64).unsqueeze(1);
    return torch::cat({e.q - q0, e.qd, e.qdd, e.u, q0.expand({-1, e.steps()})}, 0).contiguous();
}

WindowSet::WindowSet(int history, int horizon, FilterSpec spec)
    : history_(history), horizon_(horizon), spec_(spec)
{
    if (history < 1 || horizon < 4)
        throw std::invalid_argument("windows: need L >= 1 and T >= 4");
    spec_.validate();
}

int WindowSet::input_rows() const
{
    return sources_.empty() ? 0 : static_cast<int>(sources_.front().features.size(0));
}

void WindowSet::add_episode(const Episode& e, int stride)
{
    if (stride < 1)
        throw std::invalid_argument("windows: stride must be >= 1");
    const int64_t steps = e.steps();
    if (steps < history_ + horizon_) {
        log::warn("episode '" + e.name + "' has " + std::to_string(steps) + " steps, fewer than L+T=" +
                  std::to_string(history_ + horizon_) + "; no windows emitted");
        return;
    }
    auto features = episode_features(e);
    if (!sources_.empty() && features.size(0) != sources_.front().features.size(0))
        throw std::invalid_argument("windows: episodes differ in DoF layout");
    sources_.push_back({features, e.W.to(torch::kFloat64).contiguous()});
    const size_t src = sources_.size() - 1;
    for (int64_t t = history_ - 1; t + horizon_ <= steps - 1; t += stride)
        index_.emplace_back(src, t);
}

WindowSample WindowSet::sample(size_t i) const
{
    const size_t ids[] = {i};
    auto b = batch(ids);
    WindowSample s;
    s.x = b.x[0];
    s.W_trend = b.W_trend[0];
    s.W_res = b.W_res[0];
    s.W_future = b.W_future[0];
    s.t_index = index_.at(i).second;
    return s;
}

Batch WindowSet::batch(std::span<const size_t> ids) const
{
    std::vector<torch::Tensor> xs, futures, now;
    xs.reserve(ids.size());
    futures.reserve(ids.size());
    now.reserve(ids.size());
    for (size_t i : ids) {
        const auto& [src, t] = index_.at(i);
        const auto& s = sources_[src];
        xs.push_back(s.features.slice(1, t - history_ + 1, t + 1));
        futures.push_back(s.W.slice(1, t + 1, t + 1 + horizon_));
        now.push_back(s.W.select(1, t));
    }
    Batch b;
    b.x = torch::stack(xs);
    b.W_future = torch::stack(futures);
    b.W_trend = spectral::lowpass(b.W_future, spec_);
    b.W_res = b.W_future - b.W_trend;
    b.W_now = torch::stack(now);
    return b;
}

std::vector<WindowSample> make_windows(const Episode& e, int history, int horizon, int stride,
                                       const FilterSpec& spec)
{
    WindowSet set(history, horizon, spec);
    set.add_episode(e, stride);
    std::vector<WindowSample> out;
    out.reserve(set.size());
    for (size_t i = 0; i < set.size(); ++i)
        out.push_back(set.sample(i));
    return out;
}

namespace {

struct Moments {
    torch::Tensor sum, sumsq;
    double count = 0.0;

    void add(const torch::Tensor& rows_by_samples)  // [R x K]
    {
        auto s = rows_by_samples.sum(1);
        auto s2 = rows_by_samples.pow(2).sum(1);
        sum = sum.defined() ? sum + s : s;
        sumsq = sumsq.defined() ? sumsq + s2 : s2;
        count += static_cast<double>(rows_by_samples.size(1));
    }

    std::pair<torch::Tensor, torch::Tensor> finish() const
    {
        auto mean = sum / count;
        auto var = (sumsq / count - mean.pow(2)).clamp_min(0.0);
        return {mean, var.sqrt()};
    }
};

void guard_std(torch::Tensor& mean, torch::Tensor& stddev, const std::vector<bool>& inactive, const char* what)
{
    for (int64_t r = 0; r < stddev.size(0); ++r) {
        if (r < static_cast<int64_t>(inactive.size()) && inactive[static_cast<size_t>(r)]) {
            mean[r] = 0.0;
            stddev[r] = 1.0;
        } else if (stddev[r].item<double>() < 1e-8) {
            log::warn(std::string("fit_norm: zero-variance ") + what + " row " + std::to_string(r) +
                      ", std clamped to 1e-8");
            stddev[r] = 1e-8;
        }
    }
}

NormStats finish_stats(const Moments& x, const Moments& abs_q, const Moments& w, int n,
                       const std::vector<bool>& inactive_rows)
{
    if (!inactive_rows.empty() && inactive_rows.size() != static_cast<size_t>(5 * n))
        throw std::invalid_argument("fit_norm: inactive row mask must have 5n entries");
    NormStats st;
    std::tie(st.x_mean, st.x_std) = x.finish();
    std::tie(st.abs_q_mean, st.abs_q_std) = abs_q.finish();
    std::tie(st.w_mean, st.w_std) = w.finish();
    guard_std(st.x_mean, st.x_std, inactive_rows, "input");
    std::vector<bool> inactive_q(inactive_rows.begin(),
                                 inactive_rows.empty() ? inactive_rows.begin() : inactive_rows.begin() + n);
    guard_std(st.abs_q_mean, st.abs_q_std, inactive_q, "position");
    guard_std(st.w_mean, st.w_std, {}, "wrench");
    return st;
}

void accumulate(Moments& x, Moments& abs_q, Moments& w, const torch::Tensor& xb, const torch::Tensor& wb, int n)
{
    // xb [B x 5n x L], wb [B x 6 x T]
    auto rows = xb.permute({1, 0, 2}).reshape({xb.size(1), -1});
    x.add(rows);
    abs_q.add(rows.slice(0, 0, n) + rows.slice(0, 4 * n, 5 * n));
    w.add(wb.permute({1, 0, 2}).reshape({6, -1}));
}

}  // namespace

NormStats fit_norm(const WindowSet& samples, const std::vector<bool>& inactive_rows)
{
    if (samples.size() < 2)
        throw std::invalid_argument("fit_norm: need at least 2 samples");
    const int n = samples.input_rows() / 5;
    Moments x, abs_q, w;
    constexpr size_t chunk = 512;
    std::vector<size_t> ids;
    for (size_t start = 0; start < samples.size(); start += chunk) {
        ids.clear();
        for (size_t i = start; i < std::min(samples.size(), start + chunk); ++i)
            ids.push_back(i);
        auto b = samples.batch(ids);
        accumulate(x, abs_q, w, b.x, b.W_future, n);
    }
    return finish_stats(x, abs_q, w, n, inactive_rows);
}

NormStats fit_norm(std::span<const WindowSample> samples, const std::vector<bool>& inactive_rows)
{
    if (samples.size() < 2)
        throw std::invalid_argument("fit_norm: need at least 2 samples");
    const int n = static_cast<int>(samples.front().x.size(0)) / 5;
    std::vector<torch::Tensor> xs, ws;
    for (const auto& s : samples) {
        xs.push_back(s.x.to(torch::kFloat64));
        ws.push_back(s.W_future.to(torch::kFloat64));
    }
    Moments x, abs_q, w;
    accumulate(x, abs_q, w, torch::stack(xs), torch::stack(ws), n);
    return finish_stats(x, abs_q, w, n, inactive_rows);
}

namespace {

torch::Tensor column(const torch::Tensor& v, const torch::Tensor& like)
{
    return v.to(like.scalar_type()).unsqueeze(1);
}

}  // namespace

torch::Tensor apply_norm(const torch::Tensor& x, const NormStats& stats)
{
    return (x - column(stats.x_mean, x)) / column(stats.x_std, x);
}

torch::Tensor invert_norm(const torch::Tensor& x, const NormStats& stats)
{
    return x * column(stats.x_std, x) + column(stats.x_mean, x);
}

torch::Tensor normalize_wrench(const torch::Tensor& w, const NormStats& stats)
{
    return (w - column(stats.w_mean, w)) / column(stats.w_std, w);
}

torch::Tensor denormalize_wrench(const torch::Tensor& w, const NormStats& stats)
{
    return w * column(stats.w_std, w) + column(stats.w_mean, w);
}

torch::Tensor scale_wrench(const torch::Tensor& w, const NormStats& stats)
{
    return w * column(stats.w_std, w);
}

torch::Tensor absolute_inputs(const torch::Tensor& x_raw, const NormStats& stats)
{
    const int64_t n = stats.dof();
    const int64_t axis = x_raw.dim() - 2;
    auto q = x_raw.narrow(axis, 0, n) + x_raw.narrow(axis, 4 * n, n);
    auto q_norm = (q - column(stats.abs_q_mean, q)) / column(stats.abs_q_std, q);
    auto rest = x_raw.narrow(axis, n, 3 * n);
    auto rest_norm = (rest - column(stats.x_mean.slice(0, n, 4 * n), rest)) /
                     column(stats.x_std.slice(0, n, 4 * n), rest);
    return torch::cat({q_norm, rest_norm}, axis);
}

Split split_episodes(std::span<const Episode> episodes, const SplitPolicy& policy)
{
    if (episodes.size() < 2)
        throw std::invalid_argument("split: need at least 2 episodes");
    if (!(policy.test_fraction > 0.0 && policy.test_fraction < 1.0))
        throw std::invalid_argument("split: test fraction must lie in (0, 1)");

    std::map<std::string, std::vector<size_t>> sessions;
    for (size_t i = 0; i < episodes.size(); ++i)
        sessions[episodes[i].session].push_back(i);

    std::mt19937_64 rng(policy.seed);
    Split split;
    for (auto& [name, members] : sessions) {
        std::shuffle(members.begin(), members.end(), rng);
        const auto k = static_cast<size_t>(std::llround(static_cast<double>(members.size()) * policy.test_fraction));
        split.test.insert(split.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
        split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
    }
    if (split.test.empty()) {
        split.test.push_back(split.train.back());
        split.train.pop_back();
    }
    if (split.train.empty()) {
        split.train.push_back(split.test.back());
        split.test.pop_back();
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

namespace {

const char* const kWrenchNames[6] = {"fx", "fy", "fz", "mx", "my", "mz"};

std::filesystem::path sidecar_path(const std::filesystem::path& csv)
{
    auto p = csv;
    p.replace_extension(".meta");
    return p;
}

std::string join(const torch::Tensor& v)
{
    auto flat = v.to(torch::kFloat64).contiguous().view(-1);
    std::ostringstream os;
    os.precision(17);
    for (int64_t i = 0; i < flat.size(0); ++i)
        os << (i ? "," : "") << flat[i].item<double>();
    return os.str();
}

std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path)
{
    std::map<std::string, std::string> kv;
    std::ifstream in(path);
    if (!in)
        return kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (line.empty() || line[0] == '#' || eq == std::string::npos)
            continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

}  // namespace

void save_episode(const Episode& e, const std::filesystem::path& csv_path, const std::optional<SynthConfig>& synth)
{
    e.validate();
    const int n = e.dof();
    std::ofstream out(csv_path);
    if (!out)
        throw std::runtime_error("cannot write " + csv_path.string());
    out << 't';
    for (int j = 1; j <= n; ++j)
        out << ",q" << j;
    for (int j = 1; j <= n; ++j)
        out << ",u" << j;
    for (const char* name : kWrenchNames)
        out << ',' << name;
    // Preprocessed episodes carry their derivative estimates as trailing columns.
    std::vector<torch::Tensor> blocks = {e.t.unsqueeze(0), e.q, e.u, e.W};
    if (e.preprocessed()) {
        for (int j = 1; j <= n; ++j)
            out << ",qd" << j;
        for (int j = 1; j <= n; ++j)
            out << ",qdd" << j;
        blocks.push_back(e.qd);
        blocks.push_back(e.qdd);
    }
    out << '\n';

    auto rows = torch::cat(blocks, 0).to(torch::kFloat64).t().contiguous();
    const auto* data = rows.data_ptr<double>();
    const int64_t cols = rows.size(1);
    char buf[32];
    for (int64_t r = 0; r < rows.size(0); ++r) {
        for (int64_t c = 0; c < cols; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", data[r * cols + c]);
            if (c)
                out << ',';
            out << buf;
        }
        out << '\n';
    }

    std::ofstream meta(sidecar_path(csv_path));
    meta.precision(17);
    meta << "name = " << e.name << '\n'
         << "sample_rate = " << e.sample_rate << '\n'
         << "session = " << e.session << '\n'
         << "n = " << n << '\n'
         << "static_end_s = " << e.static_end_s << '\n'
         << "q0 = " << join(e.q0) << '\n'
         << "preprocessed = " << (e.preprocessed() ? 1 : 0) << '\n';
    if (e.meta)
        meta << "seed = " << e.meta->seed << '\n';
    if (synth) {
        const auto& c = *synth;
        meta << "synth.dof = " << c.dof << '\n'
             << "synth.duration_s = " << c.duration_s << '\n'
             << "synth.static_s = " << c.static_s << '\n'
             << "synth.ramp_s = " << c.ramp_s << '\n'
             << "synth.trend_seed = " << c.trend_seed << '\n'
             << "synth.envelope_seed = " << c.envelope_seed << '\n'
             << "synth.trend_band_hz = " << c.trend_band_hz << '\n'
             << "synth.cutoff_hz = " << c.filter.cutoff_hz << '\n'
             << "synth.denoise_cutoff_hz = " << c.filter.denoise_cutoff_hz << '\n'
             << "synth.order = " << c.filter.order << '\n'
             << "synth.trend_gain = " << c.trend_gain << '\n'
             << "synth.trend_force_n = " << c.trend_force_n << '\n'
             << "synth.trend_torque_nm = " << c.trend_torque_nm << '\n'
             << "synth.q_noise_rad = " << c.q_noise_rad << '\n'
             << "synth.u_noise = " << c.u_noise << '\n'
             << "synth.wrench_noise = " << c.wrench_noise << '\n'
             << "synth.wrench_offset = " << c.wrench_offset << '\n'
             << "sigma.reference_force_n = " << c.residual_force_n << '\n'
             << "sigma.reference_torque_nm = " << c.residual_torque_nm << '\n'
             << "sigma.envelope_gain = " << c.envelope_gain << '\n';
        if (e.meta)
            meta << "sigma.B = " << join(e.meta->envelope_map) << '\n';
    }
}

std::optional<std::pair<SynthConfig, uint64_t>> load_synth_provenance(const std::filesystem::path& csv_path)
{
    auto kv = read_sidecar(sidecar_path(csv_path));
    if (!kv.count("synth.dof") || !kv.count("seed"))
        return std::nullopt;
    auto num = [&](const char* k) { return std::stod(kv.at(k)); };
    SynthConfig c;
    c.dof = std::stoi(kv.at("synth.dof"));
    c.sample_rate = num("sample_rate");
    c.duration_s = num("synth.duration_s");
    c.static_s = num("synth.static_s");
    c.ramp_s = num("synth.ramp_s");
    c.trend_seed = std::stoull(kv.at("synth.trend_seed"));
    c.envelope_seed = std::stoull(kv.at("synth.envelope_seed"));
    c.trend_band_hz = num("synth.trend_band_hz");
    c.filter.cutoff_hz = num("synth.cutoff_hz");
    c.filter.denoise_cutoff_hz = num("synth.denoise_cutoff_hz");
    c.filter.order = std::stoi(kv.at("synth.order"));
    c.filter.sample_rate = c.sample_rate;
    c.trend_gain = num("synth.trend_gain");
    c.trend_force_n = num("synth.trend_force_n");
    c.trend_torque_nm = num("synth.trend_torque_nm");
    c.q_noise_rad = num("synth.q_noise_rad");
    c.u_noise = num("synth.u_noise");
    c.wrench_noise = num("synth.wrench_noise");
    c.wrench_offset = num("synth.wrench_offset");
    c.residual_force_n = num("sigma.reference_force_n");
    c.residual_torque_nm = num("sigma.reference_torque_nm");
    c.envelope_gain = num("sigma.envelope_gain");
    return std::make_pair(c, static_cast<uint64_t>(std::stoull(kv.at("seed"))));
}

Episode load_episode(const std::filesystem::path& csv_path)
{
    std::ifstream in(csv_path);
    if (!in)
        throw std::runtime_error("cannot read " + csv_path.string());
    std::string header;
    std::getline(in, header);
    auto kv = read_sidecar(sidecar_path(csv_path));
    const bool preprocessed = kv.count("preprocessed") && kv["preprocessed"] == "1";
    const auto columns = std::count(header.begin(), header.end(), ',') + 1;
    const int64_t per_joint = preprocessed ? 4 : 2;
    if (columns < 7 + per_joint || (columns - 7) % per_joint != 0 || header.rfind("t,", 0) != 0)
        throw std::runtime_error(csv_path.string() + ": header must be t,q1..qn,u1..un,fx,fy,fz,mx,my,mz");
    const int n = static_cast<int>((columns - 7) / per_joint);

    std::vector<double> values;
    std::string line;
    int64_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const char* p = line.c_str();
        for (int64_t c = 0; c < columns; ++c) {
            char* end = nullptr;
            values.push_back(std::strtod(p, &end));
            if (end == p)
                throw std::runtime_error(csv_path.string() + ": malformed row " + std::to_string(rows + 2));
            p = (*end == ',') ? end + 1 : end;
        }
        ++rows;
    }
    auto table = torch::from_blob(values.data(), {rows, columns}, kF64).clone().t().contiguous();

    Episode e;
    e.name = csv_path.stem().string();
    e.t = table[0].clone();
    e.q = table.slice(0, 1, 1 + n).clone();
    e.u = table.slice(0, 1 + n, 1 + 2 * n).clone();
    e.W = table.slice(0, 1 + 2 * n, 7 + 2 * n).clone();
    if (preprocessed) {
        e.qd = table.slice(0, 7 + 2 * n, 7 + 3 * n).clone();
        e.qdd = table.slice(0, 7 + 3 * n, 7 + 4 * n).clone();
    }

    e.sample_rate = kv.count("sample_rate") ? std::stod(kv["sample_rate"])
                                            : 1.0 / (e.t[1].item<double>() - e.t[0].item<double>());
    if (kv.count("name"))
        e.name = kv["name"];
    if (kv.count("session"))
        e.session = kv["session"];
    if (kv.count("static_end_s"))
        e.static_end_s = std::stod(kv["static_end_s"]);
    if (kv.count("q0")) {
        std::vector<double> q0;
        std::stringstream ss(kv["q0"]);
        std::string item;
        while (std::getline(ss, item, ','))
            q0.push_back(std::stod(item));
        if (q0.size() == static_cast<size_t>(n))
            e.q0 = torch::tensor(q0, kF64);
    }
    if (!e.q0.defined())
        e.q0 = e.q.select(1, 0).clone();
    if (auto prov = load_synth_provenance(csv_path)) {
        auto regenerated = synth_episode(prov->first, prov->second);
        if (regenerated.steps() == e.steps())
            e.meta = regenerated.meta;
    }
    e.validate();
    return e;
}

std::vector<Episode> load_directory(const std::filesystem::path& dir)
{
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    std::vector<Episode> episodes;
    for (const auto& f : files)
        episodes.push_back(load_episode(f));
    return episodes;
}

}  // namespace fdn::dataset
