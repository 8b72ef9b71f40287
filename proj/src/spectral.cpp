#include "fdn/spectral.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fdn::spectral {

void FilterSpec::validate() const
{
    if (!(sample_rate > 0.0))
        throw std::invalid_argument("filter: sample_rate must be positive");
    if (!(cutoff_hz > 0.0 && cutoff_hz <= denoise_cutoff_hz && denoise_cutoff_hz < nyquist())) {
        std::ostringstream os;
        os << "filter: require 0 < f_c <= f_c_dn < Nyquist, got f_c=" << cutoff_hz
           << " f_c_dn=" << denoise_cutoff_hz << " Nyquist=" << nyquist();
        throw std::invalid_argument(os.str());
    }
    if (order < 1)
        throw std::invalid_argument("filter: order must be >= 1");
}

FilterSpec FilterSpec::with_cutoff(double f) const
{
    FilterSpec out = *this;
    out.cutoff_hz = f;
    out.denoise_cutoff_hz = f;
    return out;
}

void Series::validate() const
{
    if (!values.defined() || values.dim() != 2)
        throw std::invalid_argument("series: values must be a [channels x steps] matrix");
    if (values.size(1) < 2)
        throw std::invalid_argument("series: need at least 2 steps");
    if (!torch::isfinite(values).all().item<bool>())
        throw std::invalid_argument("series: non-finite value");
    if (!(sample_rate > 0.0))
        throw std::invalid_argument("series: sample_rate must be positive");
}

namespace {

// (f/f_c)^(2r)
double ratio_power(double f, double cutoff_hz, int order)
{
    return std::pow(f / cutoff_hz, 2.0 * order);
}

void check_frequency(double f, double nyquist)
{
    if (!(f >= 0.0 && f <= nyquist)) {
        std::ostringstream os;
        os << "frequency " << f << " Hz outside [0, " << nyquist << "]";
        throw std::domain_error(os.str());
    }
}

}  // namespace

double lowpass_response(double f, double cutoff_hz, int order)
{
    return 1.0 / std::sqrt(1.0 + ratio_power(f, cutoff_hz, order));
}

double lowpass_response(double f, const FilterSpec& spec)
{
    check_frequency(f, spec.nyquist());
    return lowpass_response(f, spec.cutoff_hz, spec.order);
}

double highpass_response(double f, const FilterSpec& spec)
{
    check_frequency(f, spec.nyquist());
    // 1 - 1/sqrt(1+x) rewritten as x / (sqrt(1+x) (1 + sqrt(1+x))) to avoid
    // cancellation far below the cutoff.
    const double x = ratio_power(f, spec.cutoff_hz, spec.order);
    const double s = std::sqrt(1.0 + x);
    const double complement = x / (s * (1.0 + s));
    return complement * lowpass_response(f, spec.denoise_cutoff_hz, spec.order);
}

std::vector<double> rfft_frequencies(int64_t n, double sample_rate)
{
    std::vector<double> freqs(static_cast<size_t>(n / 2 + 1));
    for (size_t k = 0; k < freqs.size(); ++k)
        freqs[k] = static_cast<double>(k) * sample_rate / static_cast<double>(n);
    return freqs;
}

torch::Tensor apply_response(const torch::Tensor& x, double sample_rate, const Response& response)
{
    const int64_t steps = x.size(-1);
    if (steps < 4)
        throw std::invalid_argument("filter: need at least 4 steps");

    auto mirrored = x.flip(-1);
    auto padded = torch::cat({mirrored, x, mirrored}, -1);
    const int64_t n = padded.size(-1);

    auto freqs = rfft_frequencies(n, sample_rate);
    std::vector<double> gains(freqs.size());
    for (size_t k = 0; k < freqs.size(); ++k)
        gains[k] = response(freqs[k]);
    auto gain = torch::tensor(gains, torch::TensorOptions().dtype(torch::kFloat64)).to(x.scalar_type());

    auto spectrum = torch::fft::rfft(padded, n, -1);
    auto filtered = torch::fft::irfft(spectrum * gain, n, -1);
    return filtered.narrow(-1, steps, steps);
}

torch::Tensor lowpass(const torch::Tensor& x, const FilterSpec& spec)
{
    return apply_response(x, spec.sample_rate, [&](double f) {
        return lowpass_response(f, spec.cutoff_hz, spec.order);
    });
}

torch::Tensor highpass(const torch::Tensor& x, const FilterSpec& spec)
{
    return apply_response(x, spec.sample_rate, [&](double f) { return highpass_response(f, spec); });
}

namespace {

void check_series(const Series& s, const FilterSpec& spec)
{
    s.validate();
    spec.validate();
    if (s.steps() < 4)
        throw std::invalid_argument("filter: need at least 4 steps");
    if (std::abs(s.sample_rate - spec.sample_rate) > 1e-9 * spec.sample_rate)
        throw std::invalid_argument("filter: series and filter sample rates differ");
}

}  // namespace

Series fpf_low(const Series& s, const FilterSpec& spec)
{
    check_series(s, spec);
    return {lowpass(s.values, spec), s.sample_rate};
}

Series fpf_high(const Series& s, const FilterSpec& spec)
{
    check_series(s, spec);
    return {highpass(s.values, spec), s.sample_rate};
}

Decomposition decompose(const Series& w, const FilterSpec& spec)
{
    auto trend = fpf_low(w, spec);
    Series residual{w.values - trend.values, w.sample_rate};
    return {std::move(trend), std::move(residual)};
}

EnergySpectrum energy_spectrum(std::span<const Series> windows)
{
    if (windows.empty())
        throw std::invalid_argument("energy_spectrum: no windows");
    const auto shape = windows.front().values.sizes().vec();
    const double rate = windows.front().sample_rate;

    torch::Tensor total;
    for (const auto& w : windows) {
        w.validate();
        if (w.values.sizes().vec() != shape)
            throw std::invalid_argument("energy_spectrum: windows differ in shape");
        auto v = w.values.to(torch::kFloat64);
        auto centered = v - v.mean(1, true);
        auto stddev = centered.pow(2).mean(1, true).sqrt();
        // Zero-variance channels stay all-zero.
        auto normalized = torch::where(stddev > 0.0, centered / stddev.clamp_min(1e-300), torch::zeros_like(centered));
        auto energy = torch::fft::rfft(normalized, c10::nullopt, 1).abs().pow(2);
        total = total.defined() ? total + energy : energy;
    }
    total /= static_cast<double>(windows.size());
    return {total, rfft_frequencies(shape[1], rate)};
}

torch::Tensor energy_fraction_above(const EnergySpectrum& spectrum, double f_hz)
{
    std::vector<uint8_t> above(spectrum.frequencies.size());
    for (size_t k = 0; k < above.size(); ++k)
        above[k] = spectrum.frequencies[k] > f_hz ? 1 : 0;
    auto mask = torch::tensor(std::vector<double>(above.begin(), above.end()), torch::kFloat64);
    auto high = (spectrum.energy * mask).sum(1);
    auto all = spectrum.energy.sum(1).clamp_min(1e-300);
    return high / all;
}

}  // namespace fdn::spectral
