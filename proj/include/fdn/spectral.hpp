#pragma once

#include <torch/torch.h>

#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace fdn::spectral {

/// Cutoffs and order of the zero-phase FFT filters.
///
/// `cutoff_hz` separates trend from residual, `denoise_cutoff_hz` bounds the
/// residual band from above. Both must lie in (0, Nyquist).
struct FilterSpec {
    double cutoff_hz = 1.0;
    double denoise_cutoff_hz = 15.0;
    int order = 8;
    double sample_rate = 100.0;

    double nyquist() const { return sample_rate / 2.0; }

    /// Throws std::invalid_argument unless 0 < f_c <= f_c_dn < Nyquist and order >= 1.
    void validate() const;

    /// Same filter with both cutoffs set to `f` (used when a head is ablated).
    FilterSpec with_cutoff(double f) const;
};

/// Multichannel, uniformly sampled signal. `values` is [channels x steps], float64.
struct Series {
    torch::Tensor values;
    double sample_rate = 100.0;

    int64_t channels() const { return values.size(0); }
    int64_t steps() const { return values.size(1); }

    /// Throws if the shape is not 2-D, steps < 2, or any value is non-finite.
    void validate() const;
};

/// Amplitude response 1/sqrt(1 + (f/f_c)^(2r)).
double lowpass_response(double f, double cutoff_hz, int order);
double lowpass_response(double f, const FilterSpec& spec);

/// Band-pass response (1 - H_l(f; f_c)) * H_l(f; f_c_dn).
double highpass_response(double f, const FilterSpec& spec);

using Response = std::function<double(double)>;

/// Frequencies of the one-sided real-FFT bins for a length-`n` transform.
std::vector<double> rfft_frequencies(int64_t n, double sample_rate);

/// Applies a real, zero-phase response along the last axis of `x`.
///
/// The signal is extended by a full-length mirror image on each side, filtered
/// in the frequency domain and center-cropped. Any leading batch dimensions are
/// allowed. Differentiable with respect to `x`.
torch::Tensor apply_response(const torch::Tensor& x, double sample_rate, const Response& response);

torch::Tensor lowpass(const torch::Tensor& x, const FilterSpec& spec);
torch::Tensor highpass(const torch::Tensor& x, const FilterSpec& spec);

Series fpf_low(const Series& s, const FilterSpec& spec);
Series fpf_high(const Series& s, const FilterSpec& spec);

struct Decomposition {
    Series trend;
    Series residual;
};

/// trend = fpf_low(w), residual = w - trend.
Decomposition decompose(const Series& w, const FilterSpec& spec);

struct EnergySpectrum {
    torch::Tensor energy;           // [channels x bins]
    std::vector<double> frequencies; // Hz, one per bin
};

/// Mean |FFT|^2 per channel over windows that are each normalized to zero mean
/// and unit variance per channel. Constant channels contribute all-zero rows.
EnergySpectrum energy_spectrum(std::span<const Series> windows);

/// Fraction of the spectrum's total energy in bins strictly above `f_hz`, per channel.
torch::Tensor energy_fraction_above(const EnergySpectrum& spectrum, double f_hz);

}  // namespace fdn::spectral
