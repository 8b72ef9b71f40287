#pragma once

#include "fdn/spectral.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fdn::dataset {

using spectral::FilterSpec;
using spectral::Series;

/// Parameters of the synthetic vibration-rich episode generator.
///
/// The trend map and the residual envelope are drawn per joint from
/// `trend_seed` / `envelope_seed`, so episodes with different DoF counts share
/// the structure of their common joints.
struct SynthConfig {
    int dof = 6;
    double duration_s = 180.0;
    double sample_rate = 100.0;
    double static_s = 5.0;  // constant head segment used for offset removal
    double ramp_s = 2.0;    // smooth onset of motion and contact after the static segment

    uint64_t trend_seed = 11;
    uint64_t envelope_seed = 23;

    double trend_band_hz = 0.5;  // must be <= filter.cutoff_hz
    FilterSpec filter{};          // residual band is (cutoff_hz, denoise_cutoff_hz]

    double trend_gain = 0.3;  // input scale of the tanh trend map
    double trend_force_n = 100.0;
    double trend_torque_nm = 30.0;

    // sigma = ref * exp(envelope_gain * B [dq; qd]), B ~ N(0, 1/(2n)) per entry
    double residual_force_n = 40.0;
    double residual_torque_nm = 12.0;
    double envelope_gain = 1.5;

    double q_noise_rad = 1e-4;
    double u_noise = 0.01;
    double wrench_noise = 0.5;
    double wrench_offset = 5.0;  // max |sensor offset| per channel

    void validate() const;
};

/// Ground truth recorded by the synthetic generator.
struct SynthMeta {
    uint64_t seed = 0;
    torch::Tensor qd;        // analytic joint velocity [n x steps]
    torch::Tensor qdd;       // analytic joint acceleration [n x steps]
    torch::Tensor sigma;     // residual standard deviation [6 x steps]
    torch::Tensor trend;     // noiseless trend [6 x steps]
    torch::Tensor residual;  // sigma-modulated band noise [6 x steps]
    torch::Tensor offset;    // sensor offset [6]
    torch::Tensor envelope_map;  // B, [6 x 2n]
};

/// Uniformly sampled record of one run.
struct Episode {
    std::string name;
    std::string session;
    double sample_rate = 100.0;
    double static_end_s = -1.0;  // < 0: no static segment marked

    torch::Tensor t;  // [steps], seconds
    torch::Tensor q;  // [n x steps], rad
    torch::Tensor u;  // [n x steps]
    torch::Tensor W;  // [6 x steps], N / Nm
    torch::Tensor q0; // [n]

    /// Wrench clock, when it differs from `t`. Consumed by preprocess_episode.
    torch::Tensor wrench_t;

    /// Filled by preprocess_episode.
    torch::Tensor qd;
    torch::Tensor qdd;

    std::optional<SynthMeta> meta;

    int dof() const { return static_cast<int>(q.size(0)); }
    int64_t steps() const { return q.size(1); }
    bool preprocessed() const { return qd.defined() && qdd.defined(); }

    void validate() const;
};

Episode synth_episode(const SynthConfig& cfg, uint64_t seed);

/// Causal Savitzky-Golay smoothing/differentiation.
///
/// Output at step t is the `deriv`-th derivative (per second) of the least-squares
/// polynomial through samples [t-window+1, t]. During warm-up the fit uses the
/// available prefix with order min(order, samples-1).
Series savitzky_golay_causal(const Series& s, int window, int order, int deriv);

struct SavGolConfig {
    int window = 11;
    int order = 3;
};

/// Holds the most recent source sample at or before each destination time.
torch::Tensor zoh_align(const torch::Tensor& source_t, const torch::Tensor& source_values,
                        const torch::Tensor& dest_t);

/// Subtracts the per-channel mean over samples with t < static_end_s.
torch::Tensor remove_static_offset(const torch::Tensor& W, const torch::Tensor& t, double static_end_s);

/// Denoise q/u, estimate qd/qdd, align and de-offset the wrench, denoise W.
Episode preprocess_episode(const Episode& raw, const FilterSpec& spec, const SavGolConfig& sg = {});

/// Appends zero joints so the episode uses an `n`-DoF layout.
Episode pad_dof(const Episode& e, int n);

/// Model input rows for every step: [dq; qd; qdd; u; q0] ([5n x steps]).
torch::Tensor episode_features(const Episode& e);

/// One (history, future) training pair.
struct WindowSample {
    torch::Tensor x;         // [5n x L]
    torch::Tensor W_future;  // [6 x T]
    torch::Tensor W_trend;
    torch::Tensor W_res;
    int64_t t_index = 0;     // prediction time (last history step)
};

/// Batched windows, already in the dtype requested by the caller.
struct Batch {
    torch::Tensor x;        // [B x 5n x L]
    torch::Tensor W_future; // [B x 6 x T]
    torch::Tensor W_trend;  // [B x 6 x T]
    torch::Tensor W_res;    // [B x 6 x T]
    torch::Tensor W_now;    // [B x 6], wrench at the prediction time
    int64_t size() const { return x.size(0); }
};

/// Lazily materialized windows over a set of preprocessed episodes.
class WindowSet {
public:
    WindowSet(int history, int horizon, FilterSpec spec);

    void add_episode(const Episode& e, int stride);

    size_t size() const { return index_.size(); }
    int history() const { return history_; }
    int horizon() const { return horizon_; }
    int input_rows() const;

    WindowSample sample(size_t i) const;
    Batch batch(std::span<const size_t> ids) const;

private:
    struct Source {
        torch::Tensor features;
        torch::Tensor W;
    };

    int history_;
    int horizon_;
    FilterSpec spec_;
    std::vector<Source> sources_;
    std::vector<std::pair<size_t, int64_t>> index_;
};

/// All windows of one episode. Too-short episodes give an empty list and a warning.
std::vector<WindowSample> make_windows(const Episode& e, int history, int horizon, int stride,
                                       const FilterSpec& spec);

/// Per-row normalization statistics for model inputs and wrench targets.
struct NormStats {
    torch::Tensor x_mean, x_std;        // [5n]
    torch::Tensor abs_q_mean, abs_q_std; // [n], absolute joint positions (baseline inputs)
    torch::Tensor w_mean, w_std;        // [6]

    int dof() const { return static_cast<int>(abs_q_mean.size(0)); }
};

/// `inactive_rows` (length 5n, optional) marks rows left at mean 0 / std 1.
NormStats fit_norm(const WindowSet& samples, const std::vector<bool>& inactive_rows = {});
NormStats fit_norm(std::span<const WindowSample> samples, const std::vector<bool>& inactive_rows = {});

/// x is [..., 5n, L] (or [5n, L]).
torch::Tensor apply_norm(const torch::Tensor& x, const NormStats& stats);
torch::Tensor invert_norm(const torch::Tensor& x, const NormStats& stats);

/// Wrench tensors [..., 6, T] in physical units <-> normalized.
torch::Tensor normalize_wrench(const torch::Tensor& w, const NormStats& stats);
torch::Tensor denormalize_wrench(const torch::Tensor& w, const NormStats& stats);
/// Scales only (no offset), for residuals and standard deviations.
torch::Tensor scale_wrench(const torch::Tensor& w, const NormStats& stats);

/// Normalized absolute-position inputs [q; qd; qdd; u] ([..., 4n, L]) from raw
/// relative-position inputs; the convention used by the baselines.
torch::Tensor absolute_inputs(const torch::Tensor& x_raw, const NormStats& stats);

struct SplitPolicy {
    double test_fraction = 1.0 / 3.0;
    uint64_t seed = 0;
};

struct Split {
    std::vector<size_t> train;
    std::vector<size_t> test;
};

/// Episode-level split, stratified by session when sessions are labeled.
Split split_episodes(std::span<const Episode> episodes, const SplitPolicy& policy = {});

/// CSV + sidecar writer/reader. The CSV header is t,q1..qn,u1..un,fx,fy,fz,mx,my,mz.
void save_episode(const Episode& e, const std::filesystem::path& csv_path,
                  const std::optional<SynthConfig>& synth = std::nullopt);
Episode load_episode(const std::filesystem::path& csv_path);

/// Reads the synthetic generator settings back from a sidecar, if present.
std::optional<std::pair<SynthConfig, uint64_t>> load_synth_provenance(const std::filesystem::path& csv_path);

/// All *.csv episodes in a directory, sorted by file name.
std::vector<Episode> load_directory(const std::filesystem::path& dir);

}  // namespace fdn::dataset
