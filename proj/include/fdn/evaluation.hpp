#pragma once

#include "fdn/baselines.hpp"
#include "fdn/dataset.hpp"
#include "fdn/model.hpp"
#include "fdn/spectral.hpp"

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fdn::evaluation {

using spectral::Series;

enum class DelayMode { ZohPoint, DelayCompensated };

std::string to_string(DelayMode mode);

struct DelaySpec {
    double delay_ms = 100.0;
    DelayMode mode = DelayMode::DelayCompensated;

    /// Delay in samples; throws unless it is a nonnegative multiple of the sample period.
    int64_t steps(double sample_rate) const;
};

/// Forecast or point estimate in physical units.
struct Prediction {
    torch::Tensor mean;   // [B x 6 x T] (forecasters, index j is t+1+j) or [B x 6 x 1] (point estimators)
    torch::Tensor sigma;  // same shape; undefined for deterministic models
};

/// Common interface of everything the harness can score.
class Estimator {
public:
    virtual ~Estimator() = default;
    virtual std::string name() const = 0;
    virtual bool pointwise() const = 0;
    virtual bool distributional() const = 0;
    virtual int history() const = 0;
    virtual int horizon() const = 0;  // 0 for point estimators
    /// Predictions issued at each listed step (the last observed sample).
    virtual Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) = 0;
    /// Set when the underlying parameters were never optimized.
    virtual bool untrained() const { return false; }
};

class FdnEstimator : public Estimator {
public:
    FdnEstimator(model::FDN net, dataset::NormStats stats, std::string name = "fdn", bool untrained = false);
    std::string name() const override { return name_; }
    bool pointwise() const override { return false; }
    bool distributional() const override { return true; }
    int history() const override;
    int horizon() const override;
    Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) override;
    bool untrained() const override { return untrained_; }

private:
    model::FDN net_;
    dataset::NormStats stats_;
    std::string name_;
    bool untrained_;
};

class BaselineEstimator : public Estimator {
public:
    BaselineEstimator(baselines::Baseline net, dataset::NormStats stats, bool untrained = false);
    std::string name() const override;
    bool pointwise() const override;
    bool distributional() const override;
    int history() const override;
    int horizon() const override;
    Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) override;
    bool untrained() const override { return untrained_; }

private:
    baselines::Baseline net_;
    dataset::NormStats stats_;
    bool untrained_;
};

/// Returns the true future of the episode being evaluated.
class OracleForecaster : public Estimator {
public:
    OracleForecaster(int history, int horizon) : history_(history), horizon_(horizon) {}
    std::string name() const override { return "oracle"; }
    bool pointwise() const override { return false; }
    bool distributional() const override { return false; }
    int history() const override { return history_; }
    int horizon() const override { return horizon_; }
    Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) override;

private:
    int history_;
    int horizon_;
};

/// Returns the true wrench at the estimation time.
class PointOracle : public Estimator {
public:
    explicit PointOracle(int history) : history_(history) {}
    std::string name() const override { return "point_oracle"; }
    bool pointwise() const override { return true; }
    bool distributional() const override { return false; }
    int history() const override { return history_; }
    int horizon() const override { return 0; }
    Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) override;

private:
    int history_;
};

/// Forecasts zero wrench everywhere.
class ZeroForecaster : public Estimator {
public:
    ZeroForecaster(int history, int horizon) : history_(history), horizon_(horizon) {}
    std::string name() const override { return "zero"; }
    bool pointwise() const override { return false; }
    bool distributional() const override { return false; }
    int history() const override { return history_; }
    int horizon() const override { return horizon_; }
    Prediction predict(const dataset::Episode& e, std::span<const int64_t> times) override;

private:
    int history_;
    int horizon_;
};

struct Reconstruction {
    torch::Tensor mean;   // [6 x steps]
    torch::Tensor sigma;  // [6 x steps], undefined for deterministic models
    torch::Tensor valid;  // [steps] bool
    int64_t first_valid = 0;
    int64_t delay_steps = 0;
};

/// One prediction point per input sample: horizon index k of the forecast
/// issued at t lands at t + k; a point estimate made at t - k stands in for t.
/// Steps before L + k are masked out.
Reconstruction reconstruct_episode(Estimator& est, const dataset::Episode& e, const DelaySpec& delay,
                                   int64_t chunk = 128);

/// Sliding-window RMS of each channel of x [C x steps] over w samples ([C x steps-w+1]).
torch::Tensor window_rms(const torch::Tensor& x, int64_t w);

/// RMSE between the sliding-window RMS tracks, per channel.
torch::Tensor wrmse(const Series& pred_res, const Series& true_res, int64_t w = 10);
/// Predicted window RMS from the expectation mean(mu^2 + sigma^2).
torch::Tensor wrmse_expected(const Series& mu_res, const Series& sigma, const Series& true_res, int64_t w = 10);
/// Pointwise RMSE of trends, per channel.
torch::Tensor prmse(const Series& pred_trend, const Series& true_trend);

double crps_point(double value, double obs);
double crps_gaussian(double mu, double sigma, double obs);
/// Integral of (F(x) - 1{x >= obs})^2 for the empirical CDF of the samples.
double crps_samples(std::span<const double> samples, double obs);
/// Elementwise Gaussian CRPS; sigma == 0 gives |obs - mu|.
torch::Tensor crps_gaussian(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& obs);

inline constexpr std::array<const char*, 6> kChannelNames = {"fx", "fy", "fz", "mx", "my", "mz"};

struct ChannelMetrics {
    std::array<double, 6> wrmse{};
    std::array<double, 6> prmse{};
    std::array<double, 6> crps{};

    double force(const std::array<double, 6>& m) const { return (m[0] + m[1] + m[2]) / 3.0; }
    double torque(const std::array<double, 6>& m) const { return (m[3] + m[4] + m[5]) / 3.0; }
    double all(const std::array<double, 6>& m) const { return (force(m) + torque(m)) / 2.0; }
};

struct MetricsReport {
    std::string model;
    std::string episode;
    double delay_ms = 0.0;
    DelayMode mode = DelayMode::DelayCompensated;
    bool distributional = false;
    ChannelMetrics physical;    // N / Nm
    ChannelMetrics normalized;  // divided by the training wrench std
};

struct EvalConfig {
    spectral::FilterSpec filter{};  // f_c used for the episode-level decomposition
    int64_t window = 10;            // wRMSE window w
};

/// Metrics of one reconstruction against the episode's wrench.
MetricsReport score(const Reconstruction& rec, const dataset::Episode& e, const EvalConfig& cfg,
                    const torch::Tensor& w_std);

/// One report per (episode, delay), in episode-major order. Forecasters use
/// delay-compensated placement and point estimators the ZOH protocol.
std::vector<MetricsReport> evaluate(Estimator& est, std::span<const dataset::Episode> episodes,
                                    std::span<const double> delays_ms, const EvalConfig& cfg,
                                    const torch::Tensor& w_std);

void write_report_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports);
/// Averages over episodes per (model, delay).
std::string summarize(std::span<const MetricsReport> reports);

/// SVG overlay of truth, reconstruction and the mean +- 3 sigma band.
void write_plot_svg(const std::filesystem::path& path, const dataset::Episode& e, const Reconstruction& rec,
                    const std::string& title);

}  // namespace fdn::evaluation
