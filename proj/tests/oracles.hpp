#pragma once

// Reference implementations used by the tests. They avoid the library code
// paths they check: high-precision arithmetic, explicit loops, quadrature.

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using hp = boost::multiprecision::cpp_bin_float_50;

inline hp lowpass(hp f, hp fc, int r)
{
    return 1 / sqrt(1 + pow(f / fc, 2 * r));
}

inline hp bandpass(hp f, hp fc, hp fdn, int r)
{
    return (1 - lowpass(f, fc, r)) * lowpass(f, fdn, r);
}

// RMS of x[t-w+1 .. t] for each t >= w-1, over a flat vector.
inline std::vector<double> window_rms(const std::vector<double>& x, int w)
{
    std::vector<double> out;
    for (size_t t = static_cast<size_t>(w - 1); t < x.size(); ++t) {
        double s = 0.0;
        for (int i = 0; i < w; ++i)
            s += x[t - static_cast<size_t>(i)] * x[t - static_cast<size_t>(i)];
        out.push_back(std::sqrt(s / w));
    }
    return out;
}

// Predicted window RMS from per-step second moments mu^2 + sigma^2.
inline std::vector<double> window_rms_expected(const std::vector<double>& mu, const std::vector<double>& sigma, int w)
{
    std::vector<double> out;
    for (size_t t = static_cast<size_t>(w - 1); t < mu.size(); ++t) {
        double s = 0.0;
        for (int i = 0; i < w; ++i) {
            const size_t j = t - static_cast<size_t>(i);
            s += mu[j] * mu[j] + sigma[j] * sigma[j];
        }
        out.push_back(std::sqrt(s / w));
    }
    return out;
}

inline double rmse(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / static_cast<double>(a.size()));
}

// CRPS as the integral of (F(x) - 1{x >= y})^2, by adaptive Gauss-Kronrod on
// both sides of the observation.
inline double crps_gaussian_quadrature(double mu, double sigma, double y)
{
    boost::math::normal_distribution<double> n(mu, sigma);
    auto below = [&](double x) {
        const double c = boost::math::cdf(n, x);
        return c * c;
    };
    auto above = [&](double x) {
        const double c = boost::math::cdf(boost::math::complement(n, x));
        return c * c;
    };
    using gk = boost::math::quadrature::gauss_kronrod<double, 61>;
    const double inf = std::numeric_limits<double>::infinity();
    return gk::integrate(below, -inf, y, 15, 1e-12) + gk::integrate(above, y, inf, 15, 1e-12);
}

// Trapezoid rule on [mu - 10, mu + 10] with step h.
inline double crps_gaussian_trapezoid(double mu, double sigma, double y, double h = 1e-4)
{
    boost::math::normal_distribution<double> n(mu, sigma);
    auto f = [&](double x) {
        const double c = boost::math::cdf(n, x) - (x >= y ? 1.0 : 0.0);
        return c * c;
    };
    const double a = mu - 10.0, b = mu + 10.0;
    const auto steps = static_cast<int64_t>(std::llround((b - a) / h));
    double s = 0.5 * (f(a) + f(b));
    for (int64_t i = 1; i < steps; ++i)
        s += f(a + static_cast<double>(i) * h);
    return s * h;
}

// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("fdn_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace oracle
