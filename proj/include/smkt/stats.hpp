#pragma once

#include <cstddef>
#include <utility>
#include <vector>

namespace smkt {

/// First three sample moments of a batch.
struct SampleMoments {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0;  // unbiased
    double skewness = 0.0;  // g1, biased form
};

SampleMoments sample_moments(const std::vector<double>& xs);

/// Empirical quantile with linear interpolation; sorts a copy.
double quantile(std::vector<double> xs, double q);
double median(std::vector<double> xs);

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
/// Degenerate inputs (both samples constant) fall back to an exact-match
/// comparison: p = 1 if the constants agree, 0 otherwise.
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

/// Wilson score interval for a binomial proportion.
struct WilsonInterval {
    double lower = 0.0;
    double upper = 1.0;
    double point = 0.0;
};
WilsonInterval wilson_interval(std::size_t successes, std::size_t trials, double z);

/// Standard normal quantile (Acklam's rational approximation, |err| < 1.2e-9).
double normal_quantile(double p);

/// Chi-square quantile via the Wilson-Hilferty cube approximation.
double chi_square_quantile(double p, double dof);

/// Index-of-dispersion test for Poisson counts with known mean:
/// statistic sum (x_i - mean)^2 / mean is approximately chi-square with n
/// degrees of freedom under the null.
struct DispersionResult {
    double statistic = 0.0;
    double dof = 0.0;
    bool pass = true;        // inside the two-sided acceptance band
    double mean_z = 0.0;     // z-score of the sample mean against the known mean
};
DispersionResult poisson_dispersion_test(const std::vector<double>& counts,
                                         double expected_mean, double alpha);

}  // namespace smkt
