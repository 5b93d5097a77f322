#include "smkt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace smkt {

SampleMoments sample_moments(const std::vector<double>& xs) {
    SampleMoments m;
    m.n = xs.size();
    if (m.n == 0) return m;
    double sum = 0.0;
    for (double x : xs) sum += x;
    m.mean = sum / static_cast<double>(m.n);
    double m2 = 0.0, m3 = 0.0;
    for (double x : xs) {
        const double d = x - m.mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    if (m.n > 1) m.variance = m2 / static_cast<double>(m.n - 1);
    const double s2 = m2 / static_cast<double>(m.n);
    if (s2 > 0.0) m.skewness = (m3 / static_cast<double>(m.n)) / std::pow(s2, 1.5);
    return m;
}

double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw std::invalid_argument("quantile: empty sample");
    std::sort(xs.begin(), xs.end());
    if (q <= 0.0) return xs.front();
    if (q >= 1.0) return xs.back();
    const double pos = q * static_cast<double>(xs.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= xs.size()) return xs.back();
    return xs[lo] * (1.0 - frac) + xs[lo + 1] * frac;
}

double median(std::vector<double> xs) { return quantile(std::move(xs), 0.5); }

namespace {
// Asymptotic Kolmogorov survival function Q_KS.
double ks_survival(double lambda) {
    if (lambda <= 0.0) return 1.0;
    double sum = 0.0;
    double sign = 1.0;
    for (int j = 1; j <= 100; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += sign * term;
        sign = -sign;
        if (term < 1e-16) break;
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}
}  // namespace

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("ks_two_sample: need at least 2 points per sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());

    const bool a_const = a.front() == a.back();
    const bool b_const = b.front() == b.back();
    if (a_const && b_const) {
        KsResult r;
        r.statistic = (a.front() == b.front()) ? 0.0 : 1.0;
        r.p_value = (a.front() == b.front()) ? 1.0 : 0.0;
        return r;
    }

    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    double d = 0.0;
    std::size_t ia = 0, ib = 0;
    while (ia < a.size() && ib < b.size()) {
        const double x = std::min(a[ia], b[ib]);
        while (ia < a.size() && a[ia] <= x) ++ia;
        while (ib < b.size() && b[ib] <= x) ++ib;
        d = std::max(d, std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb));
    }

    const double ne = std::sqrt(na * nb / (na + nb));
    const double lambda = (ne + 0.12 + 0.11 / ne) * d;
    KsResult r;
    r.statistic = d;
    r.p_value = ks_survival(lambda);
    return r;
}

WilsonInterval wilson_interval(std::size_t successes, std::size_t trials, double z) {
    if (trials == 0) throw std::invalid_argument("wilson_interval: no trials");
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double centre = p + z2 / (2.0 * n);
    const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    WilsonInterval w;
    w.point = p;
    w.lower = std::max(0.0, (centre - half) / denom);
    w.upper = std::min(1.0, (centre + half) / denom);
    return w;
}

double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0) throw std::invalid_argument("normal_quantile: p in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

double chi_square_quantile(double p, double dof) {
    const double z = normal_quantile(p);
    const double t = 2.0 / (9.0 * dof);
    const double cube = 1.0 - t + z * std::sqrt(t);
    return dof * cube * cube * cube;
}

DispersionResult poisson_dispersion_test(const std::vector<double>& counts,
                                         double expected_mean, double alpha) {
    DispersionResult r;
    const std::size_t n = counts.size();
    if (n < 2 || expected_mean <= 0.0) {
        // No power; report pass so callers can skip degenerate levels.
        return r;
    }
    double stat = 0.0, sum = 0.0;
    for (double x : counts) {
        const double d = x - expected_mean;
        stat += d * d / expected_mean;
        sum += x;
    }
    r.statistic = stat;
    r.dof = static_cast<double>(n);
    const double lo = chi_square_quantile(alpha / 2.0, r.dof);
    const double hi = chi_square_quantile(1.0 - alpha / 2.0, r.dof);
    const double mean = sum / static_cast<double>(n);
    r.mean_z = (mean - expected_mean) / std::sqrt(expected_mean / static_cast<double>(n));
    r.pass = stat >= lo && stat <= hi;
    return r;
}

}  // namespace smkt
