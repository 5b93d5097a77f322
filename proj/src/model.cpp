#include "smkt/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace smkt {

void ModelParams::validate() const {
    if (!(lambda > 0.0 && lambda < 1.0))
        throw std::invalid_argument("ModelParams: lambda must lie in (0,1)");
    if (d < 2) throw std::invalid_argument("ModelParams: d must be >= 2");
    if (n_servers < 1) throw std::invalid_argument("ModelParams: n_servers must be >= 1");
    if (!(t0 > 0.0)) throw std::invalid_argument("ModelParams: t0 must be > 0");
    if (!(rho >= 1.0)) throw std::invalid_argument("ModelParams: rho must be >= 1");
    if (k_max < 3) throw std::invalid_argument("ModelParams: k_max must be >= 3");
}

ScaleVector scale_sequence(const ModelParams& params) {
    ScaleVector sv;
    sv.a.resize(static_cast<std::size_t>(params.k_max));
    const double log_lambda = std::log(params.lambda);
    // Exponent 1 + d + ... + d^{k-1}, kept in double: exact below 2^53,
    // and far beyond any level that survives the exp() underflow.
    double exponent = 0.0;
    double power = 1.0;
    for (int k = 1; k <= params.k_max; ++k) {
        exponent += power;
        power *= static_cast<double>(params.d);
        const double value = std::exp(exponent * log_lambda);
        sv.a[static_cast<std::size_t>(k) - 1] = value;
        if (value == 0.0 && sv.first_underflow_level == 0) sv.first_underflow_level = k;
    }
    return sv;
}

DerivedConstants derived_constants(const ModelParams& params) {
    DerivedConstants c;
    c.sigma = params.rho + 1.0;
    c.lipschitz = 2.0 * (params.d * std::pow(c.sigma, params.d - 1) + 1.0);
    c.hessian = 0.5 * params.d * (params.d - 1) * std::pow(c.sigma, params.d - 2);
    const double n = static_cast<double>(params.n_servers);
    c.alpha = (std::log(std::log(n)) - std::log(std::log(1.0 / params.lambda))) /
              std::log(static_cast<double>(params.d));
    return c;
}

namespace {
inline double positive(double v) { return v > 0.0 ? v : 0.0; }

inline double pow_int(double base, int e) {
    // Small integer powers dominate the hot paths; avoid std::pow.
    double r = 1.0;
    while (e > 0) {
        if (e & 1) r *= base;
        base *= base;
        e >>= 1;
    }
    return r;
}
}  // namespace

double rate_plus(const ModelParams& params, const FluidState& x, int k) {
    const double yk1 = positive(x.level(k - 1));
    const double yk = positive(x.level(k));
    return params.lambda * positive(pow_int(yk1, params.d) - pow_int(yk, params.d));
}

double rate_minus(const ModelParams&, const FluidState& x, int k) {
    const double yk = positive(x.level(k));
    const double yk1 = positive(x.level(k + 1));
    return positive(yk - yk1);
}

FluidState drift(const ModelParams& params, const FluidState& x) {
    FluidState b(x.levels());
    for (int k = 1; k <= x.levels(); ++k)
        b[k] = rate_plus(params, x, k) - rate_minus(params, x, k);
    return b;
}

GradientRow drift_gradient_row(const ModelParams& params, const FluidState& x, int k) {
    GradientRow row;
    const double ld = params.lambda * static_cast<double>(params.d);
    row.sub = ld * pow_int(x.level(k - 1), params.d - 1);
    row.diag = -ld * pow_int(x.level(k), params.d - 1) - 1.0;
    row.super = 1.0;
    return row;
}

std::vector<double> drift_gradient(const ModelParams& params, const FluidState& x,
                                   const std::vector<double>& y) {
    const int n = x.levels();
    if (static_cast<int>(y.size()) != n)
        throw std::invalid_argument("drift_gradient: direction size mismatch");
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    auto yat = [&](int k) -> double {
        if (k < 1 || k > n) return 0.0;  // y^0 = y^{k_max+1} = 0
        return y[static_cast<std::size_t>(k) - 1];
    };
    for (int k = 1; k <= n; ++k) {
        const GradientRow r = drift_gradient_row(params, x, k);
        out[static_cast<std::size_t>(k) - 1] =
            r.sub * yat(k - 1) + r.diag * yat(k) + r.super * yat(k + 1);
    }
    return out;
}

int cutoff_level(std::int64_t n_servers, const ScaleVector& a, double threshold) {
    if (threshold < 1.0) throw std::invalid_argument("cutoff_level: threshold must be >= 1");
    const double n = static_cast<double>(n_servers);
    for (int k = 1; k <= a.levels(); ++k) {
        if (n * a.at(k) <= threshold) return k;
    }
    throw std::runtime_error("cutoff_level: no level with N a_k <= threshold; increase k_max");
}

double default_cutoff_threshold(std::int64_t n_servers) {
    const double ln = std::log(static_cast<double>(n_servers));
    return ln * ln * ln * ln;
}

double scaled_norm(const FluidState& x, const ScaleVector& a) {
    double norm = 0.0;
    const int n = std::min(x.levels(), a.levels());
    if (x.levels() > a.levels())
        throw std::invalid_argument("scaled_norm: scale vector shorter than state");
    for (int k = 1; k <= n; ++k) {
        const double num = std::abs(x.level(k));
        const double den = a.at(k);
        if (den == 0.0) {
            if (num == 0.0) continue;  // 0/0 convention for underflowed scales
            return std::numeric_limits<double>::infinity();
        }
        norm = std::max(norm, num / den);
    }
    return norm;
}

bool in_s0(const FluidState& x, double slack) {
    double prev = 1.0;
    for (int k = 1; k <= x.levels(); ++k) {
        const double v = x.level(k);
        if (v < -slack || v > 1.0 + slack) return false;
        if (v > prev + slack) return false;
        prev = v;
    }
    return true;
}

FluidState fixed_point_state(const ScaleVector& a) {
    FluidState s(a.levels());
    for (int k = 1; k <= a.levels(); ++k) s[k] = a.at(k);
    return s;
}

TailState rounded_fixed_point(const ModelParams& params, const ScaleVector& a,
                              int truncate_level) {
    TailState st;
    st.n_servers = params.n_servers;
    st.counts.resize(static_cast<std::size_t>(params.k_max), 0);
    std::int64_t prev = params.n_servers;
    for (int k = 1; k <= params.k_max; ++k) {
        std::int64_t c = static_cast<std::int64_t>(
            std::floor(static_cast<double>(params.n_servers) * a.at(k)));
        if (truncate_level > 0 && k > truncate_level) c = 0;
        c = std::min(c, prev);  // monotone repair
        st.counts[static_cast<std::size_t>(k) - 1] = c;
        prev = c;
    }
    return st;
}

FluidState TailState::to_fluid() const {
    FluidState s(levels());
    for (int k = 1; k <= levels(); ++k) s[k] = fraction(k);
    return s;
}

bool TailState::is_valid() const {
    std::int64_t prev = n_servers;
    for (std::int64_t c : counts) {
        if (c < 0 || c > prev) return false;
        prev = c;
    }
    return true;
}

}  // namespace smkt
