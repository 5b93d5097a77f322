#include "smkt/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "smkt/stats.hpp"

namespace smkt {

std::pair<double, double> sigma_pm(const ModelParams& params, const FluidState& x, int k) {
    return {std::sqrt(rate_plus(params, x, k)), std::sqrt(rate_minus(params, x, k))};
}

void GaussianPath::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("GaussianPath::write_csv: cannot open " + path);
    const int k_max = gamma.empty() ? 0 : static_cast<int>(gamma.front().size());
    out << "t";
    for (int k = 1; k <= k_max; ++k) out << ",gamma" << k;
    out << "\n";
    out.precision(17);
    for (std::size_t i = 0; i < times.size(); ++i) {
        out << times[i];
        for (double g : gamma[i]) out << "," << g;
        out << "\n";
    }
}

double GaussianPath::first_exceed(int level, double threshold) const {
    for (std::size_t i = 0; i < times.size(); ++i)
        if (std::abs(gamma[i][static_cast<std::size_t>(level) - 1]) > threshold)
            return times[i];
    return std::numeric_limits<double>::infinity();
}

GaussianPath simulate_gamma(const ModelParams& params, const FluidPath& fluid, double dt,
                            RngStream stream, const GammaSimOptions& opts) {
    if (!(dt > 0.0)) throw std::invalid_argument("simulate_gamma: dt must be > 0");
    const int n = fluid.levels();
    const double t_end = fluid.t_end();
    const auto n_steps = static_cast<std::size_t>(std::ceil(t_end / dt - 1e-12));

    Rng rng(stream);
    GaussianPath path;
    path.stream = stream;
    path.times.reserve(n_steps + 1);
    path.gamma.reserve(n_steps + 1);
    path.sup_abs.assign(static_cast<std::size_t>(n), 0.0);

    std::vector<double> g(static_cast<std::size_t>(n), 0.0);
    path.times.push_back(0.0);
    path.gamma.push_back(g);

    std::vector<double> gnext(static_cast<std::size_t>(n), 0.0);
    double t = 0.0;
    for (std::size_t i = 1; i <= n_steps; ++i) {
        const double t_next = std::min(static_cast<double>(i) * dt, t_end);
        const double h = t_next - t;
        const double sqrt_h = std::sqrt(h);
        const FluidState x = fluid.eval(t);
        for (int k = 1; k <= n; ++k) {
            const GradientRow row = drift_gradient_row(params, x, k);
            const double gk1 = k >= 2 ? g[static_cast<std::size_t>(k) - 2] : 0.0;
            const double gk = g[static_cast<std::size_t>(k) - 1];
            const double gk2 = k < n ? g[static_cast<std::size_t>(k)] : 0.0;
            const double drift_term = row.sub * gk1 + row.diag * gk + row.super * gk2;
            double noise = 0.0;
            if (!opts.zero_noise) {
                const auto [sp, sm] = sigma_pm(params, x, k);
                const double xi_plus = rng.normal() * opts.noise_scale;
                const double xi_minus = rng.normal() * opts.noise_scale;
                noise = sp * sqrt_h * xi_plus - sm * sqrt_h * xi_minus;
            }
            gnext[static_cast<std::size_t>(k) - 1] = gk + drift_term * h + noise;
        }
        g = gnext;
        t = t_next;
        path.times.push_back(t);
        path.gamma.push_back(g);
        for (int k = 1; k <= n; ++k) {
            auto& slot = path.sup_abs[static_cast<std::size_t>(k) - 1];
            slot = std::max(slot, std::abs(g[static_cast<std::size_t>(k) - 1]));
        }
    }
    return path;
}

namespace {

Matrix diffusion_diagonal(const ModelParams& params, const FluidState& x) {
    const int n = x.levels();
    Matrix d(n);
    for (int k = 1; k <= n; ++k)
        d(k - 1, k - 1) = rate_plus(params, x, k) + rate_minus(params, x, k);
    return d;
}

Matrix lyapunov_rhs(const ModelParams& params, const FluidState& x, const Matrix& v,
                    bool zero_gradient) {
    if (zero_gradient) return diffusion_diagonal(params, x);
    const Matrix g = drift_gradient_matrix(params, x);
    Matrix rhs = g * v + v * transpose(g) + diffusion_diagonal(params, x);
    return rhs;
}

void symmetrize(Matrix& v) {
    const int n = v.size();
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (v(i, j) + v(j, i));
            v(i, j) = avg;
            v(j, i) = avg;
        }
    }
}

Matrix integrate_lyapunov(const ModelParams& params, const FluidPath& fluid, double dt,
                          double t_end, CovarianceCurve* store, int store_every,
                          bool zero_gradient) {
    const int n = fluid.levels();
    Matrix v(n);
    const auto n_steps = static_cast<std::size_t>(std::ceil(t_end / dt - 1e-12));
    if (store) {
        store->times.push_back(0.0);
        store->v.push_back(v);
    }
    double t = 0.0;
    for (std::size_t i = 1; i <= n_steps; ++i) {
        const double t_next = std::min(static_cast<double>(i) * dt, t_end);
        const double h = t_next - t;
        const FluidState x1 = fluid.eval(t);
        const FluidState x2 = fluid.eval(t + 0.5 * h);
        const FluidState x3 = fluid.eval(t_next);
        const Matrix k1 = lyapunov_rhs(params, x1, v, zero_gradient);
        const Matrix k2 = lyapunov_rhs(params, x2, v + (0.5 * h) * k1, zero_gradient);
        const Matrix k3 = lyapunov_rhs(params, x2, v + (0.5 * h) * k2, zero_gradient);
        const Matrix k4 = lyapunov_rhs(params, x3, v + h * k3, zero_gradient);
        v += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        symmetrize(v);
        t = t_next;
        if (store && (i % static_cast<std::size_t>(store_every) == 0 || i == n_steps)) {
            store->times.push_back(t);
            store->v.push_back(v);
        }
    }
    return v;
}

}  // namespace

CovarianceCurve covariance_solve(const ModelParams& params, const FluidPath& fluid, double dt,
                                 const CovarianceOptions& opts) {
    if (!(dt > 0.0)) throw std::invalid_argument("covariance_solve: dt must be > 0");
    CovarianceCurve curve;
    const double t_end = fluid.t_end();
    const Matrix v_final = integrate_lyapunov(params, fluid, dt, t_end, &curve,
                                              opts.store_every, opts.zero_gradient);
    const Matrix v_half =
        integrate_lyapunov(params, fluid, dt / 2.0, t_end, nullptr, 1, opts.zero_gradient);

    double scale = 1e-300;
    for (int k = 0; k < v_final.size(); ++k) scale = std::max(scale, v_final(k, k));
    curve.halving_error = frobenius_distance(v_final, v_half) / scale;
    curve.converged = curve.halving_error <= opts.halving_tol;

    double min_ev = 0.0;
    for (const Matrix& v : curve.v) {
        const std::vector<double> ev = symmetric_eigenvalues(v);
        if (!ev.empty()) min_ev = std::min(min_ev, ev.front());
    }
    curve.min_eigenvalue = min_ev;
    return curve;
}

double CovarianceCurve::diag_at_time(double t, int k) const {
    if (times.empty()) throw std::runtime_error("CovarianceCurve: empty");
    if (t <= times.front()) return diag(0, k);
    if (t >= times.back()) return diag(times.size() - 1, k);
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t hi = static_cast<std::size_t>(it - times.begin());
    const std::size_t lo = hi - 1;
    const double u = (t - times[lo]) / (times[hi] - times[lo]);
    return (1.0 - u) * diag(lo, k) + u * diag(hi, k);
}

void CovarianceCurve::write_csv(const std::string& path, bool full) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("CovarianceCurve::write_csv: cannot open " + path);
    const int n = v.empty() ? 0 : v.front().size();
    out << "t";
    for (int k = 1; k <= n; ++k) out << ",V" << k << k;
    if (full)
        for (int i = 1; i <= n; ++i)
            for (int j = 1; j <= n; ++j) out << ",V" << i << "_" << j;
    out << "\n";
    out.precision(17);
    for (std::size_t s = 0; s < times.size(); ++s) {
        out << times[s];
        for (int k = 0; k < n; ++k) out << "," << v[s](k, k);
        if (full)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) out << "," << v[s](i, j);
        out << "\n";
    }
}

Matrix covariance_by_propagator(const ModelParams& params, const FluidPath& fluid, double t,
                                int n_intervals, double dt) {
    if (n_intervals % 2 != 0)
        throw std::invalid_argument("covariance_by_propagator: need even interval count");
    const int n = fluid.levels();
    const double h = t / n_intervals;
    Matrix acc(n);
    for (int i = 0; i <= n_intervals; ++i) {
        const double s = static_cast<double>(i) * h;
        const Propagator phi = propagator_solve(params, fluid, s, t, dt);
        const Matrix d = diffusion_diagonal(params, fluid.eval(s));
        const Matrix term = phi.matrix * d * transpose(phi.matrix);
        const double w = (i == 0 || i == n_intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        acc += w * term;
    }
    return (h / 3.0) * acc;
}

VarianceDominationReport check_variance_domination(const ModelParams& params, const CovarianceCurve& cov,
                        const FluidPath& fluid, const ScaleVector& a, double denom_cutoff) {
    VarianceDominationReport rep;
    const int n = fluid.levels();
    const DerivedConstants dc = derived_constants(params);
    const double t0 = fluid.t_end();
    const double coarse =
        8.0 * (std::pow(params.rho, params.d) + 1.0) * t0 * std::exp(2.0 * dc.lipschitz * t0 * t0);

    for (std::size_t i = 0; i < cov.times.size(); ++i) {
        const FluidState x = fluid.eval(cov.times[i]);
        for (int k = 1; k <= n; ++k) {
            const double vkk = cov.diag(i, k);
            const double delta =
                std::min(x.level(k - 1) - x.level(k), x.level(k) - x.level(k + 1));
            if (delta > denom_cutoff) {
                const double ratio = vkk / delta;
                if (ratio > rep.c0_hat) {
                    rep.c0_hat = ratio;
                    rep.argmax_level = k;
                    rep.argmax_time = cov.times[i];
                }
            } else {
                ++rep.degenerate_points;
            }
            if (a.at(k) > 0.0) {
                const double mr = vkk / (coarse * a.at(k));
                rep.worst_moment_ratio = std::max(rep.worst_moment_ratio, mr);
            } else if (vkk > 1e-300) {
                rep.moment_bound_ok = false;
            }
        }
    }
    if (rep.worst_moment_ratio > 1.0) rep.moment_bound_ok = false;
    return rep;
}

std::vector<FluctuationLevelReport> compare_fluctuations(
    const std::vector<FluctuationSamples>& samples, const CovarianceCurve& cov,
    std::size_t min_replicas) {
    std::vector<FluctuationLevelReport> out;
    out.reserve(samples.size());
    for (const FluctuationSamples& s : samples) {
        if (s.ctmc.size() < min_replicas || s.gauss.size() < min_replicas)
            throw std::invalid_argument("compare_fluctuations: insufficient replicas");
        FluctuationLevelReport rep;
        rep.level = s.level;
        rep.t = s.t;
        const SampleMoments m = sample_moments(s.ctmc);
        rep.mean = m.mean;
        rep.variance = m.variance;
        rep.skewness = m.skewness;
        const KsResult ks = ks_two_sample(s.ctmc, s.gauss);
        rep.ks_statistic = ks.statistic;
        rep.ks_p_value = ks.p_value;
        rep.variance_ode = cov.diag_at_time(s.t, s.level);
        rep.variance_ratio = rep.variance_ode > 0.0 ? rep.variance / rep.variance_ode : 0.0;
        out.push_back(rep);
    }
    return out;
}

}  // namespace smkt
