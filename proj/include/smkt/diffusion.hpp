#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "smkt/fluid.hpp"
#include "smkt/matrix.hpp"
#include "smkt/model.hpp"
#include "smkt/rng.hpp"

namespace smkt {

/// Diffusion coefficients (sigma_+, sigma_-) = (sqrt(rate_plus), sqrt(rate_minus)).
std::pair<double, double> sigma_pm(const ModelParams& params, const FluidState& x, int k);

/// One realization of the Gaussian fluctuation field gamma on a uniform
/// grid, gamma_0 = 0.
struct GaussianPath {
    std::vector<double> times;
    std::vector<std::vector<double>> gamma;  // per time, components 1..k_max via [k-1]
    RngStream stream;                        // regenerates the driving noise
    std::vector<double> sup_abs;             // per level sup_t |gamma^k_t|

    const std::vector<double>& at(std::size_t i) const { return gamma[i]; }
    double value(std::size_t i, int k) const { return gamma[i][static_cast<std::size_t>(k) - 1]; }
    void write_csv(const std::string& path) const;

    /// First grid time with |gamma^m_t| > threshold, or +inf.
    double first_exceed(int level, double threshold) const;
};

struct GammaSimOptions {
    double noise_scale = 1.0;  // multiplies every normal draw (linearity tests)
    bool zero_noise = false;   // forces all diffusion coefficients to zero
};

/// Euler-Maruyama for the linear SDE
///   d gamma^k = (grad b(x_t) gamma)^k dt + sigma_+^k(x_t) dB_+ - sigma_-^k(x_t) dB_-,
/// with independent standard normals per level, sign and step.
GaussianPath simulate_gamma(const ModelParams& params, const FluidPath& fluid, double dt,
                            RngStream stream, const GammaSimOptions& opts = {});

/// Exact second moments of gamma by the Lyapunov ODE
///   dV/dt = grad b(x_t) V + V grad b(x_t)^T + diag(rate_plus + rate_minus)(x_t),
/// V(0) = 0, integrated with RK4 and symmetrized each step.
struct CovarianceCurve {
    std::vector<double> times;
    std::vector<Matrix> v;  // V(t) per stored time
    double min_eigenvalue = 0.0;
    double halving_error = 0.0;
    bool converged = true;

    const Matrix& at(std::size_t i) const { return v[i]; }
    const Matrix& back() const { return v.back(); }
    double diag(std::size_t i, int k) const { return v[i](k - 1, k - 1); }

    /// Interpolated diagonal entry at arbitrary t (linear between stores).
    double diag_at_time(double t, int k) const;
    void write_csv(const std::string& path, bool full = false) const;
};

struct CovarianceOptions {
    int store_every = 8;        // store V every this many steps (and the final one)
    double halving_tol = 1e-8;  // scaled against max diagonal
    bool zero_gradient = false; // test aid: drop the transport terms
};

CovarianceCurve covariance_solve(const ModelParams& params, const FluidPath& fluid, double dt,
                                 const CovarianceOptions& opts = {});

/// Oracle route for tests: V(t) = int_0^t Phi_{t,s} D(x_s) Phi_{t,s}^T ds
/// by composite Simpson quadrature with per-node propagator solves.
Matrix covariance_by_propagator(const ModelParams& params, const FluidPath& fluid, double t,
                                int n_intervals, double dt);

/// Ratio check of Proposition-style variance domination:
/// c0_hat = sup_{k,t} V_kk(t) / min(x^{k-1}-x^k, x^k-x^{k+1}), plus the
/// coarse per-level moment bound 8(rho^d+1) t0 e^{2 L t0^2} a_k.
struct VarianceDominationReport {
    double c0_hat = 0.0;
    int argmax_level = 0;
    double argmax_time = 0.0;
    std::size_t degenerate_points = 0;  // denominator below cutoff, skipped
    bool moment_bound_ok = true;
    double worst_moment_ratio = 0.0;    // max over k,t of V_kk / (bound a_k)
};

VarianceDominationReport check_variance_domination(const ModelParams& params, const CovarianceCurve& cov,
                        const FluidPath& fluid, const ScaleVector& a,
                        double denom_cutoff = 1e-14);

/// Distributional comparison of sqrt(N)(X - x) against gamma at chosen
/// times and levels: moments, KS statistic, and variance-vs-ODE ratios.
struct FluctuationLevelReport {
    int level = 0;
    double t = 0.0;
    double mean = 0.0;
    double variance = 0.0;
    double skewness = 0.0;
    double ks_statistic = 0.0;
    double ks_p_value = 1.0;
    double variance_ode = 0.0;
    double variance_ratio = 0.0;
};

struct FluctuationSamples {
    int level = 0;
    double t = 0.0;
    std::vector<double> ctmc;   // sqrt(N)(X^k_t - x^k_t) across replicas
    std::vector<double> gauss;  // gamma^k_t across replicas
};

/// Requires at least `min_replicas` per sample (default 500 per the
/// experiment design); throws otherwise.
std::vector<FluctuationLevelReport> compare_fluctuations(
    const std::vector<FluctuationSamples>& samples, const CovarianceCurve& cov,
    std::size_t min_replicas = 500);

}  // namespace smkt
