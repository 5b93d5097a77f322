#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smkt/ctmc.hpp"
#include "smkt/diffusion.hpp"
#include "smkt/fluid.hpp"
#include "smkt/model.hpp"
#include "smkt/rng.hpp"

namespace smkt {

/// Joint path of the chain X and the driving Poisson measure marks W,
/// with the jump refinement gamma_tilde integrated along the way.
/// X_tilde = x + gamma_tilde / sqrt(N).
struct JumpCoupledPath {
    std::vector<double> obs_times;
    std::vector<std::vector<std::int64_t>> x_snapshots;       // X counts per obs time
    std::vector<std::vector<double>> gamma_snapshots;          // gamma_tilde per obs time
    std::vector<std::int64_t> w_up_counts, w_down_counts;      // W marks per level over [0,T]
    std::vector<Event> w_marks;                                // populated on request

    // X left the thinning envelope (out of the tube) at stopped_at: the
    // coupling ends there and the sup statistics stop accumulating, but
    // both marginals stay exact to the horizon -- X continues on its own
    // kernel clock and the W marks keep their deterministic intensity.
    bool stopped = false;
    double stopped_at = kNever;

    // Event-exact running statistics.
    double sup_scaled_lln = 0.0;   // sup_k<=lv,t sqrt(N) |X - x| / sqrt(a_k)
    double sup_scaled_jump = 0.0;  // sup_k<=lv,t N^{3/4} |X - X_tilde| / a_k^{1/4}
    std::vector<double> sup_abs_gamma;  // per level sup_t |gamma_tilde^k|
    double hit_t4 = kNever;  // sqrt(N)|X^k - x^k| > R sqrt(a_k), k <= lv
    double hit_t5 = kNever;  // |gamma_tilde^m| > r sqrt(a_m)
    double hit_t6 = kNever;  // N^{3/4}|X^k - X_tilde^k| > R_tilde a_k^{1/4}, k <= lv

    std::uint64_t n_candidates = 0;
    std::uint64_t n_events = 0;   // accepted candidate events (joint counts once)
    std::uint64_t n_x_jumps = 0;
    std::uint64_t n_w_jumps = 0;
    std::uint64_t n_joint = 0;
    RngStream stream;

    const std::vector<double>& gamma_final() const { return gamma_snapshots.back(); }
    void write_csv(const std::string& path) const;
};

struct JumpCouplingOptions {
    int deviation_levels = 0;      // k <= this in the sup statistics (typically m-1)
    int level_m = 0;               // cutoff level for the T5 threshold
    double threshold_R = kNever;       // T4
    double threshold_r = kNever;       // T5, against r sqrt(a_m)
    double threshold_R_tilde = kNever; // T6
    double gamma_substep = 0.0;    // max RK4 substep for gamma_tilde (default: fluid grid step)
    bool force_equal_rates = false;  // validation: classify with the chain's own rates on both sides
    bool suppress_events = false;    // validation: no Poisson events, drift only
    bool record_w_marks = false;
};

/// Thinning construction of the joint chain: per level and sign, candidate
/// events at the constant envelope rate N sigma^d a_k are classified as
/// joint, X-only or W-only from the overlap of the chain rate and the
/// deterministic rate at x_t. Marginally X has the model kernel and the
/// W marks form a Poisson measure with intensity K(x_t, dy) dt.
/// Between W marks gamma_tilde follows
///   d gamma/dt = -sqrt(N) b(x_t) + grad b(x_t) gamma,
/// and jumps by +-e_k/sqrt(N) at the marks.
JumpCoupledPath simulate_jump_coupling(const ModelParams& params, const FluidPath& fluid,
                                       const TailState& x0,
                                       const std::vector<double>& obs_times, RngStream stream,
                                       const JumpCouplingOptions& opts = {});

/// Oracle for tests: evaluates the propagator representation
///   gamma_t = sqrt(N) sum_marks Phi_{t,s_i} y_i - sqrt(N) int_0^t Phi_{t,s} b(x_s) ds
/// with per-node propagator solves and Simpson quadrature.
std::vector<double> gamma_tilde_by_propagator(const ModelParams& params,
                                              const FluidPath& fluid,
                                              const std::vector<Event>& w_marks, double t,
                                              int n_intervals, double dt);

/// Empirical check of the second-moment bound
///   E sup_t |gamma_tilde^k|^2 <= 8 (rho^d + 1) t0 e^{2 L t0^2} a_k.
struct GammaMomentReport {
    int level = 0;
    double mean_sup_sq = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double bound = 0.0;
    bool ok = true;  // lower confidence bound below the cited bound
};
std::vector<GammaMomentReport> gamma_tilde_moments(const ModelParams& params,
                                                   const std::vector<JumpCoupledPath>& paths,
                                                   const ScaleVector& a, int levels);

/// Coupling of the chain's levels >= m with the M/M/infinity description
/// at the cutoff: a shared pure-death queue Q for the initial level-m
/// population plus shared Poisson atoms (s, x, u) of intensity
/// e^{-u} dt dx du, accepted by each side against its own arrival rate.
struct CutoffCoupledPath {
    int m = 0;
    std::vector<double> obs_times;
    std::vector<std::vector<std::int64_t>> below_snapshots;  // X levels 1..m-1
    std::vector<std::int64_t> xm_snapshots;                  // N X^m (frozen after T1)
    std::vector<std::int64_t> xhat_snapshots;                // N Xhat^m (always to horizon)

    double t1 = kNever;  // X^{m+1} occupied
    double t2 = kNever;  // X^m + X^{m+1} != Xhat^m (first one-sided atom)
    double t3 = kNever;  // Xhat^m > r a_m

    bool precondition_warned = false;  // x0^{m+1} != 0
    double strip_height = 0.0;
    int regenerations = 0;
    std::uint64_t n_atoms = 0;
    RngStream stream;

    std::int64_t xhat_final() const { return xhat_snapshots.back(); }
    void write_csv(const std::string& path) const;
};

struct CutoffOptions {
    double threshold_r = kNever;  // r for T3
    double strip_safety = 2.0;
    int max_regenerations = 12;
    bool suppress_arrivals = false;  // validation: pure-death marginal
};

CutoffCoupledPath simulate_cutoff_coupling(const ModelParams& params, const FluidPath& fluid,
                                           const TailState& x0, int m,
                                           const std::vector<double>& obs_times,
                                           RngStream stream, const CutoffOptions& opts = {});

/// Transient M/M/infinity mean from an empty start:
/// int_0^t e^{-(t-s)} N lambda (x^{m-1}_s)^d ds, by Simpson quadrature.
/// This is both the mean and the variance of N Xhat^m_t when x0^m = 0.
double mm_infinity_mean(const ModelParams& params, const FluidPath& fluid, int m, double t,
                        int n_intervals = 512);

/// First-hit times of the localizing inequalities. Unavailable entries
/// stay at +inf (serialized as null). T8 requires an externally paired
/// (X, gamma) pair evaluated on a common grid; without the out-of-scope
/// KMT coupling this is a distributional diagnostic only.
struct StoppingTimes {
    double t[8] = {kNever, kNever, kNever, kNever, kNever, kNever, kNever, kNever};
    double horizon = 0.0;

    double min_time() const;
    bool any_hit() const { return min_time() < horizon; }
};

struct StoppingThresholds {
    double R = kNever;
    double R_tilde = kNever;
    double R_bar = kNever;
    double r = kNever;
};

struct StoppingInputs {
    const CutoffCoupledPath* cutoff = nullptr;   // T1, T2, T3
    const JumpCoupledPath* jump = nullptr;       // T4, T5, T6
    const SamplePath* plain = nullptr;           // T1/T4 fallback from tail sim
    const GaussianPath* gamma = nullptr;         // T7 (grid times)
    const SamplePath* pair_x = nullptr;          // optional T8 pair
    const GaussianPath* pair_gamma = nullptr;
};

StoppingTimes detect_stopping_times(const StoppingInputs& in,
                                    const StoppingThresholds& thresholds,
                                    const FluidPath& fluid, const ScaleVector& a, int m,
                                    std::int64_t n_servers, double horizon);

}  // namespace smkt
