#include "smkt/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include "smkt/stats.hpp"

namespace smkt {

namespace {

inline double pow_int(double base, int e) {
    double r = 1.0;
    while (e > 0) {
        if (e & 1) r *= base;
        base *= base;
        e >>= 1;
    }
    return r;
}

}  // namespace

void JumpCoupledPath::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("JumpCoupledPath::write_csv: cannot open " + path);
    const int k_max = x_snapshots.empty() ? 0 : static_cast<int>(x_snapshots.front().size());
    const int gl = gamma_snapshots.empty() ? 0 : static_cast<int>(gamma_snapshots.front().size());
    out << "t";
    for (int k = 1; k <= k_max; ++k) out << ",n" << k;
    for (int k = 1; k <= gl; ++k) out << ",gammatilde" << k;
    out << ",stopped\n";
    out.precision(17);
    for (std::size_t i = 0; i < obs_times.size(); ++i) {
        out << obs_times[i];
        for (std::int64_t c : x_snapshots[i]) out << "," << c;
        for (double g : gamma_snapshots[i]) out << "," << g;
        out << "," << (stopped && obs_times[i] >= stopped_at ? 1 : 0) << "\n";
    }
}

namespace {

// Integrates d gamma/dt = -sqrt(N) b(x_t) + grad b(x_t) gamma with RK4
// substeps, then keeps the sup statistics current.
class GammaIntegrator {
public:
    GammaIntegrator(const ModelParams& params, const FluidPath& fluid, double sqrt_n,
                    double substep)
        : params_(params),
          fluid_(fluid),
          sqrt_n_(sqrt_n),
          substep_(substep),
          gamma_(static_cast<std::size_t>(params.k_max), 0.0),
          scratch_(static_cast<std::size_t>(params.k_max), 0.0) {}

    const std::vector<double>& value() const { return gamma_; }
    double time() const { return t_; }
    double level(int k) const { return gamma_[static_cast<std::size_t>(k) - 1]; }

    void advance(double to) {
        while (t_ < to - 1e-15) {
            const double h = std::min(substep_, to - t_);
            rk4_step(h);
            t_ += h;
        }
        t_ = to;
    }

    void jump(int level, bool up) {
        gamma_[static_cast<std::size_t>(level) - 1] += (up ? 1.0 : -1.0) / sqrt_n_;
    }

private:
    void rhs(double u, const std::vector<double>& g, std::vector<double>& out) const {
        const FluidState x = fluid_.eval(u);
        const int n = params_.k_max;
        for (int k = 1; k <= n; ++k) {
            const double bk = rate_plus(params_, x, k) - rate_minus(params_, x, k);
            const GradientRow row = drift_gradient_row(params_, x, k);
            const double gk1 = k >= 2 ? g[static_cast<std::size_t>(k) - 2] : 0.0;
            const double gk = g[static_cast<std::size_t>(k) - 1];
            const double gk2 = k < n ? g[static_cast<std::size_t>(k)] : 0.0;
            out[static_cast<std::size_t>(k) - 1] =
                -sqrt_n_ * bk + row.sub * gk1 + row.diag * gk + row.super * gk2;
        }
    }

    void rk4_step(double h) {
        const std::size_t n = gamma_.size();
        std::vector<double> k1(n), k2(n), k3(n), k4(n);
        rhs(t_, gamma_, k1);
        for (std::size_t i = 0; i < n; ++i) scratch_[i] = gamma_[i] + 0.5 * h * k1[i];
        rhs(t_ + 0.5 * h, scratch_, k2);
        for (std::size_t i = 0; i < n; ++i) scratch_[i] = gamma_[i] + 0.5 * h * k2[i];
        rhs(t_ + 0.5 * h, scratch_, k3);
        for (std::size_t i = 0; i < n; ++i) scratch_[i] = gamma_[i] + h * k3[i];
        rhs(t_ + h, scratch_, k4);
        for (std::size_t i = 0; i < n; ++i)
            gamma_[i] += h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
    }

    const ModelParams& params_;
    const FluidPath& fluid_;
    double sqrt_n_;
    double substep_;
    double t_ = 0.0;
    std::vector<double> gamma_;
    std::vector<double> scratch_;
};

}  // namespace

JumpCoupledPath simulate_jump_coupling(const ModelParams& params, const FluidPath& fluid,
                                       const TailState& x0,
                                       const std::vector<double>& obs_times, RngStream stream,
                                       const JumpCouplingOptions& opts) {
    if (obs_times.empty()) throw std::invalid_argument("simulate_jump_coupling: no obs times");
    const double horizon = obs_times.back();
    if (horizon > fluid.t_end() + 1e-9)
        throw std::invalid_argument("simulate_jump_coupling: fluid path too short");
    if (!x0.is_valid() || x0.n_servers != params.n_servers ||
        x0.levels() != params.k_max)
        throw std::invalid_argument("simulate_jump_coupling: bad initial state");
    if (x0.count(params.k_max) > 0)
        throw TruncationOverflow("simulate_jump_coupling: level k_max occupied at t=0");

    const int k_max = params.k_max;
    const double n = static_cast<double>(params.n_servers);
    const double sqrt_n = std::sqrt(n);
    const double n34 = std::pow(n, 0.75);
    const ScaleVector a = scale_sequence(params);
    const DerivedConstants dc = derived_constants(params);
    const double sig_d = std::pow(dc.sigma, params.d);

    // Per-server envelope per level, shared by the two signs.
    std::vector<double> env(static_cast<std::size_t>(k_max), 0.0);
    double env_sum = 0.0;
    for (int k = 1; k <= k_max; ++k) {
        env[static_cast<std::size_t>(k) - 1] = sig_d * a.at(k);
        env_sum += 2.0 * env[static_cast<std::size_t>(k) - 1];
    }
    const double candidate_rate = opts.suppress_events ? 0.0 : n * env_sum;

    std::vector<double> sqrt_a(static_cast<std::size_t>(k_max), 0.0);
    std::vector<double> quarter_a(static_cast<std::size_t>(k_max), 0.0);
    for (int k = 1; k <= k_max; ++k) {
        sqrt_a[static_cast<std::size_t>(k) - 1] = std::sqrt(a.at(k));
        quarter_a[static_cast<std::size_t>(k) - 1] = std::pow(a.at(k), 0.25);
    }

    std::vector<std::int64_t> counts = x0.counts;
    auto frac = [&](int k) -> double {
        if (k <= 0) return 1.0;
        if (k > k_max) return 0.0;
        return static_cast<double>(counts[static_cast<std::size_t>(k) - 1]) / n;
    };
    auto chain_rate = [&](int k, bool up) -> double {
        if (up) {
            const double p = pow_int(frac(k - 1), params.d);
            const double q = pow_int(frac(k), params.d);
            return params.lambda * std::max(0.0, p - q);
        }
        return std::max(0.0, frac(k) - frac(k + 1));
    };
    auto fluid_rate = [&](double t, int k, bool up) -> double {
        if (up) {
            const double p = pow_int(std::max(0.0, fluid.eval_level(t, k - 1)), params.d);
            const double q = pow_int(std::max(0.0, fluid.eval_level(t, k)), params.d);
            return params.lambda * std::max(0.0, p - q);
        }
        return std::max(
            0.0, std::max(0.0, fluid.eval_level(t, k)) -
                     std::max(0.0, fluid.eval_level(t, k + 1)));
    };

    Rng rng(stream);
    JumpCoupledPath path;
    path.stream = stream;
    path.obs_times = obs_times;
    path.w_up_counts.assign(static_cast<std::size_t>(k_max), 0);
    path.w_down_counts.assign(static_cast<std::size_t>(k_max), 0);
    path.sup_abs_gamma.assign(static_cast<std::size_t>(k_max), 0.0);

    const double dt_grid =
        fluid.times().size() > 1 ? fluid.times()[1] - fluid.times()[0] : horizon;
    GammaIntegrator gamma(params, fluid, sqrt_n,
                          opts.gamma_substep > 0.0 ? opts.gamma_substep : dt_grid);

    const int lv = std::min(std::max(opts.deviation_levels, 0), k_max);
    auto gamma_stats = [&](double t) {
        for (int k = 1; k <= k_max; ++k) {
            const double g = std::abs(gamma.level(k));
            auto& slot = path.sup_abs_gamma[static_cast<std::size_t>(k) - 1];
            slot = std::max(slot, g);
        }
        if (opts.level_m >= 1 && opts.level_m <= k_max && path.hit_t5 == kNever) {
            if (std::abs(gamma.level(opts.level_m)) >
                opts.threshold_r * sqrt_a[static_cast<std::size_t>(opts.level_m) - 1])
                path.hit_t5 = t;
        }
    };
    auto dev_stats = [&](double t) {
        for (int k = 1; k <= lv; ++k) {
            const double xk = fluid.eval_level(t, k);
            const double xf = frac(k);
            const double dev = std::abs(xf - xk);
            const double ak_sqrt = sqrt_a[static_cast<std::size_t>(k) - 1];
            if (ak_sqrt > 0.0) {
                const double scaled = sqrt_n * dev / ak_sqrt;
                path.sup_scaled_lln = std::max(path.sup_scaled_lln, scaled);
                if (scaled > opts.threshold_R && path.hit_t4 == kNever) path.hit_t4 = t;
            }
            const double ak_q = quarter_a[static_cast<std::size_t>(k) - 1];
            if (ak_q > 0.0) {
                const double jdev = std::abs(xf - xk - gamma.level(k) / sqrt_n);
                const double scaled = n34 * jdev / ak_q;
                path.sup_scaled_jump = std::max(path.sup_scaled_jump, scaled);
                if (scaled > opts.threshold_R_tilde && path.hit_t6 == kNever) path.hit_t6 = t;
            }
        }
    };
    auto envelope_ok = [&](int center) -> bool {
        for (int k = std::max(1, center - 1); k <= std::min(k_max, center + 1); ++k) {
            const double e = env[static_cast<std::size_t>(k) - 1];
            if (chain_rate(k, true) > e || chain_rate(k, false) > e) return false;
        }
        return true;
    };

    double t = 0.0;
    std::size_t obs_idx = 0;
    gamma_stats(0.0);
    dev_stats(0.0);

    auto snapshot_until = [&](double limit) {
        while (obs_idx < obs_times.size() && obs_times[obs_idx] <= limit) {
            const double ot = obs_times[obs_idx];
            gamma.advance(ot);
            gamma_stats(ot);
            if (!path.stopped) dev_stats(ot);
            path.x_snapshots.push_back(counts);
            path.gamma_snapshots.push_back(gamma.value());
            ++obs_idx;
        }
    };

    // Total kernel rate of the chain, for the uncoupled continuation.
    auto chain_total = [&]() {
        double total = 0.0;
        for (int k = 1; k <= k_max; ++k)
            total += chain_rate(k, true) + chain_rate(k, false);
        return n * total;
    };
    auto apply_x_jump = [&](int level, bool up) {
        if (up) {
            if (level == k_max) {
                TruncationOverflow err("simulate_jump_coupling: X^{k_max} became positive");
                err.at_time = t;
                throw err;
            }
            ++counts[static_cast<std::size_t>(level) - 1];
        } else {
            --counts[static_cast<std::size_t>(level) - 1];
        }
        ++path.n_x_jumps;
    };

    // An envelope violation ends the coupling: from stopped_at on, the
    // chain runs off its own exponential clock (exact kernel, uncoupled)
    // and the W marks keep their deterministic thinning, so both
    // marginals stay exact while the coupled statistics localize to the
    // tube, as in the localized estimates.
    while (true) {
        const double t_cand =
            candidate_rate > 0.0 ? t + rng.exponential(candidate_rate) : horizon + 1.0;
        double t_chain = horizon + 1.0;
        if (path.stopped) {
            const double total = chain_total();
            if (total > 0.0) t_chain = t + rng.exponential(total);
        }
        const double t_next = std::min(t_cand, t_chain);
        snapshot_until(std::min(t_next, horizon));
        if (t_next > horizon) break;
        t = t_next;

        if (t == t_chain) {
            // Uncoupled continuation event.
            const double total = chain_total();
            double u = rng.uniform() * total;
            int level = 0;
            bool up = true;
            for (int k = 1; k <= k_max && level == 0; ++k) {
                const double rp = n * chain_rate(k, true);
                if (u < rp) {
                    level = k;
                    up = true;
                    break;
                }
                u -= rp;
                const double rm = n * chain_rate(k, false);
                if (u < rm) {
                    level = k;
                    up = false;
                    break;
                }
                u -= rm;
            }
            if (level != 0) apply_x_jump(level, up);
            continue;
        }

        ++path.n_candidates;
        // Pick (level, sign) proportional to the envelope slots.
        double u = rng.uniform() * env_sum;
        int level = 0;
        bool up = true;
        for (int k = 1; k <= k_max; ++k) {
            const double e = env[static_cast<std::size_t>(k) - 1];
            if (u < e) {
                level = k;
                up = true;
                break;
            }
            u -= e;
            if (u < e) {
                level = k;
                up = false;
                break;
            }
            u -= e;
        }
        if (level == 0) continue;  // top-edge roundoff: harmless self-loop

        const double r_chain = path.stopped ? 0.0 : chain_rate(level, up);
        const double r_fluid =
            opts.force_equal_rates ? r_chain : fluid_rate(t, level, up);
        const double u2 = rng.uniform() * env[static_cast<std::size_t>(level) - 1];
        const bool x_jump = !path.stopped && u2 < r_chain;
        const bool w_jump = u2 < r_fluid;
        if (!x_jump && !w_jump) continue;
        ++path.n_events;
        if (x_jump && w_jump) ++path.n_joint;

        gamma.advance(t);
        gamma_stats(t);
        if (!path.stopped) dev_stats(t);  // interval end, pre-jump state

        if (x_jump) {
            apply_x_jump(level, up);
            if (!envelope_ok(level)) {
                path.stopped = true;
                path.stopped_at = t;
            }
        }
        if (w_jump) {
            gamma.jump(level, up);
            auto& slot = up ? path.w_up_counts[static_cast<std::size_t>(level) - 1]
                            : path.w_down_counts[static_cast<std::size_t>(level) - 1];
            ++slot;
            ++path.n_w_jumps;
            if (opts.record_w_marks)
                path.w_marks.push_back({t, static_cast<std::uint8_t>(up ? 0 : 1),
                                        static_cast<std::uint16_t>(level)});
            gamma_stats(t);
        }
        if (!path.stopped) dev_stats(t);  // interval start, post-jump state
    }

    snapshot_until(horizon);
    gamma.advance(horizon);
    gamma_stats(horizon);
    if (!path.stopped) dev_stats(horizon);
    while (path.x_snapshots.size() < obs_times.size()) {
        path.x_snapshots.push_back(counts);
        path.gamma_snapshots.push_back(gamma.value());
    }
    return path;
}

std::vector<double> gamma_tilde_by_propagator(const ModelParams& params,
                                              const FluidPath& fluid,
                                              const std::vector<Event>& w_marks, double t,
                                              int n_intervals, double dt) {
    if (n_intervals % 2 != 0)
        throw std::invalid_argument("gamma_tilde_by_propagator: even interval count required");
    const int n = params.k_max;
    const double sqrt_n = std::sqrt(static_cast<double>(params.n_servers));
    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);

    // Mark part: sum of +- Phi_{t,s} e_k / sqrt(N).
    for (const Event& e : w_marks) {
        if (e.t > t) break;
        const Propagator phi = propagator_solve(params, fluid, e.t, t, dt);
        const double sign = e.type == 0 ? 1.0 : -1.0;
        for (int i = 0; i < n; ++i)
            acc[static_cast<std::size_t>(i)] +=
                sign * phi.matrix(i, e.level - 1) / sqrt_n;
    }

    // Compensator part: -sqrt(N) int_0^t Phi_{t,s} b(x_s) ds by Simpson.
    const double h = t / n_intervals;
    std::vector<double> quad(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i <= n_intervals; ++i) {
        const double s = static_cast<double>(i) * h;
        const Propagator phi = propagator_solve(params, fluid, s, t, dt);
        const FluidState xs = fluid.eval(s);
        const FluidState b = drift(params, xs);
        const double w = (i == 0 || i == n_intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        for (int r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int c = 0; c < n; ++c) dot += phi.matrix(r, c) * b[c + 1];
            quad[static_cast<std::size_t>(r)] += w * dot;
        }
    }
    for (int r = 0; r < n; ++r)
        acc[static_cast<std::size_t>(r)] -= sqrt_n * (h / 3.0) * quad[static_cast<std::size_t>(r)];
    return acc;
}

std::vector<GammaMomentReport> gamma_tilde_moments(const ModelParams& params,
                                                   const std::vector<JumpCoupledPath>& paths,
                                                   const ScaleVector& a, int levels) {
    if (paths.size() < 100)
        throw std::invalid_argument("gamma_tilde_moments: need at least 100 replicas");
    const DerivedConstants dc = derived_constants(params);
    const double t0 = params.t0;
    const double coarse = 8.0 * (std::pow(params.rho, params.d) + 1.0) * t0 *
                          std::exp(2.0 * dc.lipschitz * t0 * t0);
    std::vector<GammaMomentReport> out;
    for (int k = 1; k <= levels; ++k) {
        std::vector<double> sup_sq;
        sup_sq.reserve(paths.size());
        for (const JumpCoupledPath& p : paths) {
            const double s = p.sup_abs_gamma[static_cast<std::size_t>(k) - 1];
            sup_sq.push_back(s * s);
        }
        const SampleMoments m = sample_moments(sup_sq);
        GammaMomentReport rep;
        rep.level = k;
        rep.mean_sup_sq = m.mean;
        const double half =
            2.576 * std::sqrt(m.variance / static_cast<double>(sup_sq.size()));
        rep.ci_lower = m.mean - half;
        rep.ci_upper = m.mean + half;
        rep.bound = coarse * a.at(k);
        rep.ok = rep.ci_lower <= rep.bound;
        out.push_back(rep);
    }
    return out;
}

void CutoffCoupledPath::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("CutoffCoupledPath::write_csv: cannot open " + path);
    const int below = below_snapshots.empty() ? 0 : static_cast<int>(below_snapshots.front().size());
    out << "t";
    for (int k = 1; k <= below; ++k) out << ",n" << k;
    out << ",nm,nhat\n";
    out.precision(17);
    for (std::size_t i = 0; i < obs_times.size(); ++i) {
        out << obs_times[i];
        for (std::int64_t c : below_snapshots[i]) out << "," << c;
        out << "," << xm_snapshots[i] << "," << xhat_snapshots[i] << "\n";
    }
}

namespace {

struct Death {
    double t;
    int mask;  // bit 0: chain side, bit 1: hat side
    bool operator>(const Death& o) const { return t > o.t; }
};

struct CutoffAttempt {
    CutoffCoupledPath path;
    bool overflowed = false;
};

CutoffAttempt run_cutoff_attempt(const ModelParams& params, const FluidPath& fluid,
                                 const TailState& x0, int m,
                                 const std::vector<double>& obs_times, RngStream stream,
                                 const CutoffOptions& opts, double strip) {
    const double n = static_cast<double>(params.n_servers);
    const double horizon = obs_times.back();
    const ScaleVector a = scale_sequence(params);

    CutoffAttempt attempt;
    CutoffCoupledPath& path = attempt.path;
    path.m = m;
    path.obs_times = obs_times;
    path.stream = stream;
    path.strip_height = strip;

    Rng rng(stream);

    // Lower levels 1..m-1 evolve by the exact kernel; level m is carried
    // by the shared queue Q plus accepted atoms.
    std::vector<std::int64_t> below(static_cast<std::size_t>(m - 1), 0);
    for (int k = 1; k <= m - 1; ++k) below[static_cast<std::size_t>(k) - 1] = x0.count(k);
    std::int64_t xm_alive = x0.count(m);
    std::int64_t xhat_alive = x0.count(m);
    bool frozen = false;  // chain side freezes at T1
    std::int64_t xm_frozen = 0;

    if (m + 1 <= x0.levels() && x0.count(m + 1) > 0) {
        path.precondition_warned = true;
        path.t1 = 0.0;
        frozen = true;
        xm_frozen = xm_alive;
    }

    std::priority_queue<Death, std::vector<Death>, std::greater<Death>> deaths;
    for (std::int64_t i = 0; i < x0.count(m); ++i)
        deaths.push({rng.exponential(1.0), 0b11});

    auto below_frac = [&](int k) -> double {
        if (k <= 0) return 1.0;
        if (k <= m - 1) return static_cast<double>(below[static_cast<std::size_t>(k) - 1]) / n;
        if (k == m) return static_cast<double>(xm_alive) / n;
        return 0.0;
    };

    // Arrival-rate tests for the two sides of the coupling.
    auto chain_level_rate = [&](int level) -> double {
        // N lambda (X^{level})^d, the total arrival rate into levels > level.
        return n * params.lambda * pow_int(below_frac(level), params.d);
    };
    auto hat_rate = [&](double t) -> double {
        return n * params.lambda *
               pow_int(std::max(0.0, fluid.eval_level(t, m - 1)), params.d);
    };

    const double r_cap = opts.threshold_r * a.at(m) * n;  // T3 in count units
    auto check_t3 = [&](double t) {
        if (path.t3 == kNever && static_cast<double>(xhat_alive) > r_cap) path.t3 = t;
    };
    check_t3(0.0);

    // Gillespie rates for levels 1..m-1.
    std::vector<double> up(static_cast<std::size_t>(m), 0.0);
    std::vector<double> down(static_cast<std::size_t>(m), 0.0);
    auto recompute_lower = [&]() -> double {
        if (frozen) return 0.0;
        double total = 0.0;
        double prev_pow = 1.0;
        for (int k = 1; k <= m - 1; ++k) {
            const double cur_pow = pow_int(below_frac(k), params.d);
            up[static_cast<std::size_t>(k) - 1] = n * params.lambda * (prev_pow - cur_pow);
            prev_pow = cur_pow;
            down[static_cast<std::size_t>(k) - 1] =
                static_cast<double>(below[static_cast<std::size_t>(k) - 1]) -
                below_frac(k + 1) * n;
            total += up[static_cast<std::size_t>(k) - 1] + down[static_cast<std::size_t>(k) - 1];
        }
        return total;
    };

    const double atom_rate = opts.suppress_arrivals ? 0.0 : strip;
    if (!opts.suppress_arrivals && chain_level_rate(m - 1) > strip) {
        attempt.overflowed = true;
        return attempt;
    }

    double t = 0.0;
    std::size_t obs_idx = 0;
    double next_atom = atom_rate > 0.0 ? rng.exponential(atom_rate) : kNever;
    double lower_total = recompute_lower();
    double next_lower = lower_total > 0.0 ? t + rng.exponential(lower_total) : kNever;

    auto snapshot_until = [&](double limit) {
        while (obs_idx < obs_times.size() && obs_times[obs_idx] <= limit) {
            path.below_snapshots.push_back(below);
            path.xm_snapshots.push_back(frozen ? xm_frozen : xm_alive);
            path.xhat_snapshots.push_back(xhat_alive);
            ++obs_idx;
        }
    };

    while (true) {
        const double next_death = deaths.empty() ? kNever : deaths.top().t;
        const double t_next = std::min({next_atom, next_lower, next_death});
        snapshot_until(std::min(t_next, horizon));
        if (t_next > horizon) break;
        t = t_next;

        if (t == next_death) {
            const Death d = deaths.top();
            deaths.pop();
            if ((d.mask & 0b01) && !frozen) --xm_alive;
            if (d.mask & 0b10) --xhat_alive;
            // Level m feeds the lower block through rate_minus at m-1.
            lower_total = recompute_lower();
            next_lower = lower_total > 0.0 ? t + rng.exponential(lower_total) : kNever;
            continue;
        }

        if (t == next_atom) {
            ++path.n_atoms;
            const double x_coord = rng.uniform() * strip;
            const double lifetime = rng.exponential(1.0);
            const bool was_frozen = frozen;
            const double chain_need = chain_level_rate(m - 1);
            if (!was_frozen && chain_need > strip) {
                attempt.overflowed = true;
                return attempt;
            }
            bool accept_chain = false;
            if (!was_frozen && x_coord <= chain_need) {
                accept_chain = true;
                if (x_coord <= chain_level_rate(m)) {
                    // Arrival joins a level-m queue: level m+1 occupied.
                    path.t1 = t;
                    frozen = true;
                    xm_frozen = xm_alive;
                } else {
                    ++xm_alive;
                    deaths.push({t + lifetime, 0b01});
                }
            }
            bool accept_hat = false;
            if (x_coord <= hat_rate(t)) {
                accept_hat = true;
                ++xhat_alive;
                check_t3(t);
                // Same lifetime as the chain side: the shared u is the coupling.
                deaths.push({t + lifetime, 0b10});
            }
            if (!was_frozen && accept_chain != accept_hat && path.t2 == kNever) path.t2 = t;
            lower_total = recompute_lower();
            next_lower = lower_total > 0.0 ? t + rng.exponential(lower_total) : kNever;
            next_atom = t + (atom_rate > 0.0 ? rng.exponential(atom_rate) : kNever);
            continue;
        }

        // Lower-level kernel jump.
        double u = rng.uniform() * lower_total;
        int level = 0;
        bool is_up = true;
        for (int k = 1; k <= m - 1; ++k) {
            if (u < up[static_cast<std::size_t>(k) - 1]) {
                level = k;
                is_up = true;
                break;
            }
            u -= up[static_cast<std::size_t>(k) - 1];
            if (u < down[static_cast<std::size_t>(k) - 1]) {
                level = k;
                is_up = false;
                break;
            }
            u -= down[static_cast<std::size_t>(k) - 1];
        }
        if (level != 0) {
            below[static_cast<std::size_t>(level) - 1] += is_up ? 1 : -1;
            if (level == m - 1 && !opts.suppress_arrivals &&
                chain_level_rate(m - 1) > strip) {
                attempt.overflowed = true;
                return attempt;
            }
        }
        lower_total = recompute_lower();
        next_lower = lower_total > 0.0 ? t + rng.exponential(lower_total) : kNever;
    }

    snapshot_until(horizon);
    while (path.xhat_snapshots.size() < obs_times.size()) {
        path.below_snapshots.push_back(below);
        path.xm_snapshots.push_back(frozen ? xm_frozen : xm_alive);
        path.xhat_snapshots.push_back(xhat_alive);
    }
    return attempt;
}

}  // namespace

CutoffCoupledPath simulate_cutoff_coupling(const ModelParams& params, const FluidPath& fluid,
                                           const TailState& x0, int m,
                                           const std::vector<double>& obs_times,
                                           RngStream stream, const CutoffOptions& opts) {
    if (obs_times.empty()) throw std::invalid_argument("simulate_cutoff_coupling: no obs times");
    if (m < 1 || m > params.k_max)
        throw std::invalid_argument("simulate_cutoff_coupling: m outside 1..k_max");
    if (!x0.is_valid() || x0.n_servers != params.n_servers)
        throw std::invalid_argument("simulate_cutoff_coupling: bad initial state");
    if (obs_times.back() > fluid.t_end() + 1e-9)
        throw std::invalid_argument("simulate_cutoff_coupling: fluid path too short");

    const ScaleVector a = scale_sequence(params);
    const DerivedConstants dc = derived_constants(params);
    const double n = static_cast<double>(params.n_servers);

    // Analytic strip: N sigma^d a_m bounds both acceptance tests inside the
    // tube; the deterministic side is also bounded directly on the grid.
    double det_max = 0.0;
    for (const FluidState& x : fluid.states())
        det_max = std::max(det_max, n * params.lambda *
                                        std::pow(std::max(0.0, x.level(m - 1)),
                                                 static_cast<double>(params.d)));
    double strip =
        opts.strip_safety * std::max(n * std::pow(dc.sigma, params.d) * a.at(m), det_max);
    strip = std::max(strip, 1e-12);

    for (int attempt_idx = 0; attempt_idx <= opts.max_regenerations; ++attempt_idx) {
        RngStream attempt_stream{detail::mix64(stream.seed + 0x9e3779b97f4a7c15ULL *
                                                                 static_cast<std::uint64_t>(
                                                                     attempt_idx)),
                                 stream.stream};
        if (attempt_idx == 0) attempt_stream = stream;
        CutoffAttempt attempt =
            run_cutoff_attempt(params, fluid, x0, m, obs_times, attempt_stream, opts, strip);
        attempt.path.regenerations = attempt_idx;
        if (!attempt.overflowed) return attempt.path;
        strip *= 2.0;
    }
    throw std::runtime_error("simulate_cutoff_coupling: strip overflow persisted after doubling");
}

double mm_infinity_mean(const ModelParams& params, const FluidPath& fluid, int m, double t,
                        int n_intervals) {
    if (n_intervals % 2 != 0) throw std::invalid_argument("mm_infinity_mean: even intervals");
    const double n = static_cast<double>(params.n_servers);
    const double h = t / n_intervals;
    double acc = 0.0;
    for (int i = 0; i <= n_intervals; ++i) {
        const double s = static_cast<double>(i) * h;
        const double rate =
            n * params.lambda *
            std::pow(std::max(0.0, fluid.eval_level(s, m - 1)), static_cast<double>(params.d));
        const double w = (i == 0 || i == n_intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        acc += w * std::exp(-(t - s)) * rate;
    }
    return acc * h / 3.0;
}

double StoppingTimes::min_time() const {
    double m = kNever;
    for (double ti : t) m = std::min(m, ti);
    return m;
}

StoppingTimes detect_stopping_times(const StoppingInputs& in,
                                    const StoppingThresholds& thresholds,
                                    const FluidPath& fluid, const ScaleVector& a, int m,
                                    std::int64_t n_servers, double horizon) {
    StoppingTimes st;
    st.horizon = horizon;
    const double n = static_cast<double>(n_servers);

    if (in.cutoff) {
        st.t[0] = in.cutoff->t1;
        st.t[1] = in.cutoff->t2;
        st.t[2] = in.cutoff->t3;
    }
    if (in.jump) {
        st.t[3] = in.jump->hit_t4;
        st.t[4] = in.jump->hit_t5;
        st.t[5] = in.jump->hit_t6;
    }
    if (in.plain && in.plain->has_deviation) {
        st.t[0] = std::min(st.t[0], in.plain->deviation.first_hit_above_cutoff);
        st.t[3] = std::min(st.t[3], in.plain->deviation.first_hit_scaled);
    }
    if (in.gamma && m >= 1 && m <= static_cast<int>(in.gamma->sup_abs.size())) {
        st.t[6] = in.gamma->first_exceed(m, thresholds.r * std::sqrt(a.at(m)));
    }
    if (in.pair_x && in.pair_gamma) {
        // Grid-time evaluation of N |X - (x + gamma/sqrt(N))| > R_bar log(N a_k).
        const auto& times = in.pair_x->obs_times;
        for (std::size_t i = 0; i < times.size() && st.t[7] == kNever; ++i) {
            const double t = times[i];
            // gamma path grid may differ; locate nearest index by time.
            const auto& gt = in.pair_gamma->times;
            const auto it = std::lower_bound(gt.begin(), gt.end(), t - 1e-12);
            if (it == gt.end()) break;
            const std::size_t gi = static_cast<std::size_t>(it - gt.begin());
            for (int k = 1; k <= std::min(m - 1, static_cast<int>(a.levels())); ++k) {
                const double xk = fluid.eval_level(t, k);
                const double bar =
                    xk + in.pair_gamma->gamma[gi][static_cast<std::size_t>(k) - 1] / std::sqrt(n);
                const double dev = std::abs(
                    static_cast<double>(in.pair_x->snapshots[i][static_cast<std::size_t>(k) - 1]) /
                        n -
                    bar);
                const double cap = thresholds.R_bar * std::log(n * a.at(k));
                if (cap > 0.0 && n * dev > cap) {
                    st.t[7] = t;
                    break;
                }
            }
        }
    }
    return st;
}

}  // namespace smkt
