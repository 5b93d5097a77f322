#include <doctest.h>

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "smkt/coupling.hpp"
#include "smkt/diffusion.hpp"
#include "smkt/stats.hpp"

using namespace smkt;

namespace {
ModelParams make_params(double lambda, int d, std::int64_t n, int k_max, double t0) {
    ModelParams p;
    p.lambda = lambda;
    p.d = d;
    p.n_servers = n;
    p.t0 = t0;
    p.rho = 1.0;
    p.k_max = k_max;
    return p;
}

std::vector<double> grid(double t0, int points) {
    std::vector<double> g;
    for (int i = 1; i <= points; ++i) g.push_back(t0 * i / points);
    return g;
}

FluidPath constant_zero_path(int k_max, double t0) {
    std::vector<double> times;
    std::vector<FluidState> states, drifts;
    for (int i = 0; i <= 8; ++i) {
        times.push_back(t0 * i / 8);
        states.push_back(FluidState(k_max, 0.0));
        drifts.push_back(FluidState(k_max, 0.0));
    }
    return FluidPath(std::move(times), std::move(states), std::move(drifts));
}
}  // namespace

TEST_CASE("forced-equal rates make every event joint") {
    const ModelParams p = make_params(0.7, 2, 500, 8, 1.0);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    JumpCouplingOptions opts;
    opts.force_equal_rates = true;
    opts.deviation_levels = 2;
    const JumpCoupledPath path =
        simulate_jump_coupling(p, fluid, x0, grid(1.0, 8), RngStream{1, 1}, opts);
    CHECK(path.n_events > 100);
    CHECK(path.n_joint == path.n_events);
    CHECK(path.n_x_jumps == path.n_w_jumps);
    CHECK_FALSE(path.stopped);
}

TEST_CASE("event-free mode reproduces the propagator representation") {
    // Drift-only gamma_tilde solves the linear ODE; the (GF) form with an
    // empty mark set is the independent quadrature oracle.
    const ModelParams p = make_params(0.5, 2, 100, 4, 0.5);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a, 2);  // truncated: b != 0
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 512.0, 0.5);
    JumpCouplingOptions opts;
    opts.suppress_events = true;
    const JumpCoupledPath path =
        simulate_jump_coupling(p, fluid, x0, {0.25, 0.5}, RngStream{3, 3}, opts);
    const std::vector<double> oracle =
        gamma_tilde_by_propagator(p, fluid, {}, 0.5, 64, 1.0 / 512.0);
    for (int k = 0; k < 4; ++k)
        CHECK(path.gamma_snapshots.back()[static_cast<std::size_t>(k)] ==
              doctest::Approx(oracle[static_cast<std::size_t>(k)]).epsilon(1e-6));
    CHECK(path.n_events == 0);
}

TEST_CASE("gamma_tilde solves its linear equation (GF cross-check with marks)") {
    const ModelParams p = make_params(0.5, 2, 50, 4, 0.5);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 512.0, 0.5);
    JumpCouplingOptions opts;
    opts.record_w_marks = true;
    opts.gamma_substep = 1.0 / 2048.0;
    const JumpCoupledPath path =
        simulate_jump_coupling(p, fluid, x0, {0.5}, RngStream{17, 4}, opts);
    REQUIRE(path.n_w_jumps > 5);
    const std::vector<double> oracle =
        gamma_tilde_by_propagator(p, fluid, path.w_marks, 0.5, 128, 1.0 / 1024.0);
    for (int k = 0; k < 4; ++k)
        CHECK(std::abs(path.gamma_snapshots.back()[static_cast<std::size_t>(k)] -
                       oracle[static_cast<std::size_t>(k)]) < 2e-5);
}

TEST_CASE("stationary fluid with no events keeps gamma_tilde at zero") {
    // b(a) = 0, so the compensator drift vanishes along the fixed point.
    const ModelParams p = make_params(0.6, 2, 400, 6, 1.0);
    const ScaleVector a = scale_sequence(p);
    const FluidPath fluid = fluid_solve(p, fixed_point_state(a), 1.0 / 256.0, 1.0);
    TailState x0 = rounded_fixed_point(p, a);
    JumpCouplingOptions opts;
    opts.suppress_events = true;
    const JumpCoupledPath path =
        simulate_jump_coupling(p, fluid, x0, {1.0}, RngStream{8, 8}, opts);
    for (double g : path.sup_abs_gamma) CHECK(g < 1e-9);
}

TEST_CASE("W marks form the deterministic-intensity Poisson measure") {
    const ModelParams p = make_params(0.7, 2, 300, 6, 1.0);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    const int reps = 300;
    std::vector<double> up1(static_cast<std::size_t>(reps)), down1(static_cast<std::size_t>(reps));
    for (int i = 0; i < reps; ++i) {
        const JumpCoupledPath path = simulate_jump_coupling(
            p, fluid, x0, {1.0}, RngStream{900, static_cast<std::uint64_t>(i)}, {});
        // W marks stay exact even on chain-side stops.
        up1[static_cast<std::size_t>(i)] = static_cast<double>(path.w_up_counts[0]);
        down1[static_cast<std::size_t>(i)] = static_cast<double>(path.w_down_counts[0]);
    }
    // Simpson quadrature of the level-1 intensities along the fluid path.
    auto intensity = [&](bool up) {
        const int n_int = 256;
        double acc = 0.0;
        for (int i = 0; i <= n_int; ++i) {
            const double s = static_cast<double>(i) / n_int;
            const FluidState x = fluid.eval(s);
            const double w = (i == 0 || i == n_int) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
            acc += w * (up ? rate_plus(p, x, 1) : rate_minus(p, x, 1));
        }
        return 300.0 * acc / (3.0 * n_int);
    };
    const DispersionResult d_up = poisson_dispersion_test(up1, intensity(true), 0.001);
    const DispersionResult d_down = poisson_dispersion_test(down1, intensity(false), 0.001);
    CHECK(d_up.pass);
    CHECK(std::abs(d_up.mean_z) < 4.0);
    CHECK(d_down.pass);
    CHECK(std::abs(d_down.mean_z) < 4.0);
}

TEST_CASE("gamma_tilde variance matches the covariance ODE") {
    const ModelParams p = make_params(0.7, 2, 500, 6, 0.5);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 0.5);
    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 256.0);
    const int reps = 600;
    std::vector<double> finals;
    for (int i = 0; i < reps; ++i) {
        const JumpCoupledPath path = simulate_jump_coupling(
            p, fluid, x0, {0.5}, RngStream{321, static_cast<std::uint64_t>(i)}, {});
        if (!path.stopped) finals.push_back(path.gamma_snapshots.back()[0]);
    }
    const SampleMoments m = sample_moments(finals);
    CHECK(m.variance / cov.back()(0, 0) > 0.8);
    CHECK(m.variance / cov.back()(0, 0) < 1.2);
}

TEST_CASE("gamma_tilde moment bound report") {
    const ModelParams p = make_params(0.7, 2, 500, 6, 0.5);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 0.5);
    std::vector<JumpCoupledPath> paths;
    for (int i = 0; i < 120; ++i)
        paths.push_back(simulate_jump_coupling(p, fluid, x0, {0.5},
                                               RngStream{77, static_cast<std::uint64_t>(i)}, {}));
    const auto reports = gamma_tilde_moments(p, paths, a, 4);
    for (const GammaMomentReport& rep : reports) {
        CHECK(rep.ok);
        CHECK(rep.mean_sup_sq < rep.bound);
    }
    paths.resize(50);
    CHECK_THROWS_AS(gamma_tilde_moments(p, paths, a, 4), std::invalid_argument);
}

TEST_CASE("cutoff coupling: pure-death marginal is binomial") {
    const ModelParams p = make_params(0.5, 2, 2000, 6, 1.0);
    const ScaleVector a = scale_sequence(p);
    const int m = 3;
    TailState x0;
    x0.n_servers = 2000;
    x0.counts = {1000, 250, 20, 0, 0, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    CutoffOptions opts;
    opts.suppress_arrivals = true;
    const int reps = 2000;
    std::vector<double> finals;
    for (int i = 0; i < reps; ++i) {
        const CutoffCoupledPath path = simulate_cutoff_coupling(
            p, fluid, x0, m, {1.0}, RngStream{500, static_cast<std::uint64_t>(i)}, opts);
        finals.push_back(static_cast<double>(path.xhat_final()));
    }
    const SampleMoments mm = sample_moments(finals);
    const double expect_mean = 20.0 * std::exp(-1.0);
    const double expect_var = 20.0 * std::exp(-1.0) * (1.0 - std::exp(-1.0));
    CHECK(std::abs(mm.mean - expect_mean) < 3.0 * std::sqrt(expect_var / reps));
    const double se_var = expect_var * std::sqrt(2.0 / (reps - 1.0)) * 2.0;
    CHECK(std::abs(mm.variance - expect_var) < 3.0 * se_var);
}

TEST_CASE("cutoff coupling: empty start gives the Poisson quadrature law") {
    const ModelParams p = make_params(0.5, 2, 2000, 6, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 2000;
    x0.counts = {1000, 250, 0, 0, 0, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    const int reps = 2000;
    std::vector<double> finals;
    std::size_t t2_hits = 0;
    for (int i = 0; i < reps; ++i) {
        const CutoffCoupledPath path = simulate_cutoff_coupling(
            p, fluid, x0, m, {1.0}, RngStream{600, static_cast<std::uint64_t>(i)}, {});
        finals.push_back(static_cast<double>(path.xhat_final()));
        if (path.t2 <= 1.0) ++t2_hits;
    }
    const double mu = mm_infinity_mean(p, fluid, m, 1.0);
    const SampleMoments mm = sample_moments(finals);
    const double se_mean = std::sqrt(mu / reps);
    CHECK(std::abs(mm.mean - mu) < 3.0 * se_mean);
    const double se_var = std::sqrt((mu + 2.0 * mu * mu) / reps);
    CHECK(std::abs(mm.variance - mu) < 3.0 * se_var);
    // The chain side deviates from the deterministic acceptance sometimes.
    CHECK(t2_hits > 0);
}

TEST_CASE("cutoff coupling: degenerate fluid accepts nothing on the hat side") {
    const ModelParams p = make_params(0.5, 2, 500, 5, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 500;
    x0.counts = {250, 60, 0, 0, 0};
    const FluidPath fluid = constant_zero_path(5, 1.0);
    const CutoffCoupledPath path =
        simulate_cutoff_coupling(p, fluid, x0, m, {0.5, 1.0}, RngStream{12, 0}, {});
    for (std::int64_t v : path.xhat_snapshots) CHECK(v == 0);
    CHECK(path.t3 == kNever);
}

TEST_CASE("cutoff coupling: T3 fires when the hat side crosses r a_m") {
    const ModelParams p = make_params(0.5, 2, 2000, 6, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 2000;
    x0.counts = {1000, 250, 0, 0, 0, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    CutoffOptions opts;
    opts.threshold_r = 1e-9;  // any arrival crosses immediately
    const CutoffCoupledPath path =
        simulate_cutoff_coupling(p, fluid, x0, m, {1.0}, RngStream{51, 0}, opts);
    REQUIRE(path.xhat_final() >= 0);
    if (path.n_atoms > 0 && path.xhat_snapshots.back() > 0) CHECK(path.t3 < 1.0);
}

TEST_CASE("cutoff coupling regenerates with a doubled strip on overflow") {
    const ModelParams p = make_params(0.5, 2, 2000, 6, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 2000;
    x0.counts = {1000, 250, 0, 0, 0, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    CutoffOptions opts;
    opts.strip_safety = 0.25;  // deliberately below the analytic envelope
    const CutoffCoupledPath path =
        simulate_cutoff_coupling(p, fluid, x0, m, {1.0}, RngStream{52, 0}, opts);
    CHECK(path.regenerations >= 1);
    // The regenerated replica is still a valid sample of the marginal.
    const double mu = mm_infinity_mean(p, fluid, m, 1.0);
    CHECK(static_cast<double>(path.xhat_final()) < mu + 10.0 * std::sqrt(mu) + 5.0);
}

TEST_CASE("coupled path CSV smoke") {
    const ModelParams p = make_params(0.6, 2, 200, 4, 0.5);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 128.0, 0.5);
    const JumpCoupledPath path =
        simulate_jump_coupling(p, fluid, x0, {0.25, 0.5}, RngStream{9, 9}, {});
    path.write_csv("/tmp/smkt_jumppath_test.csv");
    std::ifstream in("/tmp/smkt_jumppath_test.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "t,n1,n2,n3,n4,gammatilde1,gammatilde2,gammatilde3,gammatilde4,stopped");
}

TEST_CASE("cutoff coupling warns when x0 occupies level m+1") {
    const ModelParams p = make_params(0.5, 2, 500, 5, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 500;
    x0.counts = {250, 60, 10, 5, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 128.0, 1.0);
    const CutoffCoupledPath path =
        simulate_cutoff_coupling(p, fluid, x0, m, {1.0}, RngStream{13, 0}, {});
    CHECK(path.precondition_warned);
    CHECK(path.t1 == 0.0);
}

TEST_CASE("stopping-time assembly") {
    const ModelParams p = make_params(0.7, 2, 400, 6, 1.0);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);

    SUBCASE("infinite thresholds never trigger") {
        const JumpCoupledPath jp =
            simulate_jump_coupling(p, fluid, x0, {1.0}, RngStream{21, 1}, {});
        StoppingInputs in;
        in.jump = &jp;
        const StoppingTimes st =
            detect_stopping_times(in, {}, fluid, a, 3, 400, 1.0);
        CHECK_FALSE(st.any_hit());
    }

    SUBCASE("tiny thresholds trigger early") {
        JumpCouplingOptions opts;
        opts.deviation_levels = 2;
        opts.level_m = 3;
        opts.threshold_R = 1e-6;
        opts.threshold_r = 1e-6;
        opts.threshold_R_tilde = 1e-6;
        const JumpCoupledPath jp =
            simulate_jump_coupling(p, fluid, x0, {1.0}, RngStream{21, 2}, opts);
        StoppingInputs in;
        in.jump = &jp;
        StoppingThresholds th;
        th.R = 1e-6;
        th.R_tilde = 1e-6;
        th.r = 1e-6;
        const StoppingTimes st = detect_stopping_times(in, th, fluid, a, 3, 400, 1.0);
        CHECK(st.t[3] < 1.0);
        CHECK(st.t[5] < 1.0);
        CHECK(st.any_hit());
    }
}

TEST_CASE("the chain extracted from the coupling has the model law") {
    // Thinning must leave the X marginal exactly the kernel chain; the
    // plain Gillespie simulator is the oracle.
    const ModelParams p = make_params(0.7, 2, 500, 8, 1.0);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    const int reps = 500;
    std::vector<double> cpl_x1, cpl_x2, tail_x1, tail_x2;
    int stops = 0;
    for (int i = 0; i < reps; ++i) {
        const JumpCoupledPath jp = simulate_jump_coupling(
            p, fluid, x0, {1.0}, RngStream{1111, static_cast<std::uint64_t>(i)}, {});
        if (jp.stopped) ++stops;
        // The chain marginal is exact whether or not the coupling stopped.
        cpl_x1.push_back(static_cast<double>(jp.x_snapshots.back()[0]));
        cpl_x2.push_back(static_cast<double>(jp.x_snapshots.back()[1]));
        const SamplePath tp = simulate_tail(
            p, x0, {1.0}, RngStream{2222, static_cast<std::uint64_t>(i)}, {});
        tail_x1.push_back(static_cast<double>(tp.snapshots.back()[0]));
        tail_x2.push_back(static_cast<double>(tp.snapshots.back()[1]));
    }
    CHECK(stops > 0);  // tube exits are expected at this desk scale
    CHECK(ks_two_sample(cpl_x1, tail_x1).p_value > 0.01);
    CHECK(ks_two_sample(cpl_x2, tail_x2).p_value > 0.01);
}

TEST_CASE("cutoff identity: the two sides agree bitwise before T2") {
    const ModelParams p = make_params(0.5, 2, 2000, 6, 1.0);
    const int m = 3;
    TailState x0;
    x0.n_servers = 2000;
    x0.counts = {1000, 250, 15, 0, 0, 0};
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);
    std::vector<double> obs;
    for (int i = 1; i <= 32; ++i) obs.push_back(i / 32.0);
    int compared = 0;
    for (int i = 0; i < 100; ++i) {
        const CutoffCoupledPath path = simulate_cutoff_coupling(
            p, fluid, x0, m, obs, RngStream{313, static_cast<std::uint64_t>(i)}, {});
        const double cut = std::min(path.t1, path.t2);
        for (std::size_t j = 0; j < obs.size(); ++j) {
            if (obs[j] >= cut) break;
            CHECK(path.xm_snapshots[j] == path.xhat_snapshots[j]);
            ++compared;
        }
    }
    CHECK(compared > 500);
}

TEST_CASE("pilot percentile calibration hits the target frequency") {
    // Calibrate R at the pilot 90th percentile of the scaled sup, then
    // check that fresh replicas cross it about 10% of the time.
    const ModelParams p = make_params(0.7, 2, 1000, 7, 1.0);
    const ScaleVector a = scale_sequence(p);
    const TailState x0 = rounded_fixed_point(p, a);
    const FluidPath fluid = fluid_solve(p, x0.to_fluid(), 1.0 / 256.0, 1.0);

    const int pilot = 200;
    std::vector<double> sups;
    JumpCouplingOptions opts;
    opts.deviation_levels = 3;
    for (int i = 0; i < pilot; ++i) {
        const JumpCoupledPath path = simulate_jump_coupling(
            p, fluid, x0, {1.0}, RngStream{7000, static_cast<std::uint64_t>(i)}, opts);
        sups.push_back(path.sup_scaled_lln);
    }
    const double big_r = quantile(sups, 0.9);

    int hits = 0;
    const int fresh = 200;
    JumpCouplingOptions opts2 = opts;
    opts2.threshold_R = big_r;
    for (int i = 0; i < fresh; ++i) {
        const JumpCoupledPath path = simulate_jump_coupling(
            p, fluid, x0, {1.0}, RngStream{8000, static_cast<std::uint64_t>(i)}, opts2);
        if (path.hit_t4 <= 1.0) ++hits;
    }
    const double freq = static_cast<double>(hits) / fresh;
    CHECK(freq > 0.03);
    CHECK(freq < 0.20);
}
