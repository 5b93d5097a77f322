#include <doctest.h>

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "smkt/diffusion.hpp"
#include "smkt/stats.hpp"

using namespace smkt;

namespace {
ModelParams make_params(double lambda, int d, int k_max) {
    ModelParams p;
    p.lambda = lambda;
    p.d = d;
    p.n_servers = 10000;
    p.t0 = 1.0;
    p.rho = 1.0;
    p.k_max = k_max;
    return p;
}
}  // namespace

TEST_CASE("diffusion coefficients") {
    const ModelParams p = make_params(0.5, 2, 3);
    SUBCASE("empty state") {
        const auto [sp, sm] = sigma_pm(p, FluidState(3, 0.0), 1);
        CHECK(sp == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
        CHECK(sm == 0.0);
    }
    SUBCASE("balanced at the fixed point") {
        const ScaleVector a = scale_sequence(p);
        const FluidState fp = fixed_point_state(a);
        for (int k = 1; k <= 2; ++k) {
            const auto [sp, sm] = sigma_pm(p, fp, k);
            CHECK(sp == doctest::Approx(sm).epsilon(1e-7));
        }
    }
    SUBCASE("hand value") {
        FluidState x(3, 0.0);
        x[1] = 0.5;
        const auto [sp, sm] = sigma_pm(p, x, 1);
        CHECK(sp == doctest::Approx(std::sqrt(0.375)).epsilon(1e-15));
        CHECK(sm == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    }
}

TEST_CASE("gamma simulation structure") {
    const ModelParams p = make_params(0.7, 2, 5);
    const ScaleVector a = scale_sequence(p);
    const FluidPath fluid = fluid_solve(p, fixed_point_state(a), 1.0 / 256.0, 1.0);

    SUBCASE("zero noise gives the zero path") {
        GammaSimOptions opts;
        opts.zero_noise = true;
        const GaussianPath g = simulate_gamma(p, fluid, 1.0 / 256.0, RngStream{1, 1}, opts);
        for (double s : g.sup_abs) CHECK(s == 0.0);
    }

    SUBCASE("pathwise linearity in the driving noise") {
        GammaSimOptions twice;
        twice.noise_scale = 2.0;
        const GaussianPath g1 = simulate_gamma(p, fluid, 1.0 / 256.0, RngStream{5, 2}, {});
        const GaussianPath g2 = simulate_gamma(p, fluid, 1.0 / 256.0, RngStream{5, 2}, twice);
        for (std::size_t i = 0; i < g1.times.size(); ++i)
            for (std::size_t k = 0; k < 5; ++k)
                CHECK(g2.gamma[i][k] == doctest::Approx(2.0 * g1.gamma[i][k]).epsilon(1e-12));
    }

    SUBCASE("zero mean within Monte Carlo error") {
        const int reps = 400;
        std::vector<double> finals;
        for (int i = 0; i < reps; ++i) {
            const GaussianPath g = simulate_gamma(p, fluid, 1.0 / 128.0,
                                                  RngStream{99, static_cast<std::uint64_t>(i)}, {});
            finals.push_back(g.gamma.back()[0]);
        }
        const SampleMoments m = sample_moments(finals);
        CHECK(std::abs(m.mean) < 3.0 * std::sqrt(m.variance / reps));
    }
}

TEST_CASE("covariance ODE against the Euler-Maruyama ensemble") {
    // Stationary-coefficient regime: frozen x = a.
    const ModelParams p = make_params(0.7, 2, 5);
    const ScaleVector a = scale_sequence(p);
    const FluidPath fluid = fluid_solve(p, fixed_point_state(a), 1.0 / 512.0, 1.0);
    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 512.0);
    REQUIRE(cov.converged);

    const int reps = 3000;
    Matrix emp(5);
    for (int i = 0; i < reps; ++i) {
        const GaussianPath g = simulate_gamma(p, fluid, 1.0 / 512.0,
                                              RngStream{314, static_cast<std::uint64_t>(i)}, {});
        const auto& v = g.gamma.back();
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 5; ++c) emp(r, c) += v[static_cast<std::size_t>(r)] *
                                                     v[static_cast<std::size_t>(c)];
    }
    emp *= 1.0 / static_cast<double>(reps);
    const double rel = frobenius_distance(emp, cov.back()) / frobenius_norm(cov.back());
    CHECK(rel < 0.10);
}

TEST_CASE("covariance curve basics") {
    const ModelParams p = make_params(0.7, 2, 5);
    const FluidPath fluid = fluid_solve(p, FluidState(5, 0.0), 1.0 / 512.0, 1.0);
    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 512.0);
    CHECK(cov.v.front()(0, 0) == 0.0);  // V(0) = 0
    CHECK(cov.min_eigenvalue > -1e-10);
    CHECK(cov.converged);

    SUBCASE("propagator-quadrature oracle") {
        const Matrix v_quad = covariance_by_propagator(p, fluid, 1.0, 64, 1.0 / 512.0);
        CHECK(frobenius_distance(cov.back(), v_quad) < 1e-6);
    }

    SUBCASE("small-time diagonal growth V11 ~ lambda t from zero start") {
        const double t = cov.times[1];
        CHECK(cov.diag(1, 1) == doctest::Approx(0.7 * t).epsilon(0.05));
    }

    SUBCASE("weak order one in dt via the discrete second-moment recursion") {
        // Var of the EM scheme obeys V <- (I+hG)V(I+hG)^T + hD exactly;
        // its distance to the ODE solution halves with the step.
        auto em_var = [&](double h) {
            const int n = 5;
            Matrix v(n);
            const auto steps = static_cast<std::size_t>(std::llround(1.0 / h));
            double t = 0.0;
            for (std::size_t i = 0; i < steps; ++i) {
                const FluidState x = fluid.eval(t);
                const Matrix g = drift_gradient_matrix(p, x);
                Matrix prop = Matrix::identity(n);
                prop += h * g;
                Matrix d(n);
                for (int k = 1; k <= n; ++k)
                    d(k - 1, k - 1) = rate_plus(p, x, k) + rate_minus(p, x, k);
                v = prop * v * transpose(prop) + h * d;
                t += h;
            }
            return v;
        };
        const double e1 = frobenius_distance(em_var(1.0 / 256.0), cov.back());
        const double e2 = frobenius_distance(em_var(1.0 / 512.0), cov.back());
        CHECK(e1 / e2 > 1.5);
        CHECK(e1 / e2 < 3.0);
    }
}

TEST_CASE("covariance zero-gradient decoupling") {
    // With the linear transport switched off the diagonal is the running
    // integral of the jump intensities.
    const ModelParams p = make_params(0.6, 2, 4);
    const FluidPath fluid = fluid_solve(p, FluidState(4, 0.0), 1.0 / 512.0, 1.0);
    CovarianceOptions opts;
    opts.zero_gradient = true;
    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 512.0, opts);
    for (int k = 1; k <= 4; ++k) {
        // Simpson quadrature of rate_plus + rate_minus along the path.
        const int n_int = 512;
        double acc = 0.0;
        for (int i = 0; i <= n_int; ++i) {
            const double s = static_cast<double>(i) / n_int;
            const FluidState x = fluid.eval(s);
            const double w = (i == 0 || i == n_int) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
            acc += w * (rate_plus(p, x, k) + rate_minus(p, x, k));
        }
        acc /= 3.0 * n_int;
        CHECK(cov.back()(k - 1, k - 1) == doctest::Approx(acc).epsilon(1e-8));
    }
    // Off-diagonal stays zero without transport.
    CHECK(std::abs(cov.back()(0, 1)) < 1e-14);
}

TEST_CASE("variance-domination report") {
    const ModelParams p = make_params(0.7, 2, 6);
    const ScaleVector a = scale_sequence(p);

    SUBCASE("stationary start: finite ratio, coarse bound holds") {
        const FluidPath fluid = fluid_solve(p, fixed_point_state(a), 1.0 / 512.0, 1.0);
        const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 512.0);
        const VarianceDominationReport rep = check_variance_domination(p, cov, fluid, a);
        CHECK(std::isfinite(rep.c0_hat));
        CHECK(rep.c0_hat > 0.0);
        CHECK(rep.moment_bound_ok);
    }

    SUBCASE("zero start: early degenerate denominators are skipped") {
        const FluidPath fluid = fluid_solve(p, FluidState(6, 0.0), 1.0 / 512.0, 1.0);
        const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 512.0);
        const VarianceDominationReport rep = check_variance_domination(p, cov, fluid, a);
        CHECK(rep.degenerate_points > 0);
        CHECK(std::isfinite(rep.c0_hat));
        CHECK(rep.moment_bound_ok);
        // V11(t)/(x0 - x1) ~ lambda t at small times.
        const double t = cov.times[2];
        const FluidState x = fluid.eval(t);
        const double ratio = cov.diag(2, 1) / (1.0 - x[1]);
        CHECK(ratio == doctest::Approx(0.7 * t).epsilon(0.1));
    }
}

TEST_CASE("gaussian path and covariance CSV smoke") {
    const ModelParams p = make_params(0.5, 2, 4);
    const FluidPath fluid = fluid_solve(p, FluidState(4, 0.0), 1.0 / 32.0, 0.25);
    const GaussianPath g = simulate_gamma(p, fluid, 1.0 / 32.0, RngStream{2, 2}, {});
    g.write_csv("/tmp/smkt_gamma_test.csv");
    std::ifstream in("/tmp/smkt_gamma_test.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "t,gamma1,gamma2,gamma3,gamma4");

    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 32.0);
    cov.write_csv("/tmp/smkt_cov_test.csv");
    std::ifstream cin("/tmp/smkt_cov_test.csv");
    std::getline(cin, header);
    CHECK(header == "t,V11,V22,V33,V44");
}

TEST_CASE("fluctuation comparison table") {
    const ModelParams p = make_params(0.7, 2, 4);
    const FluidPath fluid = fluid_solve(p, FluidState(4, 0.0), 1.0 / 256.0, 1.0);
    const CovarianceCurve cov = covariance_solve(p, fluid, 1.0 / 256.0);

    SUBCASE("same-law KS calibration") {
        int rejections = 0;
        for (int rep = 0; rep < 40; ++rep) {
            FluctuationSamples s;
            s.level = 1;
            s.t = 1.0;
            for (int i = 0; i < 500; ++i) {
                const GaussianPath g1 =
                    simulate_gamma(p, fluid, 1.0 / 32.0,
                                   RngStream{static_cast<std::uint64_t>(rep), 2 * static_cast<std::uint64_t>(i)}, {});
                s.ctmc.push_back(g1.gamma.back()[0]);
                const GaussianPath g2 =
                    simulate_gamma(p, fluid, 1.0 / 32.0,
                                   RngStream{static_cast<std::uint64_t>(rep), 2 * static_cast<std::uint64_t>(i) + 1}, {});
                s.gauss.push_back(g2.gamma.back()[0]);
            }
            const auto out = compare_fluctuations({s}, cov);
            if (out[0].ks_p_value < 0.01) ++rejections;
        }
        CHECK(rejections <= 3);
    }

    SUBCASE("insufficient replicas rejected") {
        FluctuationSamples s;
        s.level = 1;
        s.t = 1.0;
        s.ctmc.assign(10, 0.0);
        s.gauss.assign(10, 0.0);
        CHECK_THROWS_AS(compare_fluctuations({s}, cov), std::invalid_argument);
    }
}
