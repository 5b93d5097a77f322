#include <doctest.h>

#include <cmath>
#include <limits>
#include <stdexcept>

#include "smkt/model.hpp"
#include "smkt/rng.hpp"

using namespace smkt;

namespace {
ModelParams make_params(double lambda, int d, int k_max = 8) {
    ModelParams p;
    p.lambda = lambda;
    p.d = d;
    p.n_servers = 1000;
    p.t0 = 1.0;
    p.rho = 1.0;
    p.k_max = k_max;
    return p;
}
}  // namespace

TEST_CASE("scale sequence closed forms") {
    const ModelParams p = make_params(0.5, 2, 3);
    const ScaleVector a = scale_sequence(p);
    CHECK(a.at(1) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(a.at(2) == doctest::Approx(0.125).epsilon(1e-14));
    CHECK(a.at(3) == doctest::Approx(0.0078125).epsilon(1e-14));

    // a_1 = lambda for any (lambda, d).
    for (double lambda : {0.3, 0.9}) {
        for (int d : {2, 3, 4}) {
            const ScaleVector s = scale_sequence(make_params(lambda, d, 4));
            CHECK(s.at(1) == doctest::Approx(lambda).epsilon(1e-15));
        }
    }

    // Direct log-space evaluation: a_5 = 0.9^31 for d=2.
    const ScaleVector s9 = scale_sequence(make_params(0.9, 2, 5));
    CHECK(s9.at(5) == doctest::Approx(std::pow(0.9, 31)).epsilon(1e-12));
    CHECK(s9.at(5) == doctest::Approx(0.03815).epsilon(1e-3));
}

TEST_CASE("scale recursion a_{k+1} = lambda a_k^d") {
    for (double lambda : {0.3, 0.5, 0.7, 0.9}) {
        for (int d : {2, 3}) {
            const ModelParams p = make_params(lambda, d, 12);
            const ScaleVector a = scale_sequence(p);
            for (int k = 1; k < p.k_max; ++k) {
                const double expect = lambda * std::pow(a.at(k), d);
                if (a.at(k + 1) == 0.0) {
                    CHECK(expect < 1e-290);  // underflow clamp is flagged
                    CHECK(a.has_underflow());
                } else {
                    CHECK(a.at(k + 1) ==
                          doctest::Approx(expect).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("scale underflow is clamped and flagged") {
    const ModelParams p = make_params(0.3, 3, 12);
    const ScaleVector a = scale_sequence(p);
    CHECK(a.has_underflow());
    CHECK(a.at(a.first_underflow_level) == 0.0);
    CHECK(a.at(a.first_underflow_level - 1) > 0.0);
}

TEST_CASE("kernel rates: closed-form examples") {
    const ModelParams p = make_params(0.5, 2, 3);
    SUBCASE("empty system") {
        const FluidState zero(3, 0.0);
        CHECK(rate_plus(p, zero, 1) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(rate_minus(p, zero, 1) == 0.0);
    }
    SUBCASE("hand-evaluated point") {
        FluidState x(3, 0.0);
        x[1] = 0.5;
        CHECK(rate_plus(p, x, 1) == doctest::Approx(0.375).epsilon(1e-15));
        CHECK(rate_minus(p, x, 1) == doctest::Approx(0.5).epsilon(1e-15));
    }
    SUBCASE("balanced at the fixed point") {
        for (double lambda : {0.3, 0.7}) {
            for (int d : {2, 3}) {
                const ModelParams q = make_params(lambda, d, 8);
                const ScaleVector a = scale_sequence(q);
                const FluidState fp = fixed_point_state(a);
                for (int k = 1; k <= q.k_max - 1; ++k)
                    CHECK(rate_plus(q, fp, k) ==
                          doctest::Approx(rate_minus(q, fp, k)).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("rates stay nonnegative on arbitrary inputs") {
    const ModelParams p = make_params(0.7, 2, 6);
    Rng rng(RngStream{7, 7});
    for (int trial = 0; trial < 200; ++trial) {
        FluidState x(6);
        for (int k = 1; k <= 6; ++k) x[k] = 3.0 * rng.uniform() - 1.5;
        for (int k = 1; k <= 6; ++k) {
            CHECK(rate_plus(p, x, k) >= 0.0);
            CHECK(rate_minus(p, x, k) >= 0.0);
        }
    }
}

TEST_CASE("drift examples and fixed point") {
    const ModelParams p = make_params(0.5, 2, 3);
    SUBCASE("empty system feeds level 1 only") {
        const FluidState b = drift(p, FluidState(3, 0.0));
        CHECK(b[1] == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(b[2] == 0.0);
        CHECK(b[3] == 0.0);
    }
    SUBCASE("hand value") {
        FluidState x(3, 0.0);
        x[1] = 0.5;
        const FluidState b = drift(p, x);
        CHECK(b[1] == doctest::Approx(-0.125).epsilon(1e-14));
    }
    SUBCASE("b(a) = 0 in scaled norm over the grid") {
        for (double lambda : {0.3, 0.5, 0.7, 0.9}) {
            for (int d : {2, 3}) {
                const ModelParams q = make_params(lambda, d, 12);
                const ScaleVector a = scale_sequence(q);
                const double norm = scaled_norm(drift(q, fixed_point_state(a)), a);
                CHECK(norm < 1e-12);
            }
        }
    }
}

TEST_CASE("drift gradient rows and hand value") {
    const ModelParams p = make_params(0.5, 2, 3);
    FluidState x(3);
    x[1] = 0.5;
    x[2] = 0.125;
    x[3] = 0.0078125;

    // Coefficient read-offs.
    std::vector<double> e2 = {0.0, 1.0, 0.0};
    const std::vector<double> g2 = drift_gradient(p, x, e2);
    CHECK(g2[0] == doctest::Approx(1.0).epsilon(1e-15));        // y = e_{k+1} row k
    const GradientRow row1 = drift_gradient_row(p, x, 1);
    CHECK(row1.diag == doctest::Approx(-0.5 * 2 * 0.5 - 1.0).epsilon(1e-15));

    std::vector<double> e1 = {1.0, 0.0, 0.0};
    const std::vector<double> g1 = drift_gradient(p, x, e1);
    CHECK(g1[0] == doctest::Approx(-1.5).epsilon(1e-14));
}

TEST_CASE("gradient matches central differences with O(h^2) decay") {
    const ModelParams p = make_params(0.7, 3, 6);
    const ScaleVector a = scale_sequence(p);
    Rng rng(RngStream{11, 3});
    for (int trial = 0; trial < 10; ++trial) {
        FluidState x(6);
        double prev = 1.0;
        for (int k = 1; k <= 6; ++k) {
            x[k] = std::min(0.9 * prev, a.at(k) * (0.4 + 0.4 * rng.uniform()));
            prev = x[k];
        }
        std::vector<double> y(6);
        for (int k = 1; k <= 6; ++k)
            y[static_cast<std::size_t>(k) - 1] = a.at(k) * (2.0 * rng.uniform() - 1.0);
        const std::vector<double> g = drift_gradient(p, x, y);
        double err_coarse = 0.0, err_fine = 0.0;
        for (double h : {1e-4, 1e-5}) {
            FluidState xp = x, xm = x;
            for (int k = 1; k <= 6; ++k) {
                xp[k] += h * y[static_cast<std::size_t>(k) - 1];
                xm[k] -= h * y[static_cast<std::size_t>(k) - 1];
            }
            const FluidState bp = drift(p, xp);
            const FluidState bm = drift(p, xm);
            double err = 0.0;
            for (int k = 1; k <= 6; ++k)
                err = std::max(err, std::abs((bp[k] - bm[k]) / (2.0 * h) -
                                             g[static_cast<std::size_t>(k) - 1]));
            (h == 1e-4 ? err_coarse : err_fine) = err;
        }
        CHECK(err_coarse < 1e-6);
        CHECK(err_fine <= err_coarse / 10.0 + 1e-10);
    }
}

TEST_CASE("cutoff level scan") {
    SUBCASE("N=100, paper-default threshold") {
        const ModelParams p = make_params(0.5, 2, 10);
        const ScaleVector a = scale_sequence(p);
        const double thr = default_cutoff_threshold(100);
        CHECK(thr == doctest::Approx(std::pow(std::log(100.0), 4)).epsilon(1e-15));
        CHECK(cutoff_level(100, a, thr) == 1);
    }
    SUBCASE("N=1e6, lambda=0.9: brute-scan confirmation") {
        const ModelParams p = make_params(0.9, 2, 10);
        const ScaleVector a = scale_sequence(p);
        const double thr = default_cutoff_threshold(1000000);
        // Scanned values: N a_5 = 38151.6... > thr, N a_6 = 1312.1... <= thr.
        CHECK(1e6 * a.at(5) > thr);
        CHECK(1e6 * a.at(6) == doctest::Approx(1310.02).epsilon(1e-4));
        CHECK(cutoff_level(1000000, a, thr) == 6);
    }
    SUBCASE("N=1e5, desk-scale A=5") {
        const ModelParams p = make_params(0.5, 2, 10);
        const ScaleVector a = scale_sequence(p);
        CHECK(cutoff_level(100000, a, 5.0) == 4);
        CHECK(1e5 * a.at(4) == doctest::Approx(3.0517578125).epsilon(1e-12));
    }
    SUBCASE("failure when truncation too small") {
        const ModelParams p = make_params(0.9, 2, 3);
        const ScaleVector a = scale_sequence(p);
        CHECK_THROWS_AS(cutoff_level(1000000000, a, 1.0), std::runtime_error);
    }
}

TEST_CASE("scaled norm") {
    const ModelParams p = make_params(0.5, 2, 6);
    const ScaleVector a = scale_sequence(p);
    const FluidState fp = fixed_point_state(a);
    CHECK(scaled_norm(fp, a) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(scaled_norm(FluidState(6, 0.0), a) == 0.0);
    FluidState twice(6);
    for (int k = 1; k <= 6; ++k) twice[k] = 2.0 * a.at(k);
    CHECK(scaled_norm(twice, a) == doctest::Approx(2.0).epsilon(1e-14));

    // 0/0 convention at underflowed scales.
    const ModelParams q = make_params(0.3, 3, 12);
    const ScaleVector au = scale_sequence(q);
    REQUIRE(au.has_underflow());
    FluidState z(12, 0.0);
    CHECK(scaled_norm(z, au) == 0.0);
    z[12] = 1e-300;
    CHECK(std::isinf(scaled_norm(z, au)));
}

TEST_CASE("scaled Lipschitz bound on the drift") {
    // |b^k(x)-b^k(y)|/sqrt(a_k) <= L sup_{j=k-1,k,k+1} |x^j-y^j|/sqrt(a_j)
    // whenever both states sit below sigma a componentwise.
    for (int d : {2, 3}) {
        const ModelParams p = make_params(0.7, d, 8);
        const ScaleVector a = scale_sequence(p);
        const DerivedConstants dc = derived_constants(p);
        Rng rng(RngStream{5, static_cast<std::uint64_t>(d)});
        for (int trial = 0; trial < 100; ++trial) {
            FluidState x(8), y(8);
            for (int k = 1; k <= 8; ++k) {
                x[k] = dc.sigma * a.at(k) * rng.uniform();
                y[k] = dc.sigma * a.at(k) * rng.uniform();
            }
            for (int k = 1; k <= 8; ++k) {
                if (a.at(k) == 0.0 || (k < 8 && a.at(k + 1) == 0.0)) continue;
                const double lhs =
                    std::abs((rate_plus(p, x, k) - rate_minus(p, x, k)) -
                             (rate_plus(p, y, k) - rate_minus(p, y, k))) /
                    std::sqrt(a.at(k));
                double sup = 0.0;
                for (int j = k - 1; j <= k + 1; ++j) {
                    if (j < 1 || j > 8) continue;
                    sup = std::max(sup, std::abs(x.level(j) - y.level(j)) /
                                            std::sqrt(a.at(j)));
                }
                CHECK(lhs <= dc.lipschitz * sup * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}

TEST_CASE("derived constants") {
    ModelParams p = make_params(0.5, 2, 6);
    p.rho = 1.0;
    p.n_servers = 100000;
    const DerivedConstants c = derived_constants(p);
    CHECK(c.sigma == 2.0);
    CHECK(c.lipschitz == doctest::Approx(2.0 * (2.0 * 2.0 + 1.0)).epsilon(1e-15));
    CHECK(c.hessian == doctest::Approx(1.0).epsilon(1e-15));
    // N lambda^{d^alpha} = 1.
    const double check = 1e5 * std::pow(0.5, std::pow(2.0, c.alpha));
    CHECK(check == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("parameter validation") {
    ModelParams p = make_params(0.5, 2, 6);
    CHECK_NOTHROW(p.validate());
    p.lambda = 1.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = make_params(0.5, 1, 6);
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = make_params(0.5, 2, 2);
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("rounded fixed point is a valid monotone state") {
    ModelParams p = make_params(0.7, 2, 8);
    p.n_servers = 10000;
    const ScaleVector a = scale_sequence(p);
    const TailState st = rounded_fixed_point(p, a);
    CHECK(st.is_valid());
    CHECK(st.count(1) ==
          static_cast<std::int64_t>(std::floor(10000.0 * a.at(1))));
    CHECK(std::abs(st.count(2) - 3430) <= 1);
    const TailState cut = rounded_fixed_point(p, a, 3);
    CHECK(cut.is_valid());
    CHECK(cut.count(4) == 0);
    CHECK(cut.count(3) == st.count(3));
}
