#include <doctest.h>

#include <stdexcept>
#include <cmath>

#include "smkt/rng.hpp"
#include "smkt/stats.hpp"

using namespace smkt;

TEST_CASE("moments of a known sample") {
    const std::vector<double> xs = {1.0, 2.0, 3.0, 4.0, 10.0};
    const SampleMoments m = sample_moments(xs);
    CHECK(m.mean == doctest::Approx(4.0));
    CHECK(m.variance == doctest::Approx(12.5));
    CHECK(m.skewness > 0.5);  // right tail
}

TEST_CASE("quantiles") {
    std::vector<double> xs;
    for (int i = 100; i >= 1; --i) xs.push_back(i);
    CHECK(median(xs) == doctest::Approx(50.5));
    CHECK(quantile(xs, 0.0) == 1.0);
    CHECK(quantile(xs, 1.0) == 100.0);
}

TEST_CASE("two-sample KS basics") {
    std::vector<double> a, b;
    Rng rng(RngStream{42, 0});
    for (int i = 0; i < 500; ++i) {
        const double v = rng.normal();
        a.push_back(v);
        b.push_back(v);
    }
    const KsResult same = ks_two_sample(a, b);
    CHECK(same.statistic == 0.0);
    CHECK(same.p_value == doctest::Approx(1.0));
}

TEST_CASE("KS null calibration near the nominal level") {
    // Two standard-normal samples with disjoint seeds, 200 repetitions:
    // rejection rate at the 1% level should look like 1%.
    int rejections = 0;
    for (int rep = 0; rep < 200; ++rep) {
        Rng r1(RngStream{1000 + static_cast<std::uint64_t>(rep), 1});
        Rng r2(RngStream{1000 + static_cast<std::uint64_t>(rep), 2});
        std::vector<double> a(1000), b(1000);
        for (auto& v : a) v = r1.normal();
        for (auto& v : b) v = r2.normal();
        if (ks_two_sample(a, b).p_value < 0.01) ++rejections;
    }
    CHECK(rejections <= 8);  // Binomial(200, 0.01): P(>8) ~ 2e-4
}

TEST_CASE("KS power against a unit mean shift") {
    Rng r1(RngStream{9, 1});
    Rng r2(RngStream{9, 2});
    std::vector<double> a(1000), b(1000);
    for (auto& v : a) v = r1.normal();
    for (auto& v : b) v = r2.normal() + 1.0;
    const KsResult ks = ks_two_sample(a, b);
    CHECK(ks.p_value < 1e-6);
    CHECK(ks.statistic == doctest::Approx(0.38).epsilon(0.2));
}

TEST_CASE("KS degenerate fallback") {
    const std::vector<double> a(100, 2.0), b(100, 2.0), c(100, 3.0);
    CHECK(ks_two_sample(a, b).p_value == 1.0);
    CHECK(ks_two_sample(a, c).p_value == 0.0);
}

TEST_CASE("Wilson interval") {
    const WilsonInterval w = wilson_interval(10, 100, 1.96);
    CHECK(w.point == doctest::Approx(0.1));
    CHECK(w.lower > 0.04);
    CHECK(w.upper < 0.18);
    CHECK(wilson_interval(0, 50, 1.96).lower == 0.0);
}

TEST_CASE("normal quantile") {
    CHECK(normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-5));
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-8));
    CHECK(normal_quantile(0.01) == doctest::Approx(-2.326348).epsilon(1e-5));
}

TEST_CASE("chi-square quantile (Wilson-Hilferty)") {
    CHECK(chi_square_quantile(0.99, 100.0) == doctest::Approx(135.807).epsilon(0.005));
    CHECK(chi_square_quantile(0.5, 10.0) == doctest::Approx(9.342).epsilon(0.01));
}

namespace {
int poisson_draw(Rng& rng, double mean) {
    // Inversion by multiplication; fine for the small means used here.
    const double limit = std::exp(-mean);
    int k = 0;
    double prod = rng.uniform();
    while (prod > limit) {
        ++k;
        prod *= rng.uniform();
    }
    return k;
}
}  // namespace

TEST_CASE("Poisson dispersion test calibration") {
    Rng rng(RngStream{77, 0});
    int failures = 0;
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> counts(400);
        for (auto& c : counts) c = poisson_draw(rng, 12.0);
        const DispersionResult dr = poisson_dispersion_test(counts, 12.0, 0.01);
        if (!dr.pass || std::abs(dr.mean_z) > 4.0) ++failures;
    }
    CHECK(failures <= 6);

    // Over-dispersed data must fail.
    std::vector<double> bad(400);
    for (std::size_t i = 0; i < bad.size(); ++i)
        bad[i] = (i % 2 == 0) ? poisson_draw(rng, 4.0) : poisson_draw(rng, 20.0);
    CHECK_FALSE(poisson_dispersion_test(bad, 12.0, 0.01).pass);
}
