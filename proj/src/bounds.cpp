#include "smkt/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "smkt/stats.hpp"

namespace smkt {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

double BoundInputs::lipschitz() const {
    return 2.0 * (d * std::pow(sigma(), d - 1) + 1.0);
}

double BoundInputs::hessian() const {
    return 0.5 * d * (d - 1) * std::pow(sigma(), d - 2);
}

bool BoundSet::all_constraints_hold() const {
    for (const Constraint& c : constraints)
        if (!c.satisfied) return false;
    return true;
}

double BoundSet::total() const {
    double s = 0.0;
    for (double pi : p) s += pi;
    return std::min(1.0, s);
}

namespace {
Constraint make_constraint(std::string name, double lhs, double rhs, bool le) {
    Constraint c;
    c.name = std::move(name);
    c.lhs = lhs;
    c.rhs = rhs;
    c.satisfied = le ? lhs <= rhs : lhs > rhs;
    return c;
}
}  // namespace

BoundSet lln_error_bounds(const BoundInputs& in) {
    BoundSet set;
    const double n = static_cast<double>(in.n_servers);
    const double a = in.a_threshold;
    const double sig = in.sigma();
    const double el = in.lipschitz();
    const double exp_lt = std::exp(el * in.t0);
    const double n_half = std::pow(n, 0.5 * (1.0 - 1.0 / in.d));

    const double p1 = std::pow(a, in.d) * std::pow(in.r, in.d) * in.t0 / std::pow(n, in.d - 1);
    const double p2 = std::pow(a, 1.0 - 1.0 / (2.0 * in.d)) * in.d *
                      std::pow(sig, in.d - 1) * in.big_r * in.t0 / n_half;
    const double p3 = in.r > in.rho ? std::pow(in.rho, in.d) * in.t0 / (in.r - in.rho) : kInf;
    const double p4 =
        2.0 * in.m *
        std::exp(-in.big_r * in.big_r / (20.0 * std::pow(sig, in.d) * in.t0 *
                                         std::exp(2.0 * el * in.t0)));
    set.p = {p1, p2, p3, p4};
    set.formula = {"p1 = A^d r^d t0 / N^{d-1}",
                   "p2 = A^{1-1/(2d)} d sigma^{d-1} R t0 / N^{(1/2)(1-1/d)}",
                   "p3 = rho^d t0 / (r - rho)",
                   "p4 = 2 m exp(-R^2 / (20 sigma^d t0 e^{2 L t0}))"};

    set.constraints.push_back(make_constraint("A >= 1", 1.0, a, true));
    set.constraints.push_back(make_constraint("R >= 1", 1.0, in.big_r, true));
    set.constraints.push_back(make_constraint("rho >= 1", 1.0, in.rho, true));
    set.constraints.push_back(make_constraint(
        "rho A^d <= N^{d-1}", in.rho * std::pow(a, in.d), std::pow(n, in.d - 1), true));
    set.constraints.push_back(make_constraint("r > rho", in.r, in.rho, false));
    set.constraints.push_back(make_constraint(
        "R lower bracket", 2.0 * in.r * a * in.t0 * exp_lt / n_half, in.big_r, true));
    set.constraints.push_back(make_constraint(
        "R upper bracket", in.big_r, std::min(in.t0, 1.0) * std::sqrt(a), true));
    return set;
}

BoundSet jump_error_bounds(const BoundInputs& in) {
    BoundSet set;
    const double n = static_cast<double>(in.n_servers);
    const double el = in.lipschitz();
    const double exp_lt = std::exp(el * in.t0);

    const double p5 = 8.0 * (std::pow(in.rho, in.d) + 1.0) * in.t0 *
                      std::exp(2.0 * el * in.t0 * in.t0) / (in.r * in.r);
    const double p6 =
        2.0 * in.m *
        std::exp(-in.big_r_tilde * in.big_r_tilde /
                 (20.0 * in.big_r * el * in.t0 * std::exp(2.0 * el * in.t0)));
    set.p = {p5, p6};
    set.formula = {"p5 = 8 (rho^d + 1) t0 e^{2 L t0^2} / r^2",
                   "p6 = 2 m exp(-R~^2 / (20 R L t0 e^{2 L t0}))"};

    const double n_half = std::pow(n, 0.5 * (1.0 - 1.0 / in.d));
    const double n_quarter = std::pow(n, 0.25 * (1.0 - 1.0 / in.d));
    set.constraints.push_back(
        make_constraint("r A <= N^{(1/2)(1-1/d)}", in.r * in.a_threshold, n_half, true));
    const double lower = 4.0 * in.hessian() * in.big_r * in.big_r * in.t0 * exp_lt /
                             std::pow(n, 0.25) +
                         4.0 * in.r * in.a_threshold * in.t0 * exp_lt / n_quarter;
    set.constraints.push_back(make_constraint("R~ lower bracket", lower, in.big_r_tilde, true));
    set.constraints.push_back(make_constraint(
        "R~ upper bracket", in.big_r_tilde,
        4.0 * in.big_r * el * in.t0 * exp_lt * std::pow(in.a_threshold, 0.25), true));
    return set;
}

BoundSet diffusion_error_bounds(const BoundInputs& in, double c) {
    BoundSet set;
    const double n = static_cast<double>(in.n_servers);
    const double a = in.a_threshold;
    const double log_a = std::log(a);

    const double p7 = c / (in.r * in.r);
    const double p8 =
        c * in.m * (1.0 / a + 1.0 / (in.big_r_bar * log_a * in.big_r_bar * log_a));
    set.p = {p7, p8};
    set.formula = {"p7 = C / r^2", "p8 = C m (1/A + 1/(Rbar log A)^2)"};

    set.constraints.push_back(make_constraint("A >= e^2", std::exp(2.0), a, true));
    set.constraints.push_back(
        make_constraint("R <= sqrt(A)/2", in.big_r, std::sqrt(a) / 2.0, true));
    const double lower =
        c + c * (in.big_r * in.big_r + in.r * a) / std::log(n);
    set.constraints.push_back(make_constraint("Rbar lower", lower, in.big_r_bar, true));
    set.constraints.push_back(
        make_constraint("Rbar upper", in.big_r_bar, a / (2.0 * log_a), true));
    return set;
}

LimitSchedules limit_schedules(std::int64_t n_servers, const ModelParams& params) {
    LimitSchedules s;
    const double n = static_cast<double>(n_servers);
    const double ln = std::log(n);
    if (!(ln > 0.0) || !(std::log(ln) > 0.0) || !(std::log(std::log(ln)) > 0.0)) {
        s.error = "N too small: log log log N must be positive (N >= 16)";
        return s;
    }
    s.ok = true;
    const double lll = std::log(std::log(ln));
    const double d = static_cast<double>(params.d);
    const double ln4 = ln * ln * ln * ln;

    s.lln_a = ln4;
    s.lln_r = std::pow(n, 0.5 * (1.0 - 1.0 / d)) / ln4;
    s.lln_big_r = ln;

    s.jump_big_r_tilde = ln;
    s.jump_s = s.jump_big_r_tilde / std::pow(lll, 0.75);
    s.jump_big_r = s.jump_s * std::sqrt(lll);
    s.jump_r = std::pow(n, 0.25 * (1.0 - 1.0 / d)) / ln4;

    s.diffusion_a = std::sqrt(ln);
    s.diffusion_r = std::sqrt(ln);
    s.diffusion_big_r = std::pow(ln, 0.25) * std::min(1.0, params.t0) / 2.0;
    const ScaleVector a = scale_sequence(params);
    s.diffusion_m_bar = 0;
    for (int k = 1; k <= a.levels(); ++k) {
        if (n * a.at(k) <= s.diffusion_a) {
            s.diffusion_m_bar = k;
            break;
        }
    }
    return s;
}

bool lln_schedule_feasible(double log_n, int d, double rho, double t0) {
    // Schedule: A = (log N)^4, r = N^{(1/2)(1-1/d)} / (log N)^4, R = log N.
    // All four constraints are products of powers, so comparisons happen
    // on logarithms; log N itself is the working variable.
    const double dd = static_cast<double>(d);
    const double sigma = rho + 1.0;
    const double el = 2.0 * (dd * std::pow(sigma, dd - 1.0) + 1.0);
    const double log_log_n = std::log(log_n);
    const double log_a = 4.0 * log_log_n;
    const double log_r = 0.5 * (1.0 - 1.0 / dd) * log_n - log_a;
    const double log_big_r = log_log_n;

    // rho A^d <= N^{d-1}
    if (std::log(rho) + dd * log_a > (dd - 1.0) * log_n) return false;
    // r > rho
    if (log_r <= std::log(rho)) return false;
    // R >= 1
    if (log_big_r < 0.0) return false;
    // 2 r A t0 e^{L t0} / N^{(1/2)(1-1/d)} <= R
    const double log_lower = std::log(2.0) + log_r + log_a + std::log(t0) + el * t0 -
                             0.5 * (1.0 - 1.0 / dd) * log_n;
    if (log_lower > log_big_r) return false;
    // R <= (t0 ^ 1) sqrt(A)
    if (log_big_r > std::log(std::min(t0, 1.0)) + 0.5 * log_a) return false;
    return true;
}

int lln_schedule_smallest_exponent(int d, double rho, double t0, int j_cap) {
    const double log2 = std::log(2.0);
    for (int j = 2; j <= j_cap; ++j) {
        if (lln_schedule_feasible(j * log2, d, rho, t0)) return j;
    }
    return 0;
}

AuditEntry bound_vs_frequency(const std::string& name, double p, bool constraints_hold,
                              std::size_t hits, std::size_t trials, double z) {
    AuditEntry e;
    e.bound_name = name;
    e.p = p;
    const WilsonInterval w = wilson_interval(hits, trials, z);
    e.freq_lower = w.lower;
    e.freq_point = w.point;
    if (!constraints_hold) {
        e.verdict = AuditVerdict::skipped;
    } else if (p >= 1.0) {
        e.verdict = AuditVerdict::vacuous;
    } else if (w.lower > p) {
        e.verdict = AuditVerdict::violation;
    } else {
        e.verdict = AuditVerdict::pass;
    }
    return e;
}

std::string to_string(AuditVerdict v) {
    switch (v) {
        case AuditVerdict::pass: return "PASS";
        case AuditVerdict::violation: return "VIOLATION";
        case AuditVerdict::vacuous: return "VACUOUS";
        case AuditVerdict::skipped: return "SKIPPED";
    }
    return "?";
}

}  // namespace smkt
