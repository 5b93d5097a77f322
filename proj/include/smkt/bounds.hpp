#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smkt/model.hpp"

namespace smkt {

/// Inputs of the error-probability propositions: model constants plus the
/// free parameters (A, r, R, R_tilde, R_bar) and the cutoff level m.
struct BoundInputs {
    std::int64_t n_servers = 0;
    double lambda = 0.5;
    int d = 2;
    double t0 = 1.0;
    double rho = 1.0;
    double a_threshold = 1.0;  // A
    double r = 2.0;
    double big_r = 1.0;        // R
    double big_r_tilde = 1.0;  // R tilde
    double big_r_bar = 1.0;    // R bar
    int m = 1;

    double sigma() const { return rho + 1.0; }
    double lipschitz() const;  // L = 2 (d sigma^{d-1} + 1)
    double hessian() const;    // H = d(d-1) sigma^{d-2} / 2
};

struct Constraint {
    std::string name;
    bool satisfied = false;
    double lhs = 0.0;
    double rhs = 0.0;
};

/// One evaluated probability bound with its constraint set and the
/// closed-form expressions the values came from.
struct BoundSet {
    std::vector<double> p;               // p_i values, possibly +inf or > 1
    std::vector<std::string> formula;    // one expression string per p_i
    std::vector<Constraint> constraints;
    bool all_constraints_hold() const;
    double total() const;                // min(1, sum p_i)
};

/// LLN error bounds p1..p4 with constraints rho A^d <= N^{d-1}, r > rho,
/// A,R,rho >= 1 and 2 r A t0 e^{L t0} / N^{(1/2)(1-1/d)} <= R <= (t0 ^ 1) sqrt(A).
BoundSet lln_error_bounds(const BoundInputs& in);

/// Jump-refinement error bounds p5, p6 with r A <= N^{(1/2)(1-1/d)} and the
/// R_tilde bracket.
BoundSet jump_error_bounds(const BoundInputs& in);

/// Diffusion error bounds p7, p8 for a supplied constant C (existence only in
/// the source material; exposed as a knob with default 1).
BoundSet diffusion_error_bounds(const BoundInputs& in, double c);

/// Representative parameter schedules used in the three limit theorems,
/// as functions of N. Fields are NaN with `ok=false` when N is too small
/// for the iterated logarithms.
struct LimitSchedules {
    bool ok = false;
    std::string error;

    // LLN regime: A = (log N)^4, r = N^{(1/2)(1-1/d)} / (log N)^4,
    // R = log N (the best-rate representative of the admissible family).
    double lln_a = 0.0, lln_r = 0.0, lln_big_r = 0.0;

    // Jump-refinement regime: R_tilde = log N, s = R_tilde / (logloglog N)^{3/4},
    // R = s (logloglog N)^{1/2}, r = N^{(1/4)(1-1/d)} / (log N)^4.
    double jump_big_r_tilde = 0.0, jump_s = 0.0, jump_big_r = 0.0, jump_r = 0.0;

    // Diffusion regime: A = r = (log N)^{1/2}, R = (log N)^{1/4} (1 ^ t0)/2,
    // cutoff m_bar from the smaller threshold.
    double diffusion_a = 0.0, diffusion_r = 0.0, diffusion_big_r = 0.0;
    int diffusion_m_bar = 0;
};

LimitSchedules limit_schedules(std::int64_t n_servers, const ModelParams& params);

/// Log-space feasibility check of the LLN schedule's constraints at
/// log N = log_n (natural log), for the doubling-grid scan: the smallest
/// passing N is astronomically large, so the scan works on exponents.
bool lln_schedule_feasible(double log_n, int d, double rho, double t0);

/// Smallest j such that N = 2^j satisfies every LLN-schedule constraint,
/// scanning j = 2..j_cap. Returns 0 if none does.
int lln_schedule_smallest_exponent(int d, double rho, double t0, int j_cap = 200000);

enum class AuditVerdict { pass, violation, vacuous, skipped };

struct AuditEntry {
    std::string bound_name;
    double p = 0.0;
    double freq_lower = 0.0;  // lower confidence bound of the MC frequency
    double freq_point = 0.0;
    AuditVerdict verdict = AuditVerdict::pass;
};

/// Compares Monte Carlo stopping frequencies against the bound values:
/// VIOLATION only when the lower confidence bound exceeds p_i while every
/// constraint of the proposition holds; vacuous bounds (p_i >= 1) and
/// constraint failures are labelled, not asserted.
AuditEntry bound_vs_frequency(const std::string& name, double p, bool constraints_hold,
                              std::size_t hits, std::size_t trials, double z = 2.576);

std::string to_string(AuditVerdict v);

}  // namespace smkt
