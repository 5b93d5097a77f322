#pragma once

#include <cstdint>
#include <vector>

namespace smkt {

/// Fixed constants of one model instance. `lambda` is the per-server
/// arrival intensity, `d` the number of queues each customer samples,
/// `n_servers` the system size N. `t0` is the experiment horizon, `rho`
/// the envelope constant and `k_max` the truncation depth of the level
/// vector.
struct ModelParams {
    double lambda = 0.5;
    int d = 2;
    std::int64_t n_servers = 1;
    double t0 = 1.0;
    double rho = 1.0;
    int k_max = 3;

    /// Throws std::invalid_argument unless 0<lambda<1, d>=2, N>=1,
    /// t0>0, rho>=1, k_max>=3.
    void validate() const;
};

/// Scales a_k = lambda^{1+d+...+d^{k-1}}; the natural magnitude of level k.
/// Entries that underflow double precision are clamped to zero and the
/// first such level is recorded.
struct ScaleVector {
    std::vector<double> a;               // a[0] = a_1
    int first_underflow_level = 0;       // 0 if none underflowed

    int levels() const { return static_cast<int>(a.size()); }
    double at(int k) const { return a[static_cast<std::size_t>(k) - 1]; }  // k in 1..levels
    bool has_underflow() const { return first_underflow_level > 0; }
};

/// Truncated real level vector x = (x^1..x^{k_max}) with the boundary
/// conventions x^0 = 1 and x^{k_max+1} = 0 built into level().
struct FluidState {
    std::vector<double> x;

    FluidState() = default;
    explicit FluidState(int k_max, double fill = 0.0) : x(static_cast<std::size_t>(k_max), fill) {}
    explicit FluidState(std::vector<double> values) : x(std::move(values)) {}

    int levels() const { return static_cast<int>(x.size()); }
    double level(int k) const {
        if (k <= 0) return 1.0;
        if (k > levels()) return 0.0;
        return x[static_cast<std::size_t>(k) - 1];
    }
    double& operator[](int k) { return x[static_cast<std::size_t>(k) - 1]; }  // 1-based
    double operator[](int k) const { return x[static_cast<std::size_t>(k) - 1]; }
};

/// Integer tail counts n_k = #{queues with >= k customers}; the exact
/// chain state is X^k = n_k / N.
struct TailState {
    std::vector<std::int64_t> counts;  // counts[0] = n_1
    std::int64_t n_servers = 0;

    int levels() const { return static_cast<int>(counts.size()); }
    std::int64_t count(int k) const {
        if (k <= 0) return n_servers;
        if (k > levels()) return 0;
        return counts[static_cast<std::size_t>(k) - 1];
    }
    double fraction(int k) const {
        return static_cast<double>(count(k)) / static_cast<double>(n_servers);
    }
    FluidState to_fluid() const;
    /// n_k monotone non-increasing, within [0, N].
    bool is_valid() const;
};

/// Constants derived from (params, N): sigma = rho+1, the scaled Lipschitz
/// constant L, the Hessian constant H, the balance exponent alpha solving
/// N lambda^{d^alpha} = 1.
struct DerivedConstants {
    double sigma = 0.0;
    double lipschitz = 0.0;   // L = 2(d sigma^{d-1} + 1)
    double hessian = 0.0;     // H = d(d-1) sigma^{d-2} / 2
    double alpha = 0.0;
};

ScaleVector scale_sequence(const ModelParams& params);
DerivedConstants derived_constants(const ModelParams& params);

/// Kernel rates, extended to all of R^{k_max} with positive parts:
/// rate_plus  = lambda ((y^{k-1})^d - (y^k)^d)^+,
/// rate_minus = (y^k - y^{k+1})^+, where y^j = (x^j)^+.
double rate_plus(const ModelParams& params, const FluidState& x, int k);
double rate_minus(const ModelParams& params, const FluidState& x, int k);

/// Drift b^k = rate_plus - rate_minus, componentwise for k = 1..k_max.
FluidState drift(const ModelParams& params, const FluidState& x);

/// Directional derivative of the (unextended) drift at x in S0:
/// (grad b(x) y)^k = lambda d (x^{k-1})^{d-1} y^{k-1}
///                 - lambda d (x^k)^{d-1} y^k - y^k + y^{k+1},
/// with y^0 = 0 and y^{k_max+1} = 0.
std::vector<double> drift_gradient(const ModelParams& params, const FluidState& x,
                                   const std::vector<double>& y);

/// Column j of the gradient as a dense matrix row action is assembled by
/// the propagator solver; this returns the three nonzero coefficients of
/// row k: (coefficient of y^{k-1}, of y^k, of y^{k+1}).
struct GradientRow {
    double sub = 0.0;    // multiplies y^{k-1}
    double diag = 0.0;   // multiplies y^k
    double super = 0.0;  // multiplies y^{k+1}
};
GradientRow drift_gradient_row(const ModelParams& params, const FluidState& x, int k);

/// Smallest k with N a_k <= threshold. Throws std::runtime_error when no
/// level within the truncation qualifies (k_max too small).
int cutoff_level(std::int64_t n_servers, const ScaleVector& a, double threshold);

/// Paper-default cutoff threshold (log N)^4.
double default_cutoff_threshold(std::int64_t n_servers);

/// sup_k |x^k| / a_k, with the convention 0/0 = 0 for underflowed scales.
double scaled_norm(const FluidState& x, const ScaleVector& a);

/// Membership in S0 (componentwise in [0,1], non-increasing), up to slack.
bool in_s0(const FluidState& x, double slack = 0.0);

/// The fixed point a as a FluidState of the same truncation.
FluidState fixed_point_state(const ScaleVector& a);

/// Tail counts floor(N a_k), repaired to be monotone non-increasing.
/// Levels above `truncate_level` (if positive) are zeroed first.
TailState rounded_fixed_point(const ModelParams& params, const ScaleVector& a,
                              int truncate_level = 0);

}  // namespace smkt
