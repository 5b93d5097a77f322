#pragma once

#include <string>
#include <vector>

#include "smkt/matrix.hpp"
#include "smkt/model.hpp"

namespace smkt {

/// Trajectory of the limit ODE dx/dt = b(x) on a uniform grid, with the
/// drifts stored for cubic Hermite dense output. States are projected to
/// S0 after every step; the largest projection applied is recorded.
class FluidPath {
public:
    FluidPath() = default;
    FluidPath(std::vector<double> times, std::vector<FluidState> states,
              std::vector<FluidState> drifts);

    const std::vector<double>& times() const { return times_; }
    const std::vector<FluidState>& states() const { return states_; }
    const FluidState& state(std::size_t i) const { return states_[i]; }
    const FluidState& drift_at(std::size_t i) const { return drifts_[i]; }
    double t_begin() const { return times_.front(); }
    double t_end() const { return times_.back(); }
    int levels() const { return states_.empty() ? 0 : states_.front().levels(); }

    /// Dense output by cubic Hermite interpolation on the enclosing grid
    /// interval (fourth-order consistent with the RK4 grid values).
    FluidState eval(double t) const;
    double eval_level(double t, int k) const;

    /// max |projection| applied across all steps.
    double max_projection = 0.0;
    /// Scaled-norm disagreement between the dt and dt/2 runs at t_end.
    double halving_error = 0.0;
    bool converged = true;

    void write_csv(const std::string& path) const;

private:
    std::size_t locate(double t) const;

    std::vector<double> times_;
    std::vector<FluidState> states_;
    std::vector<FluidState> drifts_;
};

/// RK4 with fixed step dt from x0 over [0, t_end] (t_end defaults to
/// params.t0). Throws if x0 is outside S0. Convergence is validated by a
/// dt/2 re-run; disagreement above `halving_tol` in scaled norm clears
/// the converged flag.
FluidPath fluid_solve(const ModelParams& params, const FluidState& x0, double dt,
                      double t_end = -1.0, double halving_tol = 1e-8);

/// Matrix flow Phi_{t,s} of the ODE linearized along the fluid path.
struct Propagator {
    double s = 0.0;
    double t = 0.0;
    Matrix matrix;
};

/// RK4 on dPhi/dt = grad b(x_t) Phi, Phi_{s,s} = I, along the stored path.
/// Step defaults to the path's own grid step.
Propagator propagator_solve(const ModelParams& params, const FluidPath& path, double s,
                            double t, double dt = -1.0);

/// Gradient matrix grad b(x) as a dense (tridiagonal) matrix.
Matrix drift_gradient_matrix(const ModelParams& params, const FluidState& x);

enum class ComparisonResult {
    ordered,         // componentwise order held at every grid time
    violated,        // ordered at t=0 but broken later
    not_applicable,  // initial states not componentwise ordered
};

/// Checks the monotone comparison property: pathA <= pathB componentwise
/// for all grid times, given ordering at time 0. Slack absorbs solver
/// round-off.
ComparisonResult comparison_check(const FluidPath& a, const FluidPath& b,
                                  double slack = 1e-10);

/// True iff the scaled norm stays within rho at every grid time.
bool in_envelope(const FluidPath& path, const ScaleVector& a, double rho);

}  // namespace smkt
