#include "smkt/fluid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace smkt {

FluidPath::FluidPath(std::vector<double> times, std::vector<FluidState> states,
                     std::vector<FluidState> drifts)
    : times_(std::move(times)), states_(std::move(states)), drifts_(std::move(drifts)) {}

std::size_t FluidPath::locate(double t) const {
    // Uniform grid; clamp to valid interval index.
    const double h = times_.size() > 1 ? times_[1] - times_[0] : 1.0;
    const double pos = (t - times_.front()) / h;
    auto i = static_cast<std::ptrdiff_t>(pos);
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(times_.size()) - 2);
    return static_cast<std::size_t>(i);
}

FluidState FluidPath::eval(double t) const {
    if (states_.size() == 1) return states_.front();
    const std::size_t i = locate(t);
    const double h = times_[i + 1] - times_[i];
    const double u = std::clamp((t - times_[i]) / h, 0.0, 1.0);
    const double u2 = u * u;
    const double u3 = u2 * u;
    const double h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    const double h10 = u3 - 2.0 * u2 + u;
    const double h01 = -2.0 * u3 + 3.0 * u2;
    const double h11 = u3 - u2;
    const FluidState& x0 = states_[i];
    const FluidState& x1 = states_[i + 1];
    const FluidState& d0 = drifts_[i];
    const FluidState& d1 = drifts_[i + 1];
    FluidState out(x0.levels());
    for (int k = 1; k <= x0.levels(); ++k)
        out[k] = h00 * x0[k] + h10 * h * d0[k] + h01 * x1[k] + h11 * h * d1[k];
    return out;
}

double FluidPath::eval_level(double t, int k) const {
    if (states_.size() == 1) return states_.front().level(k);
    if (k <= 0) return 1.0;
    if (k > levels()) return 0.0;
    const std::size_t i = locate(t);
    const double h = times_[i + 1] - times_[i];
    const double u = std::clamp((t - times_[i]) / h, 0.0, 1.0);
    const double u2 = u * u;
    const double u3 = u2 * u;
    return (2.0 * u3 - 3.0 * u2 + 1.0) * states_[i][k] +
           (u3 - 2.0 * u2 + u) * h * drifts_[i][k] +
           (-2.0 * u3 + 3.0 * u2) * states_[i + 1][k] + (u3 - u2) * h * drifts_[i + 1][k];
}

void FluidPath::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("FluidPath::write_csv: cannot open " + path);
    out << "t";
    for (int k = 1; k <= levels(); ++k) out << ",x" << k;
    out << "\n";
    out.precision(17);
    for (std::size_t i = 0; i < times_.size(); ++i) {
        out << times_[i];
        for (int k = 1; k <= levels(); ++k) out << "," << states_[i][k];
        out << "\n";
    }
}

namespace {

// One RK4 step of dx/dt = b(x); returns the unprojected endpoint.
FluidState rk4_step(const ModelParams& params, const FluidState& x, double h) {
    const int n = x.levels();
    const FluidState k1 = drift(params, x);
    FluidState tmp(n);
    for (int k = 1; k <= n; ++k) tmp[k] = x[k] + 0.5 * h * k1[k];
    const FluidState k2 = drift(params, tmp);
    for (int k = 1; k <= n; ++k) tmp[k] = x[k] + 0.5 * h * k2[k];
    const FluidState k3 = drift(params, tmp);
    for (int k = 1; k <= n; ++k) tmp[k] = x[k] + h * k3[k];
    const FluidState k4 = drift(params, tmp);
    FluidState out(n);
    for (int k = 1; k <= n; ++k)
        out[k] = x[k] + h / 6.0 * (k1[k] + 2.0 * (k2[k] + k3[k]) + k4[k]);
    return out;
}

// Clamp to [0,1] and enforce monotone non-increase via a running minimum.
// Returns the largest absolute change applied.
double project_to_s0(FluidState& x) {
    double worst = 0.0;
    double prev = 1.0;
    for (int k = 1; k <= x.levels(); ++k) {
        const double raw = x[k];
        double v = std::clamp(raw, 0.0, 1.0);
        v = std::min(v, prev);
        x[k] = v;
        worst = std::max(worst, std::abs(v - raw));
        prev = v;
    }
    return worst;
}

struct RawSolution {
    std::vector<double> times;
    std::vector<FluidState> states;
    std::vector<FluidState> drifts;
    double max_projection = 0.0;
};

RawSolution integrate(const ModelParams& params, const FluidState& x0, double dt,
                      double t_end) {
    const auto n_steps = static_cast<std::size_t>(std::ceil(t_end / dt - 1e-12));
    RawSolution sol;
    sol.times.reserve(n_steps + 1);
    sol.states.reserve(n_steps + 1);
    sol.drifts.reserve(n_steps + 1);
    FluidState x = x0;
    sol.times.push_back(0.0);
    sol.states.push_back(x);
    sol.drifts.push_back(drift(params, x));
    for (std::size_t i = 1; i <= n_steps; ++i) {
        const double t_next = std::min(static_cast<double>(i) * dt, t_end);
        const double h = t_next - sol.times.back();
        x = rk4_step(params, x, h);
        sol.max_projection = std::max(sol.max_projection, project_to_s0(x));
        sol.times.push_back(t_next);
        sol.states.push_back(x);
        sol.drifts.push_back(drift(params, x));
    }
    return sol;
}

}  // namespace

FluidPath fluid_solve(const ModelParams& params, const FluidState& x0, double dt,
                      double t_end, double halving_tol) {
    if (t_end < 0.0) t_end = params.t0;
    if (!(dt > 0.0)) throw std::invalid_argument("fluid_solve: dt must be > 0");
    if (!in_s0(x0)) throw std::invalid_argument("fluid_solve: x0 outside S0");
    if (x0.levels() != params.k_max)
        throw std::invalid_argument("fluid_solve: x0 truncation != k_max");

    RawSolution coarse = integrate(params, x0, dt, t_end);
    RawSolution fine = integrate(params, x0, dt / 2.0, t_end);

    const ScaleVector a = scale_sequence(params);
    FluidState diff(params.k_max);
    const FluidState& xc = coarse.states.back();
    const FluidState& xf = fine.states.back();
    for (int k = 1; k <= params.k_max; ++k) diff[k] = xc[k] - xf[k];

    FluidPath path(std::move(coarse.times), std::move(coarse.states),
                   std::move(coarse.drifts));
    path.max_projection = coarse.max_projection;
    path.halving_error = scaled_norm(diff, a);
    path.converged = path.halving_error <= halving_tol;
    return path;
}

Matrix drift_gradient_matrix(const ModelParams& params, const FluidState& x) {
    const int n = x.levels();
    Matrix g(n);
    for (int k = 1; k <= n; ++k) {
        const GradientRow row = drift_gradient_row(params, x, k);
        if (k >= 2) g(k - 1, k - 2) = row.sub;
        g(k - 1, k - 1) = row.diag;
        if (k < n) g(k - 1, k) = row.super;
    }
    return g;
}

Propagator propagator_solve(const ModelParams& params, const FluidPath& path, double s,
                            double t, double dt) {
    if (s > t) throw std::invalid_argument("propagator_solve: need s <= t");
    if (s < path.t_begin() - 1e-12 || t > path.t_end() + 1e-12)
        throw std::invalid_argument("propagator_solve: [s,t] outside the stored path");
    if (dt <= 0.0)
        dt = path.times().size() > 1 ? path.times()[1] - path.times()[0] : (t - s);

    const int n = path.levels();
    Propagator prop;
    prop.s = s;
    prop.t = t;
    prop.matrix = Matrix::identity(n);
    if (t <= s) return prop;

    const auto n_steps = static_cast<std::size_t>(std::ceil((t - s) / dt - 1e-12));
    Matrix phi = Matrix::identity(n);
    auto grad_at = [&](double u) { return drift_gradient_matrix(params, path.eval(u)); };
    double now = s;
    for (std::size_t i = 1; i <= n_steps; ++i) {
        const double t_next = std::min(s + static_cast<double>(i) * dt, t);
        const double h = t_next - now;
        const Matrix g1 = grad_at(now);
        const Matrix g2 = grad_at(now + 0.5 * h);
        const Matrix g3 = grad_at(t_next);
        const Matrix k1 = g1 * phi;
        const Matrix k2 = g2 * (phi + (0.5 * h) * k1);
        const Matrix k3 = g2 * (phi + (0.5 * h) * k2);
        const Matrix k4 = g3 * (phi + h * k3);
        phi += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        now = t_next;
    }
    prop.matrix = phi;
    return prop;
}

ComparisonResult comparison_check(const FluidPath& a, const FluidPath& b, double slack) {
    if (a.times().size() != b.times().size())
        throw std::invalid_argument("comparison_check: paths on different grids");
    const int n = a.levels();
    for (int k = 1; k <= n; ++k)
        if (a.state(0)[k] > b.state(0)[k] + slack) return ComparisonResult::not_applicable;
    for (std::size_t i = 1; i < a.times().size(); ++i)
        for (int k = 1; k <= n; ++k)
            if (a.state(i)[k] > b.state(i)[k] + slack) return ComparisonResult::violated;
    return ComparisonResult::ordered;
}

bool in_envelope(const FluidPath& path, const ScaleVector& a, double rho) {
    for (const FluidState& x : path.states())
        if (scaled_norm(x, a) > rho) return false;
    return true;
}

}  // namespace smkt
