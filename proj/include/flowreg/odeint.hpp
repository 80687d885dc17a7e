#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace flowreg {

using State = std::vector<double>;

/// Parameterized dynamics f(y, t, theta) with an exact reverse-mode
/// vector-Jacobian product.
struct DynamicsFn {
    virtual ~DynamicsFn() = default;

    virtual void eval(std::span<const double> y, double t, std::span<const double> params,
                      std::span<double> dy) const = 0;

    /// Given the cotangent of f's output, writes d<cot, f>/dy into grad_y
    /// (overwritten) and accumulates d<cot, f>/dparams into grad_params.
    virtual void vjp(std::span<const double> y, double t, std::span<const double> params,
                     std::span<const double> cotangent, std::span<double> grad_y,
                     std::span<double> grad_params) const = 0;
};

enum class SolverMethod { euler, rk4 };

struct SolverConfig {
    SolverMethod method = SolverMethod::rk4;
    int steps_per_unit_time = 8;
    double rtol = 1e-3;  // accepted for config fidelity; fixed-step methods ignore it
    double atol = 1e-5;  // accepted; ignored
};

/// Fixed-step integration from t0 to t1. Step size 1/steps_per_unit_time,
/// ceil((t1-t0)*steps_per_unit_time) steps, last step shortened to land
/// exactly on t1. Throws std::runtime_error naming the step index if a
/// non-finite state appears.
State integrate(const DynamicsFn& f, std::span<const double> params, const State& y0, double t0,
                double t1, const SolverConfig& cfg);

/// States at each requested time, integrated as one continuous trajectory
/// (states[k] continues from states[k-1]). times must be strictly
/// ascending with times[0] == 0; states[0] == y0.
std::vector<State> integrate_trajectory(const DynamicsFn& f, std::span<const double> params,
                                        const State& y0, std::span<const double> times,
                                        const SolverConfig& cfg);

struct Gradients {
    std::vector<double> params;
    State y0;
};

/// Gradient of sum_k <cotangents[k], y(times[k])> via the adjoint method:
/// the adjoint state is swept backward through the same fixed-step
/// schedule, cotangents injected at each observation time, and the
/// forward states each reverse step needs are recomputed by re-integrating
/// forward inside the enclosing observation segment. Memory is independent
/// of the total step count.
Gradients adjoint_gradients(const DynamicsFn& f, std::span<const double> params, const State& y0,
                            std::span<const double> times, const std::vector<State>& cotangents,
                            const SolverConfig& cfg);

/// Same, reusing observation states from an earlier forward pass
/// (obs_states[0] must be the initial state).
Gradients adjoint_gradients_from_states(const DynamicsFn& f, std::span<const double> params,
                                        const std::vector<State>& obs_states,
                                        std::span<const double> times,
                                        const std::vector<State>& cotangents,
                                        const SolverConfig& cfg);

/// Same gradient by recording every solver stage in the forward pass and
/// reverse-accumulating through the records. Memory grows with step
/// count; intended for small instances and as the adjoint's oracle.
Gradients direct_gradients(const DynamicsFn& f, std::span<const double> params, const State& y0,
                           std::span<const double> times, const std::vector<State>& cotangents,
                           const SolverConfig& cfg);

/// Central finite differences of sum_k <cotangents[k], y(times[k])> at the
/// listed parameter / initial-state coordinates. Self-check oracle.
Gradients finite_difference_gradients(const DynamicsFn& f, std::span<const double> params,
                                      const State& y0, std::span<const double> times,
                                      const std::vector<State>& cotangents, const SolverConfig& cfg,
                                      double h, std::span<const std::size_t> param_coords,
                                      std::span<const std::size_t> y0_coords);

}  // namespace flowreg
