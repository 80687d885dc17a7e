#include "flowreg/odeint.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowreg {

namespace {

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

struct Scratch {
    State k1, k2, k3, k4, ytmp, kbar, gy;
    void resize(std::size_t n) {
        k1.resize(n);
        k2.resize(n);
        k3.resize(n);
        k4.resize(n);
        ytmp.resize(n);
        kbar.resize(n);
        gy.resize(n);
    }
};

// Steps covering [t0, t1]: nominal size 1/steps_per_unit_time, the last
// one shortened to land exactly on t1.
int segment_step_count(double t0, double t1, int spu) {
    const double span = (t1 - t0) * static_cast<double>(spu);
    if (span <= 0.0) return 0;
    return static_cast<int>(std::ceil(span));
}

void step_time(double t0, double t1, int spu, int n, int i, double& t, double& h) {
    const double hn = 1.0 / static_cast<double>(spu);
    t = t0 + static_cast<double>(i) * hn;
    h = (i == n - 1) ? (t1 - t) : hn;
}

void euler_step(const DynamicsFn& f, std::span<const double> params, double t, double h, State& y,
                Scratch& s) {
    f.eval(y, t, params, s.k1);
    axpy(h, s.k1, y);
}

void rk4_step(const DynamicsFn& f, std::span<const double> params, double t, double h, State& y,
              Scratch& s) {
    const std::size_t n = y.size();
    f.eval(y, t, params, s.k1);
    for (std::size_t i = 0; i < n; ++i) s.ytmp[i] = y[i] + 0.5 * h * s.k1[i];
    f.eval(s.ytmp, t + 0.5 * h, params, s.k2);
    for (std::size_t i = 0; i < n; ++i) s.ytmp[i] = y[i] + 0.5 * h * s.k2[i];
    f.eval(s.ytmp, t + 0.5 * h, params, s.k3);
    for (std::size_t i = 0; i < n; ++i) s.ytmp[i] = y[i] + h * s.k3[i];
    f.eval(s.ytmp, t + h, params, s.k4);
    const double h6 = h / 6.0;
    for (std::size_t i = 0; i < n; ++i)
        y[i] += h6 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
}

void take_step(const DynamicsFn& f, std::span<const double> params, const SolverConfig& cfg,
               double t, double h, State& y, Scratch& s) {
    if (h <= 0.0) return;
    if (cfg.method == SolverMethod::euler)
        euler_step(f, params, t, h, y, s);
    else
        rk4_step(f, params, t, h, y, s);
}

// Integrates y across [t0, t1] in place. step_base counts steps taken so
// far (for error reporting).
void run_segment(const DynamicsFn& f, std::span<const double> params, const SolverConfig& cfg,
                 double t0, double t1, State& y, Scratch& s, long step_base) {
    const int n = segment_step_count(t0, t1, cfg.steps_per_unit_time);
    for (int i = 0; i < n; ++i) {
        double t, h;
        step_time(t0, t1, cfg.steps_per_unit_time, n, i, t, h);
        take_step(f, params, cfg, t, h, y, s);
        if (!all_finite(y))
            throw std::runtime_error("integrate: non-finite state at step " +
                                     std::to_string(step_base + i) + " (t=" + std::to_string(t + h) +
                                     ")");
    }
}

void validate_times(std::span<const double> times) {
    if (times.empty()) throw std::invalid_argument("integrate_trajectory: empty time list");
    if (times[0] != 0.0)
        throw std::invalid_argument("integrate_trajectory: times must start at 0");
    for (std::size_t k = 1; k < times.size(); ++k)
        if (!(times[k] > times[k - 1]))
            throw std::invalid_argument("integrate_trajectory: times must be strictly ascending");
}

void validate_cotangents(std::span<const double> times, const std::vector<State>& cots,
                         std::size_t state_size) {
    if (cots.size() != times.size())
        throw std::invalid_argument("ode gradients: cotangent count " + std::to_string(cots.size()) +
                                    " != time count " + std::to_string(times.size()));
    for (const State& c : cots)
        if (c.size() != state_size)
            throw std::invalid_argument("ode gradients: cotangent shape mismatch");
}

// Reverse of one explicit step at (y_start, t, h) given the output
// cotangent `a`; updates `a` to the input cotangent and accumulates the
// parameter gradient. The stage states are recomputed from y_start.
void reverse_step(const DynamicsFn& f, std::span<const double> params, const SolverConfig& cfg,
                  double t, double h, const State& y_start, State& a, std::span<double> gparams,
                  Scratch& s) {
    if (h <= 0.0) return;
    const std::size_t n = y_start.size();
    if (cfg.method == SolverMethod::euler) {
        for (std::size_t i = 0; i < n; ++i) s.kbar[i] = h * a[i];
        f.vjp(y_start, t, params, s.kbar, s.gy, gparams);
        axpy(1.0, s.gy, a);
        return;
    }
    // Recompute the first three RK4 stages.
    f.eval(y_start, t, params, s.k1);
    State s2(n), s3(n), s4(n);
    for (std::size_t i = 0; i < n; ++i) s2[i] = y_start[i] + 0.5 * h * s.k1[i];
    f.eval(s2, t + 0.5 * h, params, s.k2);
    for (std::size_t i = 0; i < n; ++i) s3[i] = y_start[i] + 0.5 * h * s.k2[i];
    f.eval(s3, t + 0.5 * h, params, s.k3);
    for (std::size_t i = 0; i < n; ++i) s4[i] = y_start[i] + h * s.k3[i];

    State gy4(n), gy3(n), gy2(n);
    for (std::size_t i = 0; i < n; ++i) s.kbar[i] = (h / 6.0) * a[i];
    f.vjp(s4, t + h, params, s.kbar, gy4, gparams);
    for (std::size_t i = 0; i < n; ++i) s.kbar[i] = (h / 3.0) * a[i] + h * gy4[i];
    f.vjp(s3, t + 0.5 * h, params, s.kbar, gy3, gparams);
    for (std::size_t i = 0; i < n; ++i) s.kbar[i] = (h / 3.0) * a[i] + 0.5 * h * gy3[i];
    f.vjp(s2, t + 0.5 * h, params, s.kbar, gy2, gparams);
    for (std::size_t i = 0; i < n; ++i) s.kbar[i] = (h / 6.0) * a[i] + 0.5 * h * gy2[i];
    f.vjp(y_start, t, params, s.kbar, s.gy, gparams);
    for (std::size_t i = 0; i < n; ++i) a[i] += s.gy[i] + gy2[i] + gy3[i] + gy4[i];
}

}  // namespace

State integrate(const DynamicsFn& f, std::span<const double> params, const State& y0, double t0,
                double t1, const SolverConfig& cfg) {
    if (t1 < t0) throw std::invalid_argument("integrate: t1 < t0");
    if (!all_finite(y0)) throw std::invalid_argument("integrate: non-finite initial state");
    if (cfg.steps_per_unit_time < 1)
        throw std::invalid_argument("integrate: steps_per_unit_time must be >= 1");
    State y = y0;
    Scratch s;
    s.resize(y.size());
    run_segment(f, params, cfg, t0, t1, y, s, 0);
    return y;
}

std::vector<State> integrate_trajectory(const DynamicsFn& f, std::span<const double> params,
                                        const State& y0, std::span<const double> times,
                                        const SolverConfig& cfg) {
    validate_times(times);
    if (cfg.steps_per_unit_time < 1)
        throw std::invalid_argument("integrate_trajectory: steps_per_unit_time must be >= 1");
    std::vector<State> states;
    states.reserve(times.size());
    states.push_back(y0);
    State y = y0;
    Scratch s;
    s.resize(y.size());
    long step_base = 0;
    for (std::size_t k = 1; k < times.size(); ++k) {
        run_segment(f, params, cfg, times[k - 1], times[k], y, s, step_base);
        step_base += segment_step_count(times[k - 1], times[k], cfg.steps_per_unit_time);
        states.push_back(y);
    }
    return states;
}

Gradients adjoint_gradients(const DynamicsFn& f, std::span<const double> params, const State& y0,
                            std::span<const double> times, const std::vector<State>& cotangents,
                            const SolverConfig& cfg) {
    const std::vector<State> obs = integrate_trajectory(f, params, y0, times, cfg);
    return adjoint_gradients_from_states(f, params, obs, times, cotangents, cfg);
}

Gradients adjoint_gradients_from_states(const DynamicsFn& f, std::span<const double> params,
                                        const std::vector<State>& obs,
                                        std::span<const double> times,
                                        const std::vector<State>& cotangents,
                                        const SolverConfig& cfg) {
    validate_times(times);
    if (obs.size() != times.size())
        throw std::invalid_argument("adjoint_gradients: observation state count mismatch");
    const State& y0 = obs.front();
    validate_cotangents(times, cotangents, y0.size());

    Gradients g;
    g.params.assign(params.size(), 0.0);
    State a = cotangents.back();
    Scratch s;
    s.resize(y0.size());
    for (std::size_t k = times.size() - 1; k >= 1; --k) {
        const double t0 = times[k - 1], t1 = times[k];
        const int n = segment_step_count(t0, t1, cfg.steps_per_unit_time);
        for (int i = n - 1; i >= 0; --i) {
            // Recompute the state at the start of step i by re-integrating
            // forward from the segment's left observation.
            State y = obs[k - 1];
            for (int j = 0; j < i; ++j) {
                double tj, hj;
                step_time(t0, t1, cfg.steps_per_unit_time, n, j, tj, hj);
                take_step(f, params, cfg, tj, hj, y, s);
            }
            double ti, hi;
            step_time(t0, t1, cfg.steps_per_unit_time, n, i, ti, hi);
            reverse_step(f, params, cfg, ti, hi, y, a, g.params, s);
        }
        axpy(1.0, cotangents[k - 1], a);
    }
    g.y0 = std::move(a);
    return g;
}

namespace {

struct StepRecord {
    double t, h;
    State y;           // state at step start
    State k1, k2, k3;  // recorded RK4 stages (k1 only for euler)
};

}  // namespace

Gradients direct_gradients(const DynamicsFn& f, std::span<const double> params, const State& y0,
                           std::span<const double> times, const std::vector<State>& cotangents,
                           const SolverConfig& cfg) {
    validate_times(times);
    validate_cotangents(times, cotangents, y0.size());
    const std::size_t n = y0.size();
    const bool rk4 = cfg.method == SolverMethod::rk4;

    // Forward pass, recording every stage.
    std::vector<std::vector<StepRecord>> segments(times.size() - 1);
    State y = y0;
    Scratch s;
    s.resize(n);
    for (std::size_t k = 1; k < times.size(); ++k) {
        const double t0 = times[k - 1], t1 = times[k];
        const int nsteps = segment_step_count(t0, t1, cfg.steps_per_unit_time);
        for (int i = 0; i < nsteps; ++i) {
            double t, h;
            step_time(t0, t1, cfg.steps_per_unit_time, nsteps, i, t, h);
            if (h <= 0.0) continue;
            StepRecord rec;
            rec.t = t;
            rec.h = h;
            rec.y = y;
            take_step(f, params, cfg, t, h, y, s);
            rec.k1 = s.k1;
            if (rk4) {
                rec.k2 = s.k2;
                rec.k3 = s.k3;
            }
            if (!all_finite(y))
                throw std::runtime_error("direct_gradients: non-finite state at step " +
                                         std::to_string(i));
            segments[k - 1].push_back(std::move(rec));
        }
    }

    // Reverse sweep over the records.
    Gradients g;
    g.params.assign(params.size(), 0.0);
    State a = cotangents.back();
    State kbar(n), gy(n), gy2(n), gy3(n), gy4(n), stage(n);
    for (std::size_t k = times.size() - 1; k >= 1; --k) {
        const auto& recs = segments[k - 1];
        for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
            const StepRecord& r = *it;
            if (!rk4) {
                for (std::size_t i = 0; i < n; ++i) kbar[i] = r.h * a[i];
                f.vjp(r.y, r.t, params, kbar, gy, g.params);
                for (std::size_t i = 0; i < n; ++i) a[i] += gy[i];
                continue;
            }
            const double h = r.h;
            // Stage input states rebuilt from the records.
            for (std::size_t i = 0; i < n; ++i) stage[i] = r.y[i] + h * r.k3[i];  // s4
            for (std::size_t i = 0; i < n; ++i) kbar[i] = (h / 6.0) * a[i];
            f.vjp(stage, r.t + h, params, kbar, gy4, g.params);
            for (std::size_t i = 0; i < n; ++i) stage[i] = r.y[i] + 0.5 * h * r.k2[i];  // s3
            for (std::size_t i = 0; i < n; ++i) kbar[i] = (h / 3.0) * a[i] + h * gy4[i];
            f.vjp(stage, r.t + 0.5 * h, params, kbar, gy3, g.params);
            for (std::size_t i = 0; i < n; ++i) stage[i] = r.y[i] + 0.5 * h * r.k1[i];  // s2
            for (std::size_t i = 0; i < n; ++i) kbar[i] = (h / 3.0) * a[i] + 0.5 * h * gy3[i];
            f.vjp(stage, r.t + 0.5 * h, params, kbar, gy2, g.params);
            for (std::size_t i = 0; i < n; ++i) kbar[i] = (h / 6.0) * a[i] + 0.5 * h * gy2[i];
            f.vjp(r.y, r.t, params, kbar, gy, g.params);
            for (std::size_t i = 0; i < n; ++i) a[i] += gy[i] + gy2[i] + gy3[i] + gy4[i];
        }
        axpy(1.0, cotangents[k - 1], a);
    }
    g.y0 = std::move(a);
    return g;
}

Gradients finite_difference_gradients(const DynamicsFn& f, std::span<const double> params,
                                      const State& y0, std::span<const double> times,
                                      const std::vector<State>& cotangents, const SolverConfig& cfg,
                                      double h, std::span<const std::size_t> param_coords,
                                      std::span<const std::size_t> y0_coords) {
    validate_times(times);
    validate_cotangents(times, cotangents, y0.size());
    const auto loss = [&](std::span<const double> p, const State& y) {
        const auto states = integrate_trajectory(f, p, y, times, cfg);
        double acc = 0.0;
        for (std::size_t k = 0; k < states.size(); ++k)
            for (std::size_t i = 0; i < states[k].size(); ++i) acc += cotangents[k][i] * states[k][i];
        return acc;
    };
    Gradients g;
    g.params.assign(params.size(), 0.0);
    g.y0.assign(y0.size(), 0.0);
    std::vector<double> p(params.begin(), params.end());
    for (std::size_t c : param_coords) {
        const double keep = p[c];
        p[c] = keep + h;
        const double lp = loss(p, y0);
        p[c] = keep - h;
        const double lm = loss(p, y0);
        p[c] = keep;
        g.params[c] = (lp - lm) / (2.0 * h);
    }
    State y = y0;
    for (std::size_t c : y0_coords) {
        const double keep = y[c];
        y[c] = keep + h;
        const double lp = loss(p, y);
        y[c] = keep - h;
        const double lm = loss(p, y);
        y[c] = keep;
        g.y0[c] = (lp - lm) / (2.0 * h);
    }
    return g;
}

}  // namespace flowreg
