#include "flowreg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "flowreg/rng.hpp"

namespace flowreg {

void validate_fit_config(const FitConfig& cfg) {
    if (cfg.learning_rate <= 0.0) throw std::invalid_argument("fit: learning_rate must be > 0");
    if (cfg.epochs < 1) throw std::invalid_argument("fit: epochs must be >= 1");
    if (cfg.smoothing_window < 1 || cfg.smoothing_window % 2 == 0)
        throw std::invalid_argument("fit: smoothing_window must be odd and positive");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
        throw std::invalid_argument("fit: Adam betas must lie in [0, 1)");
    if (cfg.epsilon <= 0.0) throw std::invalid_argument("fit: epsilon must be > 0");
    if (cfg.solver.steps_per_unit_time < 1)
        throw std::invalid_argument("fit: steps_per_unit_time must be >= 1");
    if (cfg.latent_factor < 1) throw std::invalid_argument("fit: latent_factor must be >= 1");
    if (cfg.weights.lambda1 < 0.0 || cfg.weights.lambda2 < 0.0)
        throw std::invalid_argument("fit: loss weights must be >= 0");
    if (!std::isfinite(cfg.weights.lambda1) || !std::isfinite(cfg.weights.lambda2))
        throw std::invalid_argument("fit: loss weights must be finite");
    if (cfg.conv_channels.empty())
        throw std::invalid_argument("fit: conv_channels must not be empty");
}

namespace {

void adam_update_inplace(std::span<double> params, std::span<const double> grads, AdamMoments& mom,
                         int step_index, const FitConfig& cfg) {
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, step_index);
    const double c2 = 1.0 - std::pow(b2, step_index);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
        mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
        const double mhat = mom.m[i] / c1;
        const double vhat = mom.v[i] / c2;
        params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

}  // namespace

std::pair<std::vector<double>, AdamMoments> adam_step(std::span<const double> params,
                                                      std::span<const double> grads,
                                                      const AdamMoments& moments, int step_index,
                                                      const FitConfig& cfg) {
    if (grads.size() != params.size() || moments.m.size() != params.size() ||
        moments.v.size() != params.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    if (step_index < 1) throw std::invalid_argument("adam_step: step_index must be >= 1");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw std::invalid_argument("adam_step: non-finite gradient at component " +
                                        std::to_string(i));
    std::vector<double> p(params.begin(), params.end());
    AdamMoments mom = moments;
    adam_update_inplace(p, grads, mom, step_index, cfg);
    return {std::move(p), std::move(mom)};
}

int clamp_smoothing_window(int window, const Dims& dims) {
    int min_dim = dims[0];
    for (int n : dims) min_dim = std::min(min_dim, n);
    int w = std::min(window, min_dim);
    if (w % 2 == 0) --w;
    return std::max(w, 1);
}

FitReport fit(const SequenceDataset& dataset, const FitConfig& cfg) {
    validate_fit_config(cfg);
    if (dataset.frames.size() < 2) throw std::invalid_argument("fit: dataset needs >= 2 observations");
    if (cfg.mode == ModelMode::latent)
        for (int n : dataset.dims)
            if (n % cfg.latent_factor != 0)
                throw std::invalid_argument("fit: grid dims not divisible by latent_factor " +
                                            std::to_string(cfg.latent_factor));

    Arch arch;
    arch.mode = cfg.mode;
    arch.dims = dataset.dims;
    arch.conv_channels = cfg.conv_channels;
    arch.time_embed_width = cfg.time_embed_width;
    arch.hidden_width = cfg.hidden_width;
    arch.latent_factor = cfg.mode == ModelMode::latent ? cfg.latent_factor : 1;
    arch.smoothing_window = clamp_smoothing_window(cfg.smoothing_window, dataset.dims);

    const auto start = std::chrono::steady_clock::now();
    VelocityModel model = init_params(arch, cfg.seed);
    const VelocityDynamics dyn(model.plan);
    const State y0(model.plan.state_size, 0.0);

    AdamMoments mom;
    mom.m.assign(model.params.size(), 0.0);
    mom.v.assign(model.params.size(), 0.0);

    FitReport report;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto states = integrate_trajectory(dyn, model.params, y0, dataset.times, cfg.solver);
        StateLosses losses = loss_from_states(model, dataset, cfg.weights, states);
        if (!std::isfinite(losses.breakdown.total))
            throw std::runtime_error("fit: diverged (non-finite loss) at epoch " +
                                     std::to_string(epoch));

        CotangentSet cots = cotangents_from_states(model, dataset, cfg.weights, states);
        Gradients grads = adjoint_gradients_from_states(dyn, model.params, states, dataset.times,
                                                        cots.state_cotangents, cfg.solver);
        for (std::size_t i = 0; i < grads.params.size(); ++i)
            grads.params[i] += cots.decoder_grads[i];
        for (std::size_t i = 0; i < grads.params.size(); ++i)
            if (!std::isfinite(grads.params[i]))
                throw std::runtime_error("fit: non-finite gradient in parameter '" +
                                         model.layout.owner(i).name + "' at epoch " +
                                         std::to_string(epoch));

        if ((epoch - 1) % 10 == 0 || epoch == cfg.epochs)
            report.fold_history.emplace_back(epoch, fold_percentage(losses.displacements.back()));

        adam_update_inplace(model.params, grads.params, mom, epoch, cfg);
        report.loss_history.push_back(std::move(losses.breakdown));
    }
    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.final_model = std::move(model);
    return report;
}

std::vector<std::pair<ScalarGrid, VectorGrid>> predict(const VelocityModel& model,
                                                       const ScalarGrid& baseline,
                                                       std::span<const double> times,
                                                       const SolverConfig& solver) {
    if (baseline.dims != model.arch.dims)
        throw std::invalid_argument("predict: baseline dims do not match model arch");
    for (std::size_t k = 0; k < times.size(); ++k) {
        if (times[k] < 0.0 || times[k] > 1.0)
            throw std::invalid_argument("predict: time " + std::to_string(times[k]) +
                                        " outside [0, 1]");
        if (k > 0 && !(times[k] > times[k - 1]))
            throw std::invalid_argument("predict: times must be strictly ascending");
    }
    std::vector<std::pair<ScalarGrid, VectorGrid>> out;
    if (times.empty()) return out;

    std::vector<double> traj_times;
    if (times[0] != 0.0) traj_times.push_back(0.0);
    traj_times.insert(traj_times.end(), times.begin(), times.end());
    const std::size_t skip = traj_times.size() - times.size();

    const VelocityDynamics dyn(model.plan);
    const State y0(model.plan.state_size, 0.0);
    const auto states = integrate_trajectory(dyn, model.params, y0, traj_times, solver);
    for (std::size_t k = 0; k < times.size(); ++k) {
        VectorGrid u = displacement_from_state(model, states[k + skip]);
        ScalarGrid warped = warp_image(baseline, u);
        out.emplace_back(std::move(warped), std::move(u));
    }
    return out;
}

namespace {

// Negative-control wrapper: perturbs the vjp so the self-check must fail.
struct CorruptedDynamics final : DynamicsFn {
    const DynamicsFn* inner;
    explicit CorruptedDynamics(const DynamicsFn& d) : inner(&d) {}
    void eval(std::span<const double> y, double t, std::span<const double> params,
              std::span<double> dy) const override {
        inner->eval(y, t, params, dy);
    }
    void vjp(std::span<const double> y, double t, std::span<const double> params,
             std::span<const double> cotangent, std::span<double> grad_y,
             std::span<double> grad_params) const override {
        inner->vjp(y, t, params, cotangent, grad_y, grad_params);
        for (double& g : grad_y) g *= 1.05;
    }
};

double norm2(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

double norm_rel_error(std::span<const double> a, std::span<const double> b) {
    std::vector<double> diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    const double denom = std::max({norm2(a), norm2(b), 1e-300});
    return norm2(diff) / denom;
}

}  // namespace

GradCheckResult run_gradcheck(std::uint64_t seed, int size, bool corrupt_vjp) {
    if (size < 2) throw std::invalid_argument("run_gradcheck: size must be >= 2");
    Arch arch;
    arch.mode = ModelMode::direct;
    arch.dims = {size, size};
    arch.conv_channels = {4};
    arch.time_embed_width = 16;
    arch.hidden_width = 16;
    arch.latent_factor = 1;
    arch.smoothing_window = 1;
    VelocityModel model = init_params(arch, seed);
    randomize_all_params(model, seed);

    std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ull);
    const State y0 = [&] {
        State y(model.plan.state_size);
        for (double& v : y) v = uniform_pm(gen, 0.3);
        return y;
    }();
    const std::vector<double> times = {0.0, 0.4, 1.0};
    std::vector<State> cots(times.size(), State(model.plan.state_size));
    for (State& c : cots)
        for (double& v : c) v = uniform_pm(gen, 1.0);

    SolverConfig solver;  // rk4, 8 steps per unit time

    const VelocityDynamics clean(model.plan);
    const CorruptedDynamics corrupted(clean);
    const DynamicsFn& dyn = corrupt_vjp ? static_cast<const DynamicsFn&>(corrupted) : clean;

    const Gradients adj = adjoint_gradients(dyn, model.params, y0, times, cots, solver);
    const Gradients dir = direct_gradients(clean, model.params, y0, times, cots, solver);

    GradCheckResult res;
    res.adjoint_vs_direct =
        std::max(norm_rel_error(adj.params, dir.params), norm_rel_error(adj.y0, dir.y0));

    // Finite differences on a deterministic sample of coordinates.
    const std::size_t P = model.params.size();
    const std::size_t n_param_coords = std::min<std::size_t>(200, P);
    std::vector<std::size_t> pcoords(n_param_coords);
    for (std::size_t i = 0; i < n_param_coords; ++i) pcoords[i] = i * P / n_param_coords;
    const std::size_t S = y0.size();
    const std::size_t n_y0_coords = std::min<std::size_t>(50, S);
    std::vector<std::size_t> ycoords(n_y0_coords);
    for (std::size_t i = 0; i < n_y0_coords; ++i) ycoords[i] = i * S / n_y0_coords;

    const Gradients fd = finite_difference_gradients(clean, model.params, y0, times, cots, solver,
                                                     1e-5, pcoords, ycoords);
    std::vector<double> adj_p, fd_p, adj_y, fd_y;
    for (std::size_t c : pcoords) {
        adj_p.push_back(adj.params[c]);
        fd_p.push_back(fd.params[c]);
    }
    for (std::size_t c : ycoords) {
        adj_y.push_back(adj.y0[c]);
        fd_y.push_back(fd.y0[c]);
    }
    res.adjoint_vs_fd = std::max(norm_rel_error(adj_p, fd_p), norm_rel_error(adj_y, fd_y));
    res.pass = res.adjoint_vs_fd < 1e-4 && res.adjoint_vs_direct < 1e-4;
    return res;
}

}  // namespace flowreg
