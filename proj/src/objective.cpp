#include "flowreg/objective.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace flowreg {

namespace {

void check_same_dims(const ScalarGrid& a, const ScalarGrid& b, const char* who) {
    if (a.dims != b.dims) throw std::invalid_argument(std::string(who) + ": dims mismatch");
}

struct NccParts {
    double mean_a = 0.0, mean_b = 0.0;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
};

// Two-pass centered sums (catastrophic cancellation stays out of the
// correlation for well-scaled intensities).
NccParts ncc_parts(const ScalarGrid& a, const ScalarGrid& b, const char* who) {
    check_same_dims(a, b, who);
    const std::size_t n = a.size();
    NccParts p;
    for (std::size_t i = 0; i < n; ++i) {
        p.mean_a += a.data[i];
        p.mean_b += b.data[i];
    }
    p.mean_a /= static_cast<double>(n);
    p.mean_b /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double ca = a.data[i] - p.mean_a;
        const double cb = b.data[i] - p.mean_b;
        p.saa += ca * ca;
        p.sbb += cb * cb;
        p.sab += ca * cb;
    }
    if (p.saa == 0.0 || p.sbb == 0.0)
        throw std::invalid_argument(std::string(who) + ": constant input (zero variance)");
    return p;
}

}  // namespace

double ncc(const ScalarGrid& a, const ScalarGrid& b) {
    const NccParts p = ncc_parts(a, b, "ncc");
    return p.sab / std::sqrt(p.saa * p.sbb);
}

double similarity_loss(const ScalarGrid& warped, const ScalarGrid& target) {
    return 1.0 - ncc(warped, target);
}

double smoothness_loss(const VectorGrid& displacement) {
    const auto grads = spatial_gradient(displacement);
    double acc = 0.0;
    for (const VectorGrid& g : grads)
        for (double v : g.data) acc += v * v;
    return acc / static_cast<double>(voxel_count(displacement.dims));
}

namespace {

// Plane-membership count of a voxel: one per boundary plane it lies on.
int plane_count(const Dims& dims, const int* idx) {
    int m = 0;
    for (std::size_t a = 0; a < dims.size(); ++a) {
        if (idx[a] == 0) ++m;
        if (idx[a] == dims[a] - 1) ++m;
    }
    return m;
}

std::size_t boundary_plane_voxels(const Dims& dims) {
    const std::size_t total = voxel_count(dims);
    std::size_t n = 0;
    for (std::size_t a = 0; a < dims.size(); ++a)
        n += 2 * (total / static_cast<std::size_t>(dims[a]));
    return n;
}

template <class Fn>
void for_each_voxel(const Dims& dims, Fn&& fn) {
    const int d = static_cast<int>(dims.size());
    int idx[3] = {0, 0, 0};
    const std::size_t total = voxel_count(dims);
    for (std::size_t v = 0; v < total; ++v) {
        fn(v, idx);
        int a = d - 1;
        while (a >= 0 && ++idx[a] == dims[a]) idx[a--] = 0;
    }
}

}  // namespace

double boundary_loss(const VectorGrid& displacement) {
    const int d = displacement.channels;
    double acc = 0.0;
    for_each_voxel(displacement.dims, [&](std::size_t v, const int* idx) {
        const int m = plane_count(displacement.dims, idx);
        if (m == 0) return;
        double s2 = 0.0;
        for (int c = 0; c < d; ++c) {
            const double u = displacement.data[v * d + c];
            s2 += u * u;
        }
        acc += static_cast<double>(m) * s2;
    });
    return acc / static_cast<double>(boundary_plane_voxels(displacement.dims));
}

double nrmse(const ScalarGrid& pred, const ScalarGrid& ref) {
    check_same_dims(pred, ref, "nrmse");
    double mse = 0.0, lo = ref.data[0], hi = ref.data[0];
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double e = pred.data[i] - ref.data[i];
        mse += e * e;
        lo = std::min(lo, ref.data[i]);
        hi = std::max(hi, ref.data[i]);
    }
    if (hi == lo) throw std::invalid_argument("nrmse: constant reference image");
    mse /= static_cast<double>(ref.size());
    return std::sqrt(mse) / (hi - lo);
}

double psnr(const ScalarGrid& pred, const ScalarGrid& ref, double peak) {
    check_same_dims(pred, ref, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double e = pred.data[i] - ref.data[i];
        mse += e * e;
    }
    mse /= static_cast<double>(ref.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kSsimWindow = 7;

// Sliding-window sum along one axis, zero-padded; entries at positions
// where the window fits are exact.
void window_sum_axis(const Dims& dims, std::vector<double>& data, int axis) {
    const auto strides = row_major_strides(dims);
    const std::size_t s = strides[axis];
    const int n = dims[axis];
    const int r = kSsimWindow / 2;
    std::vector<double> out(data.size());
    const std::size_t total = voxel_count(dims);
    for (std::size_t v = 0; v < total; ++v) {
        const int ia = static_cast<int>((v / s) % static_cast<std::size_t>(n));
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) {
            const int j = ia + k;
            if (j < 0 || j >= n) continue;
            acc += data[v + static_cast<std::size_t>(j - ia) * s];
        }
        out[v] = acc;
    }
    data.swap(out);
}

}  // namespace

double ssim(const ScalarGrid& pred, const ScalarGrid& ref) {
    check_same_dims(pred, ref, "ssim");
    const int d = static_cast<int>(pred.dims.size());
    for (int a = 0; a < d; ++a)
        if (pred.dims[a] < kSsimWindow)
            throw std::invalid_argument("ssim: axis " + std::to_string(a) + " shorter than window " +
                                        std::to_string(kSsimWindow));
    const std::size_t n = pred.size();
    std::vector<double> sx(pred.data), sy(ref.data), sxx(n), syy(n), sxy(n);
    for (std::size_t i = 0; i < n; ++i) {
        sxx[i] = pred.data[i] * pred.data[i];
        syy[i] = ref.data[i] * ref.data[i];
        sxy[i] = pred.data[i] * ref.data[i];
    }
    for (int a = 0; a < d; ++a) {
        window_sum_axis(pred.dims, sx, a);
        window_sum_axis(pred.dims, sy, a);
        window_sum_axis(pred.dims, sxx, a);
        window_sum_axis(pred.dims, syy, a);
        window_sum_axis(pred.dims, sxy, a);
    }
    const double np = std::pow(static_cast<double>(kSsimWindow), d);
    constexpr double C1 = 0.01 * 0.01;  // (0.01 * L)^2, L = 1
    constexpr double C2 = 0.03 * 0.03;
    const int r = kSsimWindow / 2;
    double acc = 0.0;
    std::size_t count = 0;
    for_each_voxel(pred.dims, [&](std::size_t v, const int* idx) {
        for (int a = 0; a < d; ++a)
            if (idx[a] < r || idx[a] > pred.dims[a] - 1 - r) return;
        const double mx = sx[v] / np, my = sy[v] / np;
        const double vx = sxx[v] / np - mx * mx;
        const double vy = syy[v] / np - my * my;
        const double cxy = sxy[v] / np - mx * my;
        const double val = ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) /
                           ((mx * mx + my * my + C1) * (vx + vy + C2));
        acc += val;
        ++count;
    });
    return acc / static_cast<double>(count);
}

// ---- regression objective ---------------------------------------------------

namespace {

void check_model_dataset(const VelocityModel& model, const SequenceDataset& dataset) {
    if (model.arch.dims != dataset.dims)
        throw std::invalid_argument("regression: model arch dims do not match dataset dims");
    if (dataset.frames.size() < 2)
        throw std::invalid_argument("regression: dataset needs >= 2 observations");
}

}  // namespace

VectorGrid displacement_from_state(const VelocityModel& model, const State& state) {
    if (model.arch.mode == ModelMode::direct) {
        VectorGrid u(model.arch.dims);
        if (state.size() != u.data.size())
            throw std::invalid_argument("regression: state size does not match grid");
        u.data = state;
        return u;
    }
    VectorGrid latent(model.arch.state_dims());
    if (state.size() != latent.data.size())
        throw std::invalid_argument("regression: state size does not match latent grid");
    latent.data = state;
    return decode(model, latent, model.arch.smoothing_window);
}

StateLosses loss_from_states(const VelocityModel& model, const SequenceDataset& dataset,
                             const LossWeights& weights, std::span<const State> states) {
    check_model_dataset(model, dataset);
    if (states.size() != dataset.times.size())
        throw std::invalid_argument("loss_from_states: state count mismatch");
    StateLosses out;
    const ScalarGrid& baseline = dataset.frames[0];
    for (std::size_t k = 1; k < states.size(); ++k) {
        VectorGrid u = displacement_from_state(model, states[k]);
        ScalarGrid warped = warp_image(baseline, u);
        const double sim = similarity_loss(warped, dataset.frames[k]);
        const double smt = smoothness_loss(u);
        const double bdr = boundary_loss(u);
        out.breakdown.similarity += sim;
        out.breakdown.smoothness += smt;
        out.breakdown.boundary += bdr;
        out.breakdown.per_time.push_back(sim);
        out.displacements.push_back(std::move(u));
        out.warped.push_back(std::move(warped));
    }
    out.breakdown.total = out.breakdown.similarity + weights.lambda1 * out.breakdown.smoothness +
                          weights.lambda2 * out.breakdown.boundary;
    return out;
}

namespace {

// d(ncc)/d(warped); the mean-centering correction cancels because both
// centered fields sum to zero.
ScalarGrid ncc_grad_warped(const ScalarGrid& warped, const ScalarGrid& target) {
    const NccParts p = ncc_parts(warped, target, "similarity gradient");
    const double denom = std::sqrt(p.saa * p.sbb);
    const double r = p.sab / denom;
    ScalarGrid g(warped.dims);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double ca = warped.data[i] - p.mean_a;
        const double cb = target.data[i] - p.mean_b;
        g.data[i] = cb / denom - r * ca / p.saa;
    }
    return g;
}

// d(smoothness_loss)/d(u) = (2/N) sum_a D_a^T D_a u
VectorGrid smoothness_grad(const VectorGrid& u) {
    const auto grads = spatial_gradient(u);
    VectorGrid out(u.dims);
    for (std::size_t a = 0; a < grads.size(); ++a) {
        const VectorGrid back = spatial_gradient_adjoint(grads[a], static_cast<int>(a));
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += back.data[i];
    }
    const double scale = 2.0 / static_cast<double>(voxel_count(u.dims));
    for (double& v : out.data) v *= scale;
    return out;
}

VectorGrid boundary_grad(const VectorGrid& u) {
    VectorGrid out(u.dims);
    const double scale = 2.0 / static_cast<double>(boundary_plane_voxels(u.dims));
    const int d = u.channels;
    for_each_voxel(u.dims, [&](std::size_t v, const int* idx) {
        const int m = plane_count(u.dims, idx);
        if (m == 0) return;
        for (int c = 0; c < d; ++c) out.data[v * d + c] = scale * m * u.data[v * d + c];
    });
    return out;
}

}  // namespace

CotangentSet cotangents_from_states(const VelocityModel& model, const SequenceDataset& dataset,
                                    const LossWeights& weights, std::span<const State> states) {
    check_model_dataset(model, dataset);
    if (states.size() != dataset.times.size())
        throw std::invalid_argument("cotangents_from_states: state count mismatch");
    CotangentSet out;
    out.decoder_grads.assign(model.plan.total, 0.0);
    out.state_cotangents.assign(states.size(), State(model.plan.state_size, 0.0));

    const ScalarGrid& baseline = dataset.frames[0];
    for (std::size_t k = 1; k < states.size(); ++k) {
        VectorGrid latent;  // latent mode only
        VectorGrid u;
        if (model.arch.mode == ModelMode::direct) {
            u = displacement_from_state(model, states[k]);
        } else {
            latent = VectorGrid(model.arch.state_dims());
            latent.data = states[k];
            u = decode(model, latent, model.arch.smoothing_window);
        }

        ScalarGrid warped;
        VectorGrid dwarp;
        warp_image_with_gradient(baseline, u, warped, dwarp);
        const ScalarGrid g = ncc_grad_warped(warped, dataset.frames[k]);

        VectorGrid c_u(u.dims);
        const int d = u.channels;
        for (std::size_t v = 0; v < c_u.vox(); ++v)
            for (int c = 0; c < d; ++c)
                c_u.data[v * d + c] = -g.data[v] * dwarp.data[v * d + c];
        const VectorGrid g_smt = smoothness_grad(u);
        const VectorGrid g_bdr = boundary_grad(u);
        for (std::size_t i = 0; i < c_u.data.size(); ++i)
            c_u.data[i] += weights.lambda1 * g_smt.data[i] + weights.lambda2 * g_bdr.data[i];

        if (model.arch.mode == ModelMode::direct) {
            out.state_cotangents[k] = std::move(c_u.data);
        } else {
            VectorGrid c_latent =
                decode_vjp(model, latent, model.arch.smoothing_window, c_u, out.decoder_grads);
            out.state_cotangents[k] = std::move(c_latent.data);
        }
    }
    return out;
}

LossBreakdown regression_loss(const VelocityModel& model, const SequenceDataset& dataset,
                              const SolverConfig& solver, const LossWeights& weights) {
    check_model_dataset(model, dataset);
    const VelocityDynamics dyn(model.plan);
    const State y0(model.plan.state_size, 0.0);
    const auto states = integrate_trajectory(dyn, model.params, y0, dataset.times, solver);
    return loss_from_states(model, dataset, weights, states).breakdown;
}

CotangentSet loss_cotangents(const VelocityModel& model, const SequenceDataset& dataset,
                             const SolverConfig& solver, const LossWeights& weights) {
    check_model_dataset(model, dataset);
    const VelocityDynamics dyn(model.plan);
    const State y0(model.plan.state_size, 0.0);
    const auto states = integrate_trajectory(dyn, model.params, y0, dataset.times, solver);
    return cotangents_from_states(model, dataset, weights, states);
}

}  // namespace flowreg
