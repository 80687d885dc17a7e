#include "flowreg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "flowreg/rng.hpp"

namespace flowreg {

using nlohmann::json;

Dims Arch::state_dims() const {
    if (mode == ModelMode::direct) return dims;
    Dims out = dims;
    for (int& n : out) n /= latent_factor;
    return out;
}

const ParamSpec* ParamLayout::find(std::string_view name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const ParamSpec& ParamLayout::owner(std::size_t i) const {
    for (const auto& e : entries)
        if (i >= e.offset && i < e.offset + e.count) return e;
    throw std::out_of_range("ParamLayout::owner: coordinate out of range");
}

namespace {

std::size_t shape_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

int pow3(int d) { return d == 2 ? 9 : 27; }

Dims conv_out_dims(const Dims& in, int stride) {
    Dims out = in;
    for (int& n : out) n = (n - 1) / stride + 1;
    return out;
}

// Walks the parameter arrays of a resolved arch in their fixed order.
template <class Fn>
void enumerate_params(const Arch& a, Fn&& fn) {
    const int d = a.spatial_axes();
    const int K = pow3(d);
    int in_ch = d;
    for (std::size_t i = 0; i < a.conv_channels.size(); ++i) {
        const int out_ch = a.conv_channels[i];
        fn("conv" + std::to_string(i) + ".weight", std::vector<int>{out_ch, in_ch, K});
        fn("conv" + std::to_string(i) + ".bias", std::vector<int>{out_ch});
        in_ch = out_ch;
    }
    Dims sd = a.state_dims();
    for (std::size_t i = 0; i < a.conv_channels.size(); ++i) sd = conv_out_dims(sd, 2);
    const int flat = a.conv_channels.back() * static_cast<int>(voxel_count(sd));
    const int E = a.time_embed_width;
    const int H = a.hidden_width;
    const int out = d * static_cast<int>(voxel_count(a.state_dims()));
    fn("time_embed.w1", std::vector<int>{E});
    fn("time_embed.b1", std::vector<int>{E});
    fn("time_embed.w2", std::vector<int>{flat, E});
    fn("time_embed.b2", std::vector<int>{flat});
    fn("fc1.weight", std::vector<int>{H, flat});
    fn("fc1.bias", std::vector<int>{H});
    fn("fc2.weight", std::vector<int>{out, H});
    fn("fc2.bias", std::vector<int>{out});
    if (a.mode == ModelMode::latent) fn("decoder.weight", std::vector<int>{d, d, K});
}

}  // namespace

Arch resolve_arch(const Arch& arch) {
    Arch a = arch;
    const int d = a.spatial_axes();
    if (d != 2 && d != 3) throw std::invalid_argument("arch: expected 2 or 3 spatial axes");
    for (int n : a.dims)
        if (n < 2) throw std::invalid_argument("arch: axis length must be >= 2");
    if (a.conv_channels.empty()) throw std::invalid_argument("arch: need at least one conv stage");
    for (int c : a.conv_channels)
        if (c < 1) throw std::invalid_argument("arch: non-positive conv channel count");
    if (a.hidden_width < 1) throw std::invalid_argument("arch: hidden_width must be >= 1");
    if (a.latent_factor < 1) throw std::invalid_argument("arch: latent_factor must be >= 1");
    if (a.smoothing_window < 1 || a.smoothing_window % 2 == 0)
        throw std::invalid_argument("arch: smoothing_window must be odd and positive");
    if (a.mode == ModelMode::latent) {
        for (int n : a.dims)
            if (n % a.latent_factor != 0)
                throw std::invalid_argument("arch: dims must be divisible by latent_factor");
        for (int n : a.state_dims())
            if (n < 1) throw std::invalid_argument("arch: latent dims degenerate");
    }
    if (a.time_embed_width == 0) {
        Dims sd = a.state_dims();
        for (std::size_t i = 0; i < a.conv_channels.size(); ++i) sd = conv_out_dims(sd, 2);
        a.time_embed_width = a.conv_channels.back() * static_cast<int>(voxel_count(sd));
    }
    if (a.time_embed_width < 1) throw std::invalid_argument("arch: time_embed_width must be >= 1");
    return a;
}

ParamLayout build_layout(const Arch& resolved) {
    ParamLayout layout;
    enumerate_params(resolved, [&](std::string name, std::vector<int> shape) {
        ParamSpec spec;
        spec.name = std::move(name);
        spec.shape = std::move(shape);
        spec.count = shape_count(spec.shape);
        spec.offset = layout.total;
        layout.total += spec.count;
        layout.entries.push_back(std::move(spec));
    });
    return layout;
}

NetPlan build_plan(const Arch& a) {
    NetPlan p;
    p.d = a.spatial_axes();
    p.state_dims = a.state_dims();
    p.state_channels = p.d;
    p.state_size = voxel_count(p.state_dims) * static_cast<std::size_t>(p.d);
    p.stage_dims.push_back(p.state_dims);
    p.stage_ch.push_back(p.d);
    for (int c : a.conv_channels) {
        p.stage_dims.push_back(conv_out_dims(p.stage_dims.back(), 2));
        p.stage_ch.push_back(c);
    }
    p.flat_width = p.stage_ch.back() * static_cast<int>(voxel_count(p.stage_dims.back()));
    p.embed_width = a.time_embed_width;
    p.hidden = a.hidden_width;
    const ParamLayout layout = build_layout(a);
    const auto off = [&](const std::string& name) {
        const ParamSpec* s = layout.find(name);
        return s ? s->offset : static_cast<std::size_t>(0);
    };
    for (std::size_t i = 0; i < a.conv_channels.size(); ++i) {
        p.conv_w.push_back(off("conv" + std::to_string(i) + ".weight"));
        p.conv_b.push_back(off("conv" + std::to_string(i) + ".bias"));
    }
    p.temb_w1 = off("time_embed.w1");
    p.temb_b1 = off("time_embed.b1");
    p.temb_w2 = off("time_embed.w2");
    p.temb_b2 = off("time_embed.b2");
    p.fc1_w = off("fc1.weight");
    p.fc1_b = off("fc1.bias");
    p.fc2_w = off("fc2.weight");
    p.fc2_b = off("fc2.bias");
    p.dec_w = a.mode == ModelMode::latent ? off("decoder.weight") : 0;
    p.total = layout.total;
    return p;
}

namespace {

// ---- dense helpers -------------------------------------------------------

void matvec(const double* w, const double* x, double* y, int rows, int cols, const double* bias) {
    for (int r = 0; r < rows; ++r) {
        double acc = bias ? bias[r] : 0.0;
        const double* row = w + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

// y += w^T x
void matvec_t(const double* w, const double* x, double* y, int rows, int cols) {
    for (int c = 0; c < cols; ++c) y[c] = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double* row = w + static_cast<std::size_t>(r) * cols;
        const double xr = x[r];
        for (int c = 0; c < cols; ++c) y[c] += row[c] * xr;
    }
}

// gw += x * z^T (outer product), gb += x
void outer_acc(const double* x, const double* z, double* gw, double* gb, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* row = gw + static_cast<std::size_t>(r) * cols;
        const double xr = x[r];
        for (int c = 0; c < cols; ++c) row[c] += xr * z[c];
        if (gb) gb[r] += xr;
    }
}

// ---- N-d convolution, kernel 3, zero padding 1 ----------------------------
// Data layout everywhere: voxel-major row-major, channel-fastest.

struct ConvShape {
    Dims in_dims, out_dims;
    int in_ch, out_ch, stride, d, K;
    std::vector<std::size_t> in_strides;
};

ConvShape conv_shape(const Dims& in_dims, int in_ch, int out_ch, int stride) {
    ConvShape s;
    s.in_dims = in_dims;
    s.out_dims = conv_out_dims(in_dims, stride);
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.stride = stride;
    s.d = static_cast<int>(in_dims.size());
    s.K = pow3(s.d);
    s.in_strides = row_major_strides(in_dims);
    return s;
}

// Visits every (out voxel, kernel entry) pair that maps inside the input.
template <class Fn>
void conv_iterate(const ConvShape& s, Fn&& fn) {
    const int d = s.d;
    int o[3] = {0, 0, 0};
    const std::size_t out_vox = voxel_count(s.out_dims);
    for (std::size_t ov = 0; ov < out_vox; ++ov) {
        int k_off[3];
        for (int k = 0; k < s.K; ++k) {
            int rem = k;
            bool inside = true;
            std::size_t in_flat = 0;
            for (int a = d - 1; a >= 0; --a) {
                k_off[a] = rem % 3;
                rem /= 3;
            }
            for (int a = 0; a < d; ++a) {
                const int ia = o[a] * s.stride + k_off[a] - 1;
                if (ia < 0 || ia >= s.in_dims[a]) {
                    inside = false;
                    break;
                }
                in_flat += s.in_strides[a] * static_cast<std::size_t>(ia);
            }
            if (inside) fn(ov, k, in_flat);
        }
        int a = d - 1;
        while (a >= 0 && ++o[a] == s.out_dims[a]) o[a--] = 0;
    }
}

void conv_forward(const ConvShape& s, const double* w, const double* b, const double* in,
                  double* out) {
    const std::size_t out_vox = voxel_count(s.out_dims);
    for (std::size_t ov = 0; ov < out_vox; ++ov)
        for (int co = 0; co < s.out_ch; ++co)
            out[ov * s.out_ch + co] = b ? b[co] : 0.0;
    conv_iterate(s, [&](std::size_t ov, int k, std::size_t iv) {
        const double* in_v = in + iv * s.in_ch;
        double* out_v = out + ov * s.out_ch;
        for (int co = 0; co < s.out_ch; ++co) {
            const double* wk = w + (static_cast<std::size_t>(co) * s.in_ch) * s.K + k;
            double acc = 0.0;
            for (int ci = 0; ci < s.in_ch; ++ci) acc += wk[static_cast<std::size_t>(ci) * s.K] * in_v[ci];
            out_v[co] += acc;
        }
    });
}

void conv_vjp_input(const ConvShape& s, const double* w, const double* cot, double* grad_in) {
    std::fill(grad_in, grad_in + voxel_count(s.in_dims) * static_cast<std::size_t>(s.in_ch), 0.0);
    conv_iterate(s, [&](std::size_t ov, int k, std::size_t iv) {
        const double* cot_v = cot + ov * s.out_ch;
        double* gin_v = grad_in + iv * s.in_ch;
        for (int co = 0; co < s.out_ch; ++co) {
            const double* wk = w + (static_cast<std::size_t>(co) * s.in_ch) * s.K + k;
            const double cv = cot_v[co];
            for (int ci = 0; ci < s.in_ch; ++ci) gin_v[ci] += wk[static_cast<std::size_t>(ci) * s.K] * cv;
        }
    });
}

void conv_vjp_params(const ConvShape& s, const double* in, const double* cot, double* gw,
                     double* gb) {
    if (gb) {
        const std::size_t out_vox = voxel_count(s.out_dims);
        for (std::size_t ov = 0; ov < out_vox; ++ov)
            for (int co = 0; co < s.out_ch; ++co) gb[co] += cot[ov * s.out_ch + co];
    }
    conv_iterate(s, [&](std::size_t ov, int k, std::size_t iv) {
        const double* in_v = in + iv * s.in_ch;
        const double* cot_v = cot + ov * s.out_ch;
        for (int co = 0; co < s.out_ch; ++co) {
            double* wk = gw + (static_cast<std::size_t>(co) * s.in_ch) * s.K + k;
            const double cv = cot_v[co];
            for (int ci = 0; ci < s.in_ch; ++ci) wk[static_cast<std::size_t>(ci) * s.K] += in_v[ci] * cv;
        }
    });
}

// ---- forward cache ---------------------------------------------------------

struct ForwardCache {
    std::vector<std::vector<double>> stage;  // stage[0] = input state; stage[i+1] = tanh(conv_i(...))
    std::vector<double> temb_post1;          // tanh(w1 t + b1)
    std::vector<double> z;                   // flat features + time embedding
    std::vector<double> fc1_post;            // tanh(fc1 z)
};

void forward_impl(const NetPlan& p, std::span<const double> params, std::span<const double> state,
                  double t, std::span<double> out, ForwardCache* cache) {
    if (state.size() != p.state_size)
        throw std::invalid_argument("velocity_forward: input stage: state size " +
                                    std::to_string(state.size()) + " != expected " +
                                    std::to_string(p.state_size));
    if (out.size() != p.state_size)
        throw std::invalid_argument("velocity_forward: output stage: size mismatch");
    const double* P = params.data();
    const int stages = static_cast<int>(p.conv_w.size());

    std::vector<std::vector<double>> local;
    std::vector<std::vector<double>>& st = cache ? cache->stage : local;
    st.assign(static_cast<std::size_t>(stages) + 1, {});
    st[0].assign(state.begin(), state.end());
    for (int i = 0; i < stages; ++i) {
        const ConvShape cs = conv_shape(p.stage_dims[i], p.stage_ch[i], p.stage_ch[i + 1], 2);
        st[i + 1].resize(voxel_count(cs.out_dims) * static_cast<std::size_t>(cs.out_ch));
        conv_forward(cs, P + p.conv_w[i], P + p.conv_b[i], st[i].data(), st[i + 1].data());
        for (double& v : st[i + 1]) v = std::tanh(v);
    }
    const std::vector<double>& flat = st[stages];  // length flat_width

    // Time embedding: scalar t -> affine -> tanh -> affine to flat width.
    const int E = p.embed_width, F = p.flat_width, H = p.hidden;
    std::vector<double> post1(E);
    for (int e = 0; e < E; ++e) post1[e] = std::tanh(P[p.temb_w1 + e] * t + P[p.temb_b1 + e]);
    std::vector<double> z(F);
    matvec(P + p.temb_w2, post1.data(), z.data(), F, E, P + p.temb_b2);
    for (int f = 0; f < F; ++f) z[f] += flat[f];

    std::vector<double> h1(H);
    matvec(P + p.fc1_w, z.data(), h1.data(), H, F, P + p.fc1_b);
    for (double& v : h1) v = std::tanh(v);
    matvec(P + p.fc2_w, h1.data(), out.data(), static_cast<int>(p.state_size), H, P + p.fc2_b);

    if (cache) {
        cache->temb_post1 = std::move(post1);
        cache->z = std::move(z);
        cache->fc1_post = std::move(h1);
    }
}

}  // namespace

void velocity_forward(const NetPlan& plan, std::span<const double> params,
                      std::span<const double> state, double t, std::span<double> out) {
    if (params.size() != plan.total)
        throw std::invalid_argument("velocity_forward: parameter vector size mismatch");
    forward_impl(plan, params, state, t, out, nullptr);
}

void velocity_vjp(const NetPlan& p, std::span<const double> params, std::span<const double> state,
                  double t, std::span<const double> cotangent, std::span<double> grad_state,
                  std::span<double> grad_params) {
    if (params.size() != p.total || grad_params.size() != p.total)
        throw std::invalid_argument("velocity_vjp: parameter vector size mismatch");
    if (cotangent.size() != p.state_size)
        throw std::invalid_argument("velocity_vjp: cotangent size mismatch");
    if (grad_state.size() != p.state_size)
        throw std::invalid_argument("velocity_vjp: grad_state size mismatch");

    ForwardCache cache;
    std::vector<double> out(p.state_size);
    forward_impl(p, params, state, t, out, &cache);

    const double* P = params.data();
    double* G = grad_params.data();
    const int E = p.embed_width, F = p.flat_width, H = p.hidden;
    const int OUT = static_cast<int>(p.state_size);
    const int stages = static_cast<int>(p.conv_w.size());

    // fc2
    outer_acc(cotangent.data(), cache.fc1_post.data(), G + p.fc2_w, G + p.fc2_b, OUT, H);
    std::vector<double> c_h(H);
    matvec_t(P + p.fc2_w, cotangent.data(), c_h.data(), OUT, H);
    for (int h = 0; h < H; ++h) c_h[h] *= 1.0 - cache.fc1_post[h] * cache.fc1_post[h];

    // fc1
    outer_acc(c_h.data(), cache.z.data(), G + p.fc1_w, G + p.fc1_b, H, F);
    std::vector<double> c_z(F);
    matvec_t(P + p.fc1_w, c_h.data(), c_z.data(), H, F);

    // time embedding branch (c_z flows into both the embedding and the flat features)
    outer_acc(c_z.data(), cache.temb_post1.data(), G + p.temb_w2, G + p.temb_b2, F, E);
    std::vector<double> c_post1(E);
    matvec_t(P + p.temb_w2, c_z.data(), c_post1.data(), F, E);
    for (int e = 0; e < E; ++e) {
        const double d_pre = c_post1[e] * (1.0 - cache.temb_post1[e] * cache.temb_post1[e]);
        G[p.temb_w1 + e] += d_pre * t;
        G[p.temb_b1 + e] += d_pre;
    }

    // conv stack, backward
    std::vector<double> c_post = std::move(c_z);  // cotangent of stage output (post-tanh)
    std::vector<double> c_in;
    for (int i = stages - 1; i >= 0; --i) {
        const ConvShape cs = conv_shape(p.stage_dims[i], p.stage_ch[i], p.stage_ch[i + 1], 2);
        const std::vector<double>& post = cache.stage[i + 1];
        for (std::size_t j = 0; j < c_post.size(); ++j) c_post[j] *= 1.0 - post[j] * post[j];
        conv_vjp_params(cs, cache.stage[i].data(), c_post.data(), G + p.conv_w[i], G + p.conv_b[i]);
        c_in.resize(cache.stage[i].size());
        conv_vjp_input(cs, P + p.conv_w[i], c_post.data(), c_in.data());
        std::swap(c_post, c_in);
    }
    std::copy(c_post.begin(), c_post.end(), grad_state.begin());
}

VectorGrid velocity_forward(const VelocityModel& m, const VectorGrid& state, double t) {
    VectorGrid out(state.dims);
    velocity_forward(m.plan, m.params, state.data, t, out.data);
    return out;
}

VectorGrid encode(const VectorGrid& displacement, int factor) {
    if (factor < 1) throw std::invalid_argument("encode: factor must be positive");
    for (int n : displacement.dims)
        if (n % factor != 0)
            throw std::invalid_argument("encode: dims not divisible by factor " +
                                        std::to_string(factor));
    if (factor == 1) return displacement;
    const int d = static_cast<int>(displacement.dims.size());
    Dims out_dims = displacement.dims;
    for (int& n : out_dims) n /= factor;
    VectorGrid out(out_dims);
    const auto in_strides = row_major_strides(displacement.dims);
    const std::size_t out_vox = voxel_count(out_dims);
    const double inv = 1.0 / std::pow(static_cast<double>(factor), d);
    int o[3] = {0, 0, 0};
    int j[3] = {0, 0, 0};
    const int block = static_cast<int>(std::pow(factor, d) + 0.5);
    for (std::size_t ov = 0; ov < out_vox; ++ov) {
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int bi = 0; bi < block; ++bi) {
                int rem = bi;
                std::size_t in_flat = 0;
                for (int a = d - 1; a >= 0; --a) {
                    j[a] = rem % factor;
                    rem /= factor;
                }
                for (int a = 0; a < d; ++a)
                    in_flat += in_strides[a] * static_cast<std::size_t>(o[a] * factor + j[a]);
                acc += displacement.data[in_flat * d + c];
            }
            out.data[ov * d + c] = acc * inv;
        }
        int a = d - 1;
        while (a >= 0 && ++o[a] == out_dims[a]) o[a--] = 0;
    }
    return out;
}

VectorGrid upsample_linear(const VectorGrid& latent, const Dims& out_dims) {
    const int d = static_cast<int>(out_dims.size());
    if (static_cast<int>(latent.dims.size()) != d)
        throw std::invalid_argument("upsample_linear: dimensionality mismatch");
    const auto lat_strides = row_major_strides(latent.dims);
    VectorGrid out(out_dims);
    double scale[3], pnt[3];
    for (int a = 0; a < d; ++a)
        scale[a] = out_dims[a] > 1
                       ? static_cast<double>(latent.dims[a] - 1) / static_cast<double>(out_dims[a] - 1)
                       : 0.0;
    const std::size_t out_vox = voxel_count(out_dims);
    int o[3] = {0, 0, 0};
    for (std::size_t ov = 0; ov < out_vox; ++ov) {
        for (int a = 0; a < d; ++a) pnt[a] = static_cast<double>(o[a]) * scale[a];
        const auto st = detail::interp_stencil(latent.dims, lat_strides, std::span<const double>(pnt, d));
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int k = 0; k < st.corners; ++k) acc += st.w[k] * latent.data[st.flat[k] * d + c];
            out.data[ov * d + c] = acc;
        }
        int a = d - 1;
        while (a >= 0 && ++o[a] == out_dims[a]) o[a--] = 0;
    }
    return out;
}

VectorGrid upsample_linear_adjoint(const VectorGrid& cotangent, const Dims& latent_dims) {
    const int d = static_cast<int>(latent_dims.size());
    const auto lat_strides = row_major_strides(latent_dims);
    VectorGrid grad(latent_dims);
    double scale[3], pnt[3];
    for (int a = 0; a < d; ++a)
        scale[a] = cotangent.dims[a] > 1 ? static_cast<double>(latent_dims[a] - 1) /
                                               static_cast<double>(cotangent.dims[a] - 1)
                                         : 0.0;
    const std::size_t out_vox = voxel_count(cotangent.dims);
    int o[3] = {0, 0, 0};
    for (std::size_t ov = 0; ov < out_vox; ++ov) {
        for (int a = 0; a < d; ++a) pnt[a] = static_cast<double>(o[a]) * scale[a];
        const auto st = detail::interp_stencil(latent_dims, lat_strides, std::span<const double>(pnt, d));
        for (int c = 0; c < d; ++c) {
            const double cv = cotangent.data[ov * d + c];
            for (int k = 0; k < st.corners; ++k) grad.data[st.flat[k] * d + c] += st.w[k] * cv;
        }
        int a = d - 1;
        while (a >= 0 && ++o[a] == cotangent.dims[a]) o[a--] = 0;
    }
    return grad;
}

VectorGrid decode(const VelocityModel& m, const VectorGrid& latent, int window) {
    if (m.arch.mode != ModelMode::latent)
        throw std::invalid_argument("decode: model is not in latent mode");
    if (latent.dims != m.plan.state_dims)
        throw std::invalid_argument("decode: latent dims do not match arch");
    VectorGrid up = upsample_linear(latent, m.arch.dims);
    const ConvShape cs = conv_shape(m.arch.dims, m.plan.d, m.plan.d, 1);
    VectorGrid full(m.arch.dims);
    conv_forward(cs, m.params.data() + m.plan.dec_w, nullptr, up.data.data(), full.data.data());
    for (std::size_t i = 0; i < full.data.size(); ++i) full.data[i] += up.data[i];
    return box_smooth(full, window);
}

VectorGrid decode_vjp(const VelocityModel& m, const VectorGrid& latent, int window,
                      const VectorGrid& cotangent, std::span<double> grad_params) {
    if (m.arch.mode != ModelMode::latent)
        throw std::invalid_argument("decode_vjp: model is not in latent mode");
    if (latent.dims != m.plan.state_dims)
        throw std::invalid_argument("decode_vjp: latent dims do not match arch");
    if (grad_params.size() != m.plan.total)
        throw std::invalid_argument("decode_vjp: grad_params size mismatch");
    VectorGrid up = upsample_linear(latent, m.arch.dims);
    VectorGrid c_full = box_smooth_adjoint(cotangent, window);
    const ConvShape cs = conv_shape(m.arch.dims, m.plan.d, m.plan.d, 1);
    conv_vjp_params(cs, up.data.data(), c_full.data.data(), grad_params.data() + m.plan.dec_w,
                    nullptr);
    VectorGrid c_up(m.arch.dims);
    conv_vjp_input(cs, m.params.data() + m.plan.dec_w, c_full.data.data(), c_up.data.data());
    for (std::size_t i = 0; i < c_up.data.size(); ++i) c_up.data[i] += c_full.data[i];
    return upsample_linear_adjoint(c_up, latent.dims);
}

namespace {

double init_bound(const NetPlan& plan, const std::string& name, int d, bool full_random) {
    if (name.rfind("conv", 0) == 0) {
        // fan-in = input channels * kernel size; recover the stage index.
        const int stage = std::stoi(name.substr(4, name.find('.') - 4));
        const int in_ch = plan.stage_ch[stage];
        return std::sqrt(1.0 / (static_cast<double>(in_ch) * pow3(d)));
    }
    if (name == "time_embed.w1" || name == "time_embed.b1") return 1.0;
    if (name == "time_embed.w2" || name == "time_embed.b2")
        return std::sqrt(1.0 / plan.embed_width);
    if (name == "fc1.weight" || name == "fc1.bias") return std::sqrt(1.0 / plan.flat_width);
    if (name == "fc2.weight" || name == "fc2.bias")
        return full_random ? std::sqrt(1.0 / plan.hidden) : 0.0;
    if (name == "decoder.weight")
        return full_random ? std::sqrt(1.0 / (static_cast<double>(d) * pow3(d))) : 0.0;
    throw std::logic_error("init_bound: unknown parameter " + name);
}

void draw_params(VelocityModel& m, std::uint64_t seed, bool full_random) {
    std::mt19937_64 gen(seed);
    const int d = m.arch.spatial_axes();
    for (const ParamSpec& spec : m.layout.entries) {
        const double bound = init_bound(m.plan, spec.name, d, full_random);
        if (bound == 0.0) {
            std::fill_n(m.params.begin() + spec.offset, spec.count, 0.0);
        } else {
            for (std::size_t i = 0; i < spec.count; ++i)
                m.params[spec.offset + i] = uniform_pm(gen, bound);
        }
    }
}

}  // namespace

VelocityModel init_params(const Arch& arch, std::uint64_t seed) {
    VelocityModel m;
    m.arch = resolve_arch(arch);
    m.layout = build_layout(m.arch);
    m.plan = build_plan(m.arch);
    m.params.assign(m.layout.total, 0.0);
    draw_params(m, seed, false);
    return m;
}

void randomize_all_params(VelocityModel& model, std::uint64_t seed) {
    draw_params(model, seed, true);
}

// ---- checkpoint -------------------------------------------------------------
// "NODR" | u16 LE version=1 | u32 LE header length | UTF-8 JSON header |
// params as little-endian float64, concatenated in header order.

namespace {

constexpr char kMagic[4] = {'N', 'O', 'D', 'R'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string mode_name(ModelMode m) { return m == ModelMode::direct ? "direct" : "latent"; }

ModelMode mode_from_name(const std::string& s) {
    if (s == "direct") return ModelMode::direct;
    if (s == "latent") return ModelMode::latent;
    throw format_error("checkpoint: unknown mode '" + s + "'");
}

}  // namespace

void save_checkpoint(const VelocityModel& m, const std::filesystem::path& path) {
    json arch;
    arch["mode"] = mode_name(m.arch.mode);
    arch["dims"] = m.arch.dims;
    arch["conv_channels"] = m.arch.conv_channels;
    arch["time_embed_width"] = m.arch.time_embed_width;
    arch["hidden_width"] = m.arch.hidden_width;
    arch["latent_factor"] = m.arch.latent_factor;
    arch["smoothing_window"] = m.arch.smoothing_window;
    json plist = json::array();
    for (const ParamSpec& s : m.layout.entries) plist.push_back({{"name", s.name}, {"shape", s.shape}});
    const std::string header = json{{"arch", arch}, {"params", plist}}.dump();

    std::string bytes;
    bytes.append(kMagic, 4);
    put_u16(bytes, kVersion);
    put_u32(bytes, static_cast<std::uint32_t>(header.size()));
    bytes += header;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(m.params.data()),
              static_cast<std::streamsize>(m.params.size() * 8));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

VelocityModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw format_error("checkpoint: bad magic");
    const std::uint16_t version =
        static_cast<std::uint8_t>(bytes[4]) | (static_cast<std::uint8_t>(bytes[5]) << 8);
    if (version != kVersion)
        throw format_error("checkpoint: unsupported version " + std::to_string(version));
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[6 + i])) << (8 * i);
    if (bytes.size() < 10 + static_cast<std::size_t>(hlen))
        throw format_error("checkpoint: truncated header");

    json header;
    try {
        header = json::parse(bytes.substr(10, hlen));
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint: malformed header: ") + e.what());
    }

    Arch arch;
    try {
        const json& a = header.at("arch");
        arch.mode = mode_from_name(a.at("mode").get<std::string>());
        arch.dims = a.at("dims").get<Dims>();
        arch.conv_channels = a.at("conv_channels").get<std::vector<int>>();
        arch.time_embed_width = a.at("time_embed_width").get<int>();
        arch.hidden_width = a.at("hidden_width").get<int>();
        arch.latent_factor = a.at("latent_factor").get<int>();
        arch.smoothing_window = a.at("smoothing_window").get<int>();
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint: malformed arch: ") + e.what());
    }

    VelocityModel m;
    m.arch = resolve_arch(arch);
    m.layout = build_layout(m.arch);
    m.plan = build_plan(m.arch);

    try {
        const json& plist = header.at("params");
        if (!plist.is_array() || plist.size() != m.layout.entries.size())
            throw format_error("checkpoint: parameter list count mismatch");
        for (std::size_t i = 0; i < m.layout.entries.size(); ++i) {
            const ParamSpec& spec = m.layout.entries[i];
            const std::string name = plist[i].at("name").get<std::string>();
            const std::vector<int> shape = plist[i].at("shape").get<std::vector<int>>();
            if (name != spec.name || shape != spec.shape)
                throw format_error("checkpoint: shape mismatch for parameter '" + name + "'");
        }
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint: malformed parameter list: ") + e.what());
    }

    const std::size_t expected = m.layout.total * 8;
    const std::size_t got = bytes.size() - 10 - hlen;
    if (got != expected)
        throw format_error("checkpoint: truncated payload: expected " + std::to_string(expected) +
                           " bytes, got " + std::to_string(got));
    m.params.resize(m.layout.total);
    std::memcpy(m.params.data(), bytes.data() + 10 + hlen, expected);
    return m;
}

}  // namespace flowreg
