#include "flowreg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace flowreg {

namespace {

void check_dims(const Dims& dims, const char* who) {
    if (dims.size() != 2 && dims.size() != 3)
        throw std::invalid_argument(std::string(who) + ": expected 2 or 3 spatial axes, got " +
                                    std::to_string(dims.size()));
    for (int n : dims)
        if (n < 1) throw std::invalid_argument(std::string(who) + ": non-positive axis length");
}

void check_same_dims(const Dims& a, const Dims& b, const char* who) {
    if (a != b) throw std::invalid_argument(std::string(who) + ": dims mismatch");
}

}  // namespace

std::size_t voxel_count(const Dims& dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

std::vector<std::size_t> row_major_strides(const Dims& dims) {
    std::vector<std::size_t> s(dims.size(), 1);
    for (int a = static_cast<int>(dims.size()) - 2; a >= 0; --a)
        s[a] = s[a + 1] * static_cast<std::size_t>(dims[a + 1]);
    return s;
}

ScalarGrid::ScalarGrid(Dims d, double fill) : dims(std::move(d)) {
    check_dims(dims, "ScalarGrid");
    data.assign(voxel_count(dims), fill);
}

double& ScalarGrid::at(std::span<const int> idx) {
    auto strides = row_major_strides(dims);
    std::size_t flat = 0;
    for (std::size_t a = 0; a < dims.size(); ++a) flat += strides[a] * static_cast<std::size_t>(idx[a]);
    return data[flat];
}

double ScalarGrid::at(std::span<const int> idx) const {
    return const_cast<ScalarGrid*>(this)->at(idx);
}

VectorGrid::VectorGrid(Dims d, double fill) : dims(std::move(d)) {
    check_dims(dims, "VectorGrid");
    channels = static_cast<int>(dims.size());
    data.assign(voxel_count(dims) * static_cast<std::size_t>(channels), fill);
}

VoxelCloud identity_cloud(const Dims& dims) {
    check_dims(dims, "identity_cloud");
    const int d = static_cast<int>(dims.size());
    VoxelCloud q;
    q.dims = dims;
    q.channels = d;
    q.positions.resize(voxel_count(dims) * static_cast<std::size_t>(d));
    std::vector<int> idx(d, 0);
    std::size_t v = 0;
    for (;;) {
        for (int a = 0; a < d; ++a) q.positions[v * d + a] = static_cast<double>(idx[a]);
        ++v;
        int a = d - 1;
        while (a >= 0 && ++idx[a] == dims[a]) idx[a--] = 0;
        if (a < 0) break;
    }
    return q;
}

VoxelCloud cloud_from_displacement(const VectorGrid& u) {
    VoxelCloud q = identity_cloud(u.dims);
    for (std::size_t i = 0; i < u.data.size(); ++i) q.positions[i] += u.data[i];
    return q;
}

VectorGrid displacement_from_cloud(const VoxelCloud& q) {
    VectorGrid u(q.dims);
    const VoxelCloud id = identity_cloud(q.dims);
    for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] = q.positions[i] - id.positions[i];
    return u;
}

namespace detail {

double interp_channel(std::span<const double> data, const Dims& dims,
                      const std::vector<std::size_t>& strides, int channels, int channel,
                      std::span<const double> p, double* grad) {
    const int d = static_cast<int>(dims.size());
    int i0[3];
    double fr[3];
    bool clamped[3];
    for (int a = 0; a < d; ++a) {
        double x = p[a];
        const double hi = static_cast<double>(dims[a] - 1);
        clamped[a] = false;
        if (x <= 0.0) { x = 0.0; clamped[a] = (p[a] < 0.0); }
        if (x >= hi) { x = hi; clamped[a] = clamped[a] || (p[a] > hi); }
        const double fl = std::floor(x);
        i0[a] = static_cast<int>(fl);
        fr[a] = x - fl;
    }
    double value = 0.0;
    if (grad)
        for (int a = 0; a < d; ++a) grad[a] = 0.0;
    const int corners = 1 << d;
    for (int c = 0; c < corners; ++c) {
        double w = 1.0;
        std::size_t flat = 0;
        for (int a = 0; a < d; ++a) {
            const bool hi_corner = (c >> a) & 1;
            w *= hi_corner ? fr[a] : (1.0 - fr[a]);
            int ia = i0[a] + (hi_corner ? 1 : 0);
            if (ia > dims[a] - 1) ia = dims[a] - 1;
            flat += strides[a] * static_cast<std::size_t>(ia);
        }
        const double v = data[flat * static_cast<std::size_t>(channels) + static_cast<std::size_t>(channel)];
        value += w * v;
        if (grad) {
            for (int a = 0; a < d; ++a) {
                if (clamped[a]) continue;
                double dw = (c >> a) & 1 ? 1.0 : -1.0;
                for (int b = 0; b < d; ++b) {
                    if (b == a) continue;
                    dw *= (c >> b) & 1 ? fr[b] : (1.0 - fr[b]);
                }
                grad[a] += dw * v;
            }
        }
    }
    return value;
}

Stencil interp_stencil(const Dims& dims, const std::vector<std::size_t>& strides,
                       std::span<const double> p) {
    const int d = static_cast<int>(dims.size());
    int i0[3];
    double fr[3];
    for (int a = 0; a < d; ++a) {
        double x = p[a];
        const double hi = static_cast<double>(dims[a] - 1);
        if (x <= 0.0) x = 0.0;
        if (x >= hi) x = hi;
        const double fl = std::floor(x);
        i0[a] = static_cast<int>(fl);
        fr[a] = x - fl;
    }
    Stencil st;
    st.corners = 1 << d;
    for (int c = 0; c < st.corners; ++c) {
        double w = 1.0;
        std::size_t flat = 0;
        for (int a = 0; a < d; ++a) {
            const bool hi_corner = (c >> a) & 1;
            w *= hi_corner ? fr[a] : (1.0 - fr[a]);
            int ia = i0[a] + (hi_corner ? 1 : 0);
            if (ia > dims[a] - 1) ia = dims[a] - 1;
            flat += strides[a] * static_cast<std::size_t>(ia);
        }
        st.flat[c] = flat;
        st.w[c] = w;
    }
    return st;
}

}  // namespace detail

namespace {

void check_coords_finite(const VoxelCloud& coords) {
    const int d = coords.channels;
    for (std::size_t v = 0; v * static_cast<std::size_t>(d) < coords.positions.size(); ++v)
        for (int a = 0; a < d; ++a)
            if (!std::isfinite(coords.positions[v * d + a]))
                throw std::invalid_argument("sample_linear: non-finite coordinate at voxel index " +
                                            std::to_string(v));
}

}  // namespace

ScalarGrid sample_linear(const ScalarGrid& field, const VoxelCloud& coords) {
    if (field.data.empty()) throw std::invalid_argument("sample_linear: empty field");
    check_coords_finite(coords);
    const auto strides = row_major_strides(field.dims);
    const int d = static_cast<int>(field.dims.size());
    ScalarGrid out(coords.dims);
    const std::size_t n = out.size();
    for (std::size_t v = 0; v < n; ++v) {
        std::span<const double> p(&coords.positions[v * d], static_cast<std::size_t>(d));
        out.data[v] = detail::interp_channel(field.data, field.dims, strides, 1, 0, p, nullptr);
    }
    return out;
}

VectorGrid sample_linear(const VectorGrid& field, const VoxelCloud& coords) {
    if (field.data.empty()) throw std::invalid_argument("sample_linear: empty field");
    check_coords_finite(coords);
    const auto strides = row_major_strides(field.dims);
    const int d = static_cast<int>(field.dims.size());
    VectorGrid out(coords.dims);
    const std::size_t n = out.vox();
    for (std::size_t v = 0; v < n; ++v) {
        std::span<const double> p(&coords.positions[v * d], static_cast<std::size_t>(d));
        for (int c = 0; c < field.channels; ++c)
            out.data[v * field.channels + c] =
                detail::interp_channel(field.data, field.dims, strides, field.channels, c, p, nullptr);
    }
    return out;
}

ScalarGrid warp_image(const ScalarGrid& image, const VectorGrid& displacement) {
    check_same_dims(image.dims, displacement.dims, "warp_image");
    const auto strides = row_major_strides(image.dims);
    const int d = static_cast<int>(image.dims.size());
    const VoxelCloud id = identity_cloud(image.dims);
    ScalarGrid out(image.dims);
    double p[3];
    for (std::size_t v = 0; v < out.size(); ++v) {
        for (int a = 0; a < d; ++a) {
            p[a] = id.positions[v * d + a] + displacement.data[v * d + a];
            if (!std::isfinite(p[a]))
                throw std::invalid_argument("warp_image: non-finite coordinate at voxel index " +
                                            std::to_string(v));
        }
        out.data[v] = detail::interp_channel(image.data, image.dims, strides, 1, 0,
                                             std::span<const double>(p, d), nullptr);
    }
    return out;
}

void warp_image_with_gradient(const ScalarGrid& image, const VectorGrid& displacement,
                              ScalarGrid& warped, VectorGrid& dwarped_dcoord) {
    check_same_dims(image.dims, displacement.dims, "warp_image_with_gradient");
    const auto strides = row_major_strides(image.dims);
    const int d = static_cast<int>(image.dims.size());
    const VoxelCloud id = identity_cloud(image.dims);
    warped = ScalarGrid(image.dims);
    dwarped_dcoord = VectorGrid(image.dims);
    double p[3], g[3];
    for (std::size_t v = 0; v < warped.size(); ++v) {
        for (int a = 0; a < d; ++a) {
            p[a] = id.positions[v * d + a] + displacement.data[v * d + a];
            if (!std::isfinite(p[a]))
                throw std::invalid_argument("warp_image_with_gradient: non-finite coordinate at voxel index " +
                                            std::to_string(v));
        }
        warped.data[v] = detail::interp_channel(image.data, image.dims, strides, 1, 0,
                                                std::span<const double>(p, d), g);
        for (int a = 0; a < d; ++a) dwarped_dcoord.data[v * d + a] = g[a];
    }
}

namespace {

// One finite-difference pass along `axis` of a multi-channel field.
void diff_axis(const Dims& dims, int channels, const double* in, double* out, int axis) {
    const auto strides = row_major_strides(dims);
    const std::size_t s = strides[axis] * static_cast<std::size_t>(channels);
    const int n = dims[axis];
    const std::size_t axis_stride = strides[axis];
    const std::size_t vox_total = voxel_count(dims);
    for (std::size_t v = 0; v < vox_total; ++v) {
        const int ia = static_cast<int>((v / axis_stride) % static_cast<std::size_t>(n));
        for (int c = 0; c < channels; ++c) {
            const std::size_t e = v * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c);
            if (ia == 0)
                out[e] = in[e + s] - in[e];
            else if (ia == n - 1)
                out[e] = in[e] - in[e - s];
            else
                out[e] = 0.5 * (in[e + s] - in[e - s]);
        }
    }
}

void check_gradient_axes(const Dims& dims) {
    for (std::size_t a = 0; a < dims.size(); ++a)
        if (dims[a] < 2)
            throw std::invalid_argument("spatial_gradient: axis " + std::to_string(a) +
                                        " has length < 2");
}

}  // namespace

std::vector<ScalarGrid> spatial_gradient(const ScalarGrid& field) {
    check_gradient_axes(field.dims);
    std::vector<ScalarGrid> out;
    for (std::size_t a = 0; a < field.dims.size(); ++a) {
        ScalarGrid g(field.dims);
        diff_axis(field.dims, 1, field.data.data(), g.data.data(), static_cast<int>(a));
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<VectorGrid> spatial_gradient(const VectorGrid& field) {
    check_gradient_axes(field.dims);
    std::vector<VectorGrid> out;
    for (std::size_t a = 0; a < field.dims.size(); ++a) {
        VectorGrid g(field.dims);
        diff_axis(field.dims, field.channels, field.data.data(), g.data.data(), static_cast<int>(a));
        out.push_back(std::move(g));
    }
    return out;
}

ScalarGrid spatial_gradient_adjoint(const ScalarGrid& cotangent, int axis) {
    check_gradient_axes(cotangent.dims);
    const auto strides = row_major_strides(cotangent.dims);
    const std::size_t s = strides[axis];
    const int n = cotangent.dims[axis];
    ScalarGrid out(cotangent.dims);
    const std::size_t vox_total = voxel_count(cotangent.dims);
    for (std::size_t v = 0; v < vox_total; ++v) {
        const int ia = static_cast<int>((v / s) % static_cast<std::size_t>(n));
        const double c = cotangent.data[v];
        if (ia == 0) {
            out.data[v + s] += c;
            out.data[v] -= c;
        } else if (ia == n - 1) {
            out.data[v] += c;
            out.data[v - s] -= c;
        } else {
            out.data[v + s] += 0.5 * c;
            out.data[v - s] -= 0.5 * c;
        }
    }
    return out;
}

VectorGrid spatial_gradient_adjoint(const VectorGrid& cotangent, int axis) {
    check_gradient_axes(cotangent.dims);
    const auto strides = row_major_strides(cotangent.dims);
    const std::size_t s = strides[axis] * static_cast<std::size_t>(cotangent.channels);
    const int n = cotangent.dims[axis];
    VectorGrid out(cotangent.dims);
    const std::size_t vox_total = voxel_count(cotangent.dims);
    for (std::size_t v = 0; v < vox_total; ++v) {
        const int ia = static_cast<int>((v / strides[axis]) % static_cast<std::size_t>(n));
        for (int c = 0; c < cotangent.channels; ++c) {
            const std::size_t e = v * static_cast<std::size_t>(cotangent.channels) + static_cast<std::size_t>(c);
            const double cv = cotangent.data[e];
            if (ia == 0) {
                out.data[e + s] += cv;
                out.data[e] -= cv;
            } else if (ia == n - 1) {
                out.data[e] += cv;
                out.data[e - s] -= cv;
            } else {
                out.data[e + s] += 0.5 * cv;
                out.data[e - s] -= 0.5 * cv;
            }
        }
    }
    return out;
}

ScalarGrid jacobian_determinants(const VectorGrid& displacement) {
    const int d = static_cast<int>(displacement.dims.size());
    const auto grads = spatial_gradient(displacement);  // grads[a](v, c) = du_c/dx_a
    ScalarGrid det(displacement.dims);
    const std::size_t n = det.size();
    for (std::size_t v = 0; v < n; ++v) {
        double J[3][3];
        for (int c = 0; c < d; ++c)
            for (int a = 0; a < d; ++a)
                J[c][a] = grads[a].data[v * d + c] + (c == a ? 1.0 : 0.0);
        if (d == 2) {
            det.data[v] = J[0][0] * J[1][1] - J[0][1] * J[1][0];
        } else {
            det.data[v] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                          J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                          J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        }
    }
    return det;
}

double fold_percentage(const VectorGrid& displacement) {
    const ScalarGrid det = jacobian_determinants(displacement);
    std::size_t neg = 0;
    for (double v : det.data)
        if (v < 0.0) ++neg;
    return static_cast<double>(neg) / static_cast<double>(det.size());
}

namespace {

void check_window(int window) {
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("box_smooth: window must be odd and positive, got " +
                                    std::to_string(window));
}

// One smoothing pass along `axis`: gather form.
void box_pass(const Dims& dims, int channels, const double* in, double* out, int axis, int window) {
    const auto strides = row_major_strides(dims);
    const std::size_t s = strides[axis];
    const int n = dims[axis];
    const int r = window / 2;
    const double inv_w = 1.0 / static_cast<double>(window);
    const std::size_t vox_total = voxel_count(dims);
    for (std::size_t v = 0; v < vox_total; ++v) {
        const int ia = static_cast<int>((v / s) % static_cast<std::size_t>(n));
        const std::size_t base = (v - static_cast<std::size_t>(ia) * s) * static_cast<std::size_t>(channels);
        for (int c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (int k = -r; k <= r; ++k) {
                const int j = detail::reflect_index(ia + k, n);
                acc += in[base + static_cast<std::size_t>(j) * s * static_cast<std::size_t>(channels) +
                          static_cast<std::size_t>(c)];
            }
            out[v * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)] = acc * inv_w;
        }
    }
}

// Adjoint of box_pass: scatter form.
void box_pass_adjoint(const Dims& dims, int channels, const double* in, double* out, int axis,
                      int window) {
    const auto strides = row_major_strides(dims);
    const std::size_t s = strides[axis];
    const int n = dims[axis];
    const int r = window / 2;
    const double inv_w = 1.0 / static_cast<double>(window);
    const std::size_t vox_total = voxel_count(dims);
    std::fill(out, out + vox_total * static_cast<std::size_t>(channels), 0.0);
    for (std::size_t v = 0; v < vox_total; ++v) {
        const int ia = static_cast<int>((v / s) % static_cast<std::size_t>(n));
        const std::size_t base = (v - static_cast<std::size_t>(ia) * s) * static_cast<std::size_t>(channels);
        for (int c = 0; c < channels; ++c) {
            const double val = in[v * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)] * inv_w;
            for (int k = -r; k <= r; ++k) {
                const int j = detail::reflect_index(ia + k, n);
                out[base + static_cast<std::size_t>(j) * s * static_cast<std::size_t>(channels) +
                    static_cast<std::size_t>(c)] += val;
            }
        }
    }
}

}  // namespace

VectorGrid box_smooth(const VectorGrid& field, int window) {
    check_window(window);
    if (window == 1) return field;
    VectorGrid cur = field;
    VectorGrid next(field.dims);
    for (std::size_t a = 0; a < field.dims.size(); ++a) {
        box_pass(field.dims, field.channels, cur.data.data(), next.data.data(), static_cast<int>(a),
                 window);
        std::swap(cur, next);
    }
    return cur;
}

VectorGrid box_smooth_adjoint(const VectorGrid& cotangent, int window) {
    check_window(window);
    if (window == 1) return cotangent;
    VectorGrid cur = cotangent;
    VectorGrid next(cotangent.dims);
    for (int a = static_cast<int>(cotangent.dims.size()) - 1; a >= 0; --a) {
        box_pass_adjoint(cotangent.dims, cotangent.channels, cur.data.data(), next.data.data(), a,
                         window);
        std::swap(cur, next);
    }
    return cur;
}

}  // namespace flowreg
