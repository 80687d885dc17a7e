#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace flowreg {

// Per-axis extents of a regular lattice, 2 or 3 spatial axes.
// All field data is row-major with the last axis fastest.
using Dims = std::vector<int>;

std::size_t voxel_count(const Dims& dims);
std::vector<std::size_t> row_major_strides(const Dims& dims);

/// Scalar intensity field on a regular lattice. One value per voxel.
struct ScalarGrid {
    Dims dims;
    std::vector<double> data;

    ScalarGrid() = default;
    explicit ScalarGrid(Dims d, double fill = 0.0);

    std::size_t size() const { return data.size(); }
    double& at(std::span<const int> idx);
    double at(std::span<const int> idx) const;
};

/// Displacement/velocity field: one vector per voxel, channel-fastest
/// storage (data[voxel * channels + c]), components in voxel units.
struct VectorGrid {
    Dims dims;
    int channels = 0;
    std::vector<double> data;

    VectorGrid() = default;
    explicit VectorGrid(Dims d, double fill = 0.0);  // channels = dims.size()

    std::size_t vox() const { return data.empty() ? 0 : data.size() / static_cast<std::size_t>(channels); }
};

/// Absolute voxel positions, same storage layout as VectorGrid.
/// cloud - identity lattice == displacement field; the two interconvert
/// losslessly.
struct VoxelCloud {
    Dims dims;
    int channels = 0;
    std::vector<double> positions;
};

VoxelCloud identity_cloud(const Dims& dims);
VoxelCloud cloud_from_displacement(const VectorGrid& u);
VectorGrid displacement_from_cloud(const VoxelCloud& q);

// Multilinear interpolation at arbitrary positions. Coordinates outside
// the lattice are clamped to the boundary before interpolation.
// Non-finite coordinates raise std::invalid_argument naming the voxel index.
ScalarGrid sample_linear(const ScalarGrid& field, const VoxelCloud& coords);
VectorGrid sample_linear(const VectorGrid& field, const VoxelCloud& coords);

// Backward warp: out(x) = image(x + u(x)).
ScalarGrid warp_image(const ScalarGrid& image, const VectorGrid& displacement);

// Backward warp that also returns d out(x) / d coordinate, one vector per
// voxel (the interpolant's derivative w.r.t. the query point). Clamped
// axes contribute zero derivative.
void warp_image_with_gradient(const ScalarGrid& image, const VectorGrid& displacement,
                              ScalarGrid& warped, VectorGrid& dwarped_dcoord);

// Finite-difference derivatives, voxel-unit spacing: central differences
// at interior voxels, one-sided at boundary voxels. Every axis must have
// length >= 2. result[a] = d(field)/d(x_a).
std::vector<ScalarGrid> spatial_gradient(const ScalarGrid& field);
std::vector<VectorGrid> spatial_gradient(const VectorGrid& field);

// Adjoint of the per-axis difference operator used by spatial_gradient
// (scatter form), needed by loss gradients.
ScalarGrid spatial_gradient_adjoint(const ScalarGrid& cotangent, int axis);
VectorGrid spatial_gradient_adjoint(const VectorGrid& cotangent, int axis);

// Per-voxel determinant of d(psi)/dx with psi(x) = x + u(x).
ScalarGrid jacobian_determinants(const VectorGrid& displacement);

// Fraction of voxels with negative Jacobian determinant, in [0, 1].
double fold_percentage(const VectorGrid& displacement);

// Per-channel moving average over a window^d neighborhood, stride 1,
// reflect-padded (mirror about the edge sample, edge not repeated).
// Window must be odd and positive.
VectorGrid box_smooth(const VectorGrid& field, int window);

// Adjoint of box_smooth (the smoothing matrix is not symmetric under
// reflect padding).
VectorGrid box_smooth_adjoint(const VectorGrid& cotangent, int window);

namespace detail {

// Mirror index into [0, n), period 2(n-1), edge sample not repeated.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

// Multilinear sample of one channel at point p (d components, already
// finite). Clamps to the lattice. If grad != nullptr, writes the d
// derivatives w.r.t. p (zero along clamped axes).
double interp_channel(std::span<const double> data, const Dims& dims,
                      const std::vector<std::size_t>& strides, int channels, int channel,
                      std::span<const double> p, double* grad);

// Corner voxels and weights of the multilinear stencil at p (clamped).
// Returns the corner count (2^d). flat[] holds voxel indices (without the
// channel factor).
struct Stencil {
    int corners = 0;
    std::size_t flat[8];
    double w[8];
};
Stencil interp_stencil(const Dims& dims, const std::vector<std::size_t>& strides,
                       std::span<const double> p);

}  // namespace detail

}  // namespace flowreg
