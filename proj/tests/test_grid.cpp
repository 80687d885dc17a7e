#include <doctest.h>

#include <cmath>

#include "flowreg/grid.hpp"
#include "oracles.hpp"
#include "test_common.hpp"

using namespace flowreg;
using namespace testutil;

TEST_SUITE("grid") {

TEST_CASE("sample_linear reproduces lattice values") {
    ScalarGrid g = random_scalar({4, 5}, 11);
    VoxelCloud q;
    q.dims = {1, 2};
    q.channels = 2;
    q.positions = {2.0, 3.0, 0.0, 0.0};
    const ScalarGrid out = sample_linear(g, q);
    const int idx23[] = {2, 3};
    CHECK(out.data[0] == g.at(idx23));
    const int idx00[] = {0, 0};
    CHECK(out.data[1] == g.at(idx00));
}

TEST_CASE("sample_linear midpoint of 0 and 1 is 0.5") {
    ScalarGrid g({2, 2});
    g.data = {0.0, 0.0, 1.0, 1.0};  // varies along axis 0
    VoxelCloud q;
    q.dims = {1, 1};
    q.channels = 2;
    q.positions = {0.5, 0.0};
    CHECK(sample_linear(g, q).data[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("sample_linear clamps out-of-bounds queries") {
    ScalarGrid g = random_scalar({4, 4}, 3);
    VoxelCloud q;
    q.dims = {1, 1};
    q.channels = 2;
    q.positions = {-5.0, -5.0};
    const int origin[] = {0, 0};
    CHECK(sample_linear(g, q).data[0] == g.at(origin));
}

TEST_CASE("sample_linear rejects non-finite coordinates naming the voxel") {
    ScalarGrid g = random_scalar({4, 4}, 3);
    VoxelCloud q;
    q.dims = {1, 2};
    q.channels = 2;
    q.positions = {1.0, 1.0, std::nan(""), 0.0};
    CHECK_THROWS_WITH_AS(sample_linear(g, q), doctest::Contains("voxel index 1"),
                         std::invalid_argument);
}

TEST_CASE("sample_linear is exact on affine fields") {
    // f(x) = 0.7 x0 - 1.3 x1 + 2.0
    ScalarGrid g({6, 7});
    const VoxelCloud id = identity_cloud(g.dims);
    for (std::size_t v = 0; v < g.size(); ++v)
        g.data[v] = 0.7 * id.positions[v * 2] - 1.3 * id.positions[v * 2 + 1] + 2.0;
    std::mt19937_64 gen(17);
    VoxelCloud q;
    q.dims = {1, 20};
    q.channels = 2;
    for (int i = 0; i < 20; ++i) {
        q.positions.push_back(uniform01(gen) * 5.0);
        q.positions.push_back(uniform01(gen) * 6.0);
    }
    const ScalarGrid out = sample_linear(g, q);
    for (int i = 0; i < 20; ++i) {
        const double want = 0.7 * q.positions[i * 2] - 1.3 * q.positions[i * 2 + 1] + 2.0;
        CHECK(out.data[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sample_linear on a VectorGrid interpolates every channel") {
    const VectorGrid f = random_vector({5, 4}, 13, 2.0);
    VoxelCloud q;
    q.dims = {1, 2};
    q.channels = 2;
    q.positions = {3.0, 2.0, -9.0, 99.0};  // one lattice point, one far out of bounds
    const VectorGrid out = sample_linear(f, q);
    const auto strides = row_major_strides(f.dims);
    const std::size_t node = 3 * strides[0] + 2 * strides[1];
    CHECK(out.data[0] == f.data[node * 2 + 0]);
    CHECK(out.data[1] == f.data[node * 2 + 1]);
    const std::size_t corner = 0 * strides[0] + 3 * strides[1];  // clamped to (0, 3)
    CHECK(out.data[2] == f.data[corner * 2 + 0]);
    CHECK(out.data[3] == f.data[corner * 2 + 1]);
}

TEST_CASE("warp_image with zero displacement is the identity, bit-exact") {
    const ScalarGrid img = random_scalar({9, 8}, 5);
    const VectorGrid zero(img.dims);
    const ScalarGrid out = warp_image(img, zero);
    CHECK(out.data == img.data);
}

TEST_CASE("warp_image by +1 voxel matches the array-shift oracle") {
    const ScalarGrid img = random_scalar({7, 6}, 23);
    VectorGrid u(img.dims);
    for (std::size_t v = 0; v < u.vox(); ++v) u.data[v * 2] = 1.0;
    const ScalarGrid warped = warp_image(img, u);
    const ScalarGrid want = oracle::shift_axis0_clamped(img, 1);
    for (std::size_t i = 0; i < warped.size(); ++i)
        CHECK(warped.data[i] == doctest::Approx(want.data[i]).epsilon(1e-14));
}

TEST_CASE("warp_image of a constant image stays constant") {
    ScalarGrid img({5, 5}, 0.42);
    const VectorGrid u = random_vector(img.dims, 9, 30.0);
    const ScalarGrid out = warp_image(img, u);
    for (double v : out.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-15));
}

TEST_CASE("warp_image rejects dims mismatch") {
    CHECK_THROWS_AS(warp_image(ScalarGrid({4, 4}), VectorGrid({5, 4})), std::invalid_argument);
}

TEST_CASE("spatial_gradient of a constant field vanishes") {
    ScalarGrid g({4, 4, 4}, 3.3);
    for (const auto& grad : spatial_gradient(g))
        for (double v : grad.data) CHECK(v == 0.0);
}

TEST_CASE("spatial_gradient is exact on affine fields, boundaries included") {
    ScalarGrid g({5, 6});
    const VoxelCloud id = identity_cloud(g.dims);
    for (std::size_t v = 0; v < g.size(); ++v) g.data[v] = 2.0 * id.positions[v * 2];
    const auto grads = spatial_gradient(g);
    for (double v : grads[0].data) CHECK(v == doctest::Approx(2.0).epsilon(1e-14));
    for (double v : grads[1].data) CHECK(v == 0.0);
}

TEST_CASE("spatial_gradient central difference on x^2") {
    ScalarGrid g({5, 3});
    const VoxelCloud id = identity_cloud(g.dims);
    for (std::size_t v = 0; v < g.size(); ++v)
        g.data[v] = id.positions[v * 2] * id.positions[v * 2];
    const auto grads = spatial_gradient(g);
    const int at21[] = {2, 1};
    CHECK(grads[0].at(at21) == doctest::Approx(4.0).epsilon(1e-14));  // (9-1)/2
}

TEST_CASE("spatial_gradient rejects axes of length 1") {
    CHECK_THROWS_AS(spatial_gradient(ScalarGrid({1, 5})), std::invalid_argument);
}

TEST_CASE("spatial_gradient_adjoint is the transpose (dot-product identity)") {
    const Dims dims{5, 4};
    const ScalarGrid x = random_scalar(dims, 31, -1.0, 1.0);
    const ScalarGrid y = random_scalar(dims, 32, -1.0, 1.0);
    for (int axis = 0; axis < 2; ++axis) {
        const ScalarGrid dx = spatial_gradient(x)[axis];
        const ScalarGrid dty = spatial_gradient_adjoint(y, axis);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < dx.size(); ++i) lhs += dx.data[i] * y.data[i];
        for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data[i] * dty.data[i];
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("jacobian_determinants of zero displacement is 1 everywhere") {
    const VectorGrid u({4, 5, 3});
    for (double v : jacobian_determinants(u).data) CHECK(v == 1.0);
    CHECK(fold_percentage(u) == 0.0);
}

TEST_CASE("jacobian_determinants of psi = 1.5 x is 1.5^3") {
    VectorGrid u({5, 5, 5});
    const VoxelCloud id = identity_cloud(u.dims);
    for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] = 0.5 * id.positions[i];
    for (double v : jacobian_determinants(u).data)
        CHECK(v == doctest::Approx(3.375).epsilon(1e-12));
}

TEST_CASE("reflection along axis 0 gives determinant -1 and full folding") {
    VectorGrid u({6, 5});
    const VoxelCloud id = identity_cloud(u.dims);
    for (std::size_t v = 0; v < u.vox(); ++v) u.data[v * 2] = -2.0 * id.positions[v * 2];
    for (double det : jacobian_determinants(u).data)
        CHECK(det == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(fold_percentage(u) == 1.0);
}

TEST_CASE("box_smooth leaves constants unchanged and window 1 is the identity") {
    VectorGrid u({6, 6}, 0.0);
    for (std::size_t v = 0; v < u.vox(); ++v) {
        u.data[v * 2] = 0.25;
        u.data[v * 2 + 1] = -1.5;
    }
    const VectorGrid s = box_smooth(u, 5);
    for (std::size_t v = 0; v < u.vox(); ++v) {
        CHECK(s.data[v * 2] == doctest::Approx(0.25).epsilon(1e-14));
        CHECK(s.data[v * 2 + 1] == doctest::Approx(-1.5).epsilon(1e-14));
    }
    const VectorGrid r = random_vector({6, 6}, 41, 2.0);
    CHECK(box_smooth(r, 1).data == r.data);
}

TEST_CASE("box_smooth of a 3D unit impulse spreads 1/27 over the neighborhood") {
    VectorGrid u({5, 5, 5});
    const auto strides = row_major_strides(u.dims);
    const std::size_t cflat = 2 * strides[0] + 2 * strides[1] + 2 * strides[2];
    u.data[cflat * 3 + 0] = 1.0;
    const VectorGrid s = box_smooth(u, 3);
    std::size_t hits = 0;
    for (std::size_t v = 0; v < s.vox(); ++v) {
        if (s.data[v * 3] != 0.0) {
            CHECK(s.data[v * 3] == doctest::Approx(1.0 / 27.0).epsilon(1e-14));
            ++hits;
        }
        CHECK(s.data[v * 3 + 1] == 0.0);
    }
    CHECK(hits == 27);
}

TEST_CASE("box_smooth rejects even and non-positive windows") {
    const VectorGrid u({4, 4});
    CHECK_THROWS_AS(box_smooth(u, 4), std::invalid_argument);
    CHECK_THROWS_AS(box_smooth(u, 0), std::invalid_argument);
    CHECK_THROWS_AS(box_smooth(u, -3), std::invalid_argument);
}

TEST_CASE("box_smooth matches the full-window oracle") {
    const VectorGrid a = random_vector({7, 6}, 51, 1.0);
    const VectorGrid sa = box_smooth(a, 5);
    const VectorGrid oa = oracle::box_smooth(a, 5);
    for (std::size_t i = 0; i < sa.data.size(); ++i)
        CHECK(sa.data[i] == doctest::Approx(oa.data[i]).epsilon(1e-13));

    const VectorGrid b = random_vector({5, 4, 6}, 52, 1.0);
    const VectorGrid sb = box_smooth(b, 3);
    const VectorGrid ob = oracle::box_smooth(b, 3);
    for (std::size_t i = 0; i < sb.data.size(); ++i)
        CHECK(sb.data[i] == doctest::Approx(ob.data[i]).epsilon(1e-13));
}

TEST_CASE("box_smooth is linear") {
    const VectorGrid a = random_vector({6, 5}, 61, 1.0);
    const VectorGrid b = random_vector({6, 5}, 62, 1.0);
    VectorGrid combo(a.dims);
    for (std::size_t i = 0; i < combo.data.size(); ++i)
        combo.data[i] = 2.5 * a.data[i] - 0.75 * b.data[i];
    const VectorGrid lhs = box_smooth(combo, 3);
    const VectorGrid sa = box_smooth(a, 3), sb = box_smooth(b, 3);
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
        CHECK(lhs.data[i] == doctest::Approx(2.5 * sa.data[i] - 0.75 * sb.data[i]).epsilon(1e-13));
}

TEST_CASE("box_smooth_adjoint is the transpose of box_smooth") {
    const VectorGrid x = random_vector({6, 7}, 71, 1.0);
    const VectorGrid y = random_vector({6, 7}, 72, 1.0);
    const VectorGrid sx = box_smooth(x, 5);
    const VectorGrid sty = box_smooth_adjoint(y, 5);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        lhs += sx.data[i] * y.data[i];
        rhs += x.data[i] * sty.data[i];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("voxel cloud and displacement interconvert losslessly") {
    // displacements on a dyadic lattice so position arithmetic is exact
    VectorGrid u = random_vector({4, 6}, 81, 3.0);
    for (double& v : u.data) v = std::round(v * 1048576.0) / 1048576.0;
    const VoxelCloud q = cloud_from_displacement(u);
    const VectorGrid back = displacement_from_cloud(q);
    CHECK(back.data == u.data);

    const VectorGrid w = random_vector({4, 6}, 82, 3.0);
    const VectorGrid w2 = displacement_from_cloud(cloud_from_displacement(w));
    CHECK(rel_err(w.data, w2.data) < 1e-15);
}

}  // TEST_SUITE
