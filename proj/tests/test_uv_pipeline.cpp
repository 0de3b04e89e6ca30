#include "doctest.h"

#include "uvforge/model.hpp"
#include "uvforge/rng.hpp"
#include "uvforge/uv_pipeline.hpp"

#include <Eigen/LU>
#include <array>
#include <cmath>
#include <vector>

using namespace uvforge;

namespace {

struct Vec3 {
    double x, y, z;
};

Vec3 sub(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

// Brute-force visibility: per-vertex normals from summed face cross products,
// then a ray cast from the camera against every triangle. A vertex is visible
// iff it faces the camera and no intersection lies more than eps nearer.
std::vector<std::uint8_t> visibility_oracle(const Eigen::MatrixXd& vertices,
                                            const std::vector<std::array<int, 3>>& triangles,
                                            const Camera& camera, double eps) {
    const Eigen::MatrixXd cm = camera_space(vertices, camera);
    const auto n = static_cast<std::size_t>(cm.rows());
    std::vector<Vec3> pos(n), nrm(n, {0, 0, 0});
    for (std::size_t i = 0; i < n; ++i)
        pos[i] = {cm(static_cast<Eigen::Index>(i), 0), cm(static_cast<Eigen::Index>(i), 1),
                  cm(static_cast<Eigen::Index>(i), 2)};
    for (const auto& t : triangles) {
        const Vec3 fn = cross(sub(pos[t[1]], pos[t[0]]), sub(pos[t[2]], pos[t[0]]));
        for (int k = 0; k < 3; ++k) {
            nrm[t[k]].x += fn.x;
            nrm[t[k]].y += fn.y;
            nrm[t[k]].z += fn.z;
        }
    }

    std::vector<std::uint8_t> visible(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (dot(nrm[i], pos[i]) >= 0.0) continue;
        const double w_v = -pos[i].z;
        const Vec3 dir = pos[i];
        bool blocked = false;
        for (const auto& t : triangles) {
            const Vec3 a = pos[t[0]];
            const Vec3 e1 = sub(pos[t[1]], a);
            const Vec3 e2 = sub(pos[t[2]], a);
            const Vec3 pvec = cross(dir, e2);
            const double det = dot(e1, pvec);
            if (det == 0.0) continue;
            const Vec3 tvec = {-a.x, -a.y, -a.z};
            const double u = dot(tvec, pvec) / det;
            if (u < 0.0 || u > 1.0) continue;
            const Vec3 qvec = cross(tvec, e1);
            const double v = dot(dir, qvec) / det;
            if (v < 0.0 || u + v > 1.0) continue;
            const double t_hit = dot(e2, qvec) / det;
            if (t_hit > 0.0 && t_hit * w_v < w_v - eps) {
                blocked = true;
                break;
            }
        }
        visible[i] = blocked ? 0 : 1;
    }
    return visible;
}

// Triangle soup with K disjoint triangles in a unit box in front of the camera.
void random_soup(Rng& rng, int k, Eigen::MatrixXd* verts,
                 std::vector<std::array<int, 3>>* tris) {
    verts->resize(3 * k, 3);
    tris->clear();
    for (int t = 0; t < k; ++t) {
        for (int v = 0; v < 3; ++v)
            for (int c = 0; c < 3; ++c) (*verts)(3 * t + v, c) = rng.uniform(-1.0, 1.0);
        tris->push_back({3 * t, 3 * t + 1, 3 * t + 2});
    }
}

UvMap constant_uv(int size, double r, double g, double b) {
    UvMap uv(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            uv.pixels.at(y, x, 0) = r;
            uv.pixels.at(y, x, 1) = g;
            uv.pixels.at(y, x, 2) = b;
        }
    return uv;
}

} // namespace

TEST_CASE("depth rasterization: empty mesh, single triangle, degenerate count") {
    Camera cam;
    cam.focal = 32.0;
    cam.cx = 32.0;
    cam.cy = 32.0;

    const std::vector<std::array<int, 3>> no_tris;
    const Eigen::MatrixXd no_verts(0, 3);
    DepthBuffer empty = rasterize_depth(no_verts, no_tris, cam, 64, 64);
    for (double d : empty.depth) CHECK(std::isinf(d));

    Eigen::MatrixXd verts(3, 3);
    verts << 0.0, 0.0, -2.0, 2.0, 0.0, -4.0, 0.0, 2.0, -3.0;
    const std::vector<std::array<int, 3>> tris = {{0, 1, 2}};
    DepthBuffer db = rasterize_depth(verts, tris, cam, 64, 64);
    CHECK(db.degenerate_triangles == 0);

    // Plane through the three vertices: 2x + y + 2z = -4. A pixel ray
    // (dx, dy, -1) hits it at w = 4 / (2 - 2 dx - dy), which the
    // perspective-correct interpolation must reproduce.
    int covered = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            if (std::isinf(db.at(y, x))) continue;
            ++covered;
            const double dx = (x - cam.cx) / cam.focal;
            const double dy = (y - cam.cy) / cam.focal;
            const double expected = 4.0 / (2.0 - 2.0 * dx - dy);
            CHECK(db.at(y, x) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    CHECK(covered > 20);

    // A zero-area triangle is skipped and counted.
    Eigen::MatrixXd degen(3, 3);
    degen << 0.0, 0.0, -2.0, 1.0, 1.0, -2.0, 2.0, 2.0, -2.0;
    DepthBuffer db2 = rasterize_depth(degen, tris, cam, 64, 64);
    CHECK(db2.degenerate_triangles == 1);
    for (double d : db2.depth) CHECK(std::isinf(d));
}

TEST_CASE("depth rasterization keeps the nearer of two stacked triangles") {
    Camera cam;
    cam.focal = 50.0;
    cam.cx = 32.0;
    cam.cy = 32.0;
    Eigen::MatrixXd verts(6, 3);
    verts << -2.0, -2.0, -3.0, 2.0, -2.0, -3.0, 0.0, 2.0, -3.0, // far, large
        -1.0, -1.0, -2.0, 1.0, -1.0, -2.0, 0.0, 1.0, -2.0;      // near, small
    const std::vector<std::array<int, 3>> tris = {{0, 1, 2}, {3, 4, 5}};
    DepthBuffer db = rasterize_depth(verts, tris, cam, 64, 64);

    // Both triangles are constant-depth; the buffer must hold 2 wherever the
    // near one covers and 3 only on the far one's uncovered fringe.
    int near_pixels = 0, far_pixels = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            const double d = db.at(y, x);
            if (std::isinf(d)) continue;
            if (std::abs(d - 2.0) < 1e-12) ++near_pixels;
            else if (std::abs(d - 3.0) < 1e-12) ++far_pixels;
            else FAIL("unexpected depth value ", d);
        }
    }
    CHECK(near_pixels > 100);
    CHECK(far_pixels > 100);

    // Everywhere the near footprint covers, the buffer holds the nearer depth.
    DepthBuffer near_only = rasterize_depth(verts.bottomRows(3), {{0, 1, 2}}, cam, 64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if (!std::isinf(near_only.at(y, x))) CHECK(db.at(y, x) == near_only.at(y, x));
}

TEST_CASE("single triangle: all three vertices visible") {
    Camera cam;
    cam.focal = 50.0;
    cam.cx = 32.0;
    cam.cy = 32.0;
    Eigen::MatrixXd verts(3, 3);
    verts << -1.0, -1.0, -3.0, 1.0, -1.0, -3.0, 0.0, 1.0, -2.5;
    const std::vector<std::array<int, 3>> tris = {{0, 1, 2}};
    // Normal may point either way for a lone triangle; pick the winding that
    // faces the camera.
    const auto vis = visible_vertices(verts, tris, cam, 1e-4);
    const auto vis_flipped =
        visible_vertices(verts, {{0, 2, 1}}, cam, 1e-4);
    const int total = static_cast<int>(vis[0] + vis[1] + vis[2]);
    const int total_flipped = static_cast<int>(vis_flipped[0] + vis_flipped[1] + vis_flipped[2]);
    CHECK(std::max(total, total_flipped) == 3);
    CHECK(std::min(total, total_flipped) == 0);
}

TEST_CASE("vertex visibility matches the ray-cast oracle on random soups") {
    Rng rng(2024);
    for (int trial = 0; trial < 8; ++trial) {
        Eigen::MatrixXd verts;
        std::vector<std::array<int, 3>> tris;
        random_soup(rng, 60, &verts, &tris);
        const double eps = visibility_eps(verts);
        for (double yaw_deg : {-50.0, 0.0, 35.0}) {
            Camera cam = default_camera(128, 128);
            cam.yaw = yaw_deg * 3.14159265358979323846 / 180.0;
            const auto lib = visible_vertices(verts, tris, cam, eps);
            const auto oracle = visibility_oracle(verts, tris, cam, eps);
            REQUIRE(lib.size() == oracle.size());
            for (std::size_t i = 0; i < lib.size(); ++i) CHECK(lib[i] == oracle[i]);
        }
    }
}

TEST_CASE("vertex visibility matches the ray-cast oracle on face meshes") {
    for (std::uint64_t seed : {5ULL, 6ULL}) {
        const auto model = make_synthetic_model(seed, 150, 4, 4);
        const Eigen::MatrixXd verts =
            instantiate_shape(model, Eigen::VectorXd::Zero(model.num_shape_modes()));
        const double eps = visibility_eps(verts);
        for (double yaw_deg : {0.0, 45.0, 90.0}) {
            Camera cam = default_camera(128, 128);
            cam.yaw = yaw_deg * 3.14159265358979323846 / 180.0;
            const auto lib = visible_vertices(verts, model.triangles, cam, eps);
            const auto oracle = visibility_oracle(verts, model.triangles, cam, eps);
            for (std::size_t i = 0; i < lib.size(); ++i) CHECK(lib[i] == oracle[i]);
        }
    }
}

TEST_CASE("frontal face: nose visible, profile hides the far cheek") {
    const auto model = make_synthetic_model(11, 500, 6, 6);
    const Eigen::MatrixXd verts =
        instantiate_shape(model, Eigen::VectorXd::Zero(model.num_shape_modes()));
    const double eps = visibility_eps(verts);

    Camera cam = default_camera(128, 128);
    const auto frontal = visible_vertices(verts, model.triangles, cam, eps);
    const int nose = model.landmark_indices[4];
    CHECK(frontal[static_cast<std::size_t>(nose)] == 1);
    // The sweeps extend past 90 degrees, so the flanks and pole bands face
    // away frontally and just under half the vertices are visible.
    const double frontal_visible =
        std::count(frontal.begin(), frontal.end(), std::uint8_t(1)) /
        static_cast<double>(frontal.size());
    CHECK(frontal_visible > 0.4);

    cam.yaw = 0.5 * 3.14159265358979323846;
    const auto profile = visible_vertices(verts, model.triangles, cam, eps);
    const double profile_visible =
        std::count(profile.begin(), profile.end(), std::uint8_t(1)) /
        static_cast<double>(profile.size());
    CHECK(profile_visible < frontal_visible - 0.08);
}

TEST_CASE("extract_uv: constant image fills visible texels, black stays black") {
    const auto model = make_synthetic_model(3, 500, 6, 6);
    FitParams params;
    params.p = Eigen::VectorXd::Zero(model.num_shape_modes());
    params.lambda = Eigen::VectorXd::Zero(model.num_texture_modes());
    params.camera = default_camera(128, 128);

    Image gray(128, 128, 3, 0.42);
    UvMap uv;
    VisibilityMask mask;
    extract_uv(gray, model, params, 32, &uv, &mask);
    int visible = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            if (mask.at(y, x)) {
                ++visible;
                for (int c = 0; c < 3; ++c) CHECK(uv.pixels.at(y, x, c) == doctest::Approx(0.42));
            } else {
                for (int c = 0; c < 3; ++c) CHECK(uv.pixels.at(y, x, c) == 0.0);
            }
        }
    CHECK(visible > 300);

    Image black(128, 128, 3, 0.0);
    extract_uv(black, model, params, 32, &uv, &mask);
    for (std::size_t i = 0; i < uv.pixels.data.size(); ++i) CHECK(uv.pixels.data[i] == 0.0);
}

TEST_CASE("extract_uv mask fraction grows from frontal to profile") {
    const auto model = make_synthetic_model(3, 500, 6, 6);
    FitParams params;
    params.p = Eigen::VectorXd::Zero(model.num_shape_modes());
    params.lambda = Eigen::VectorXd::Zero(model.num_texture_modes());
    Image gray(128, 128, 3, 0.5);

    std::vector<double> fractions;
    for (double yaw_deg : {0.0, 45.0, 90.0}) {
        params.camera = default_camera(128, 128);
        params.camera.yaw = yaw_deg * 3.14159265358979323846 / 180.0;
        UvMap uv;
        VisibilityMask mask;
        extract_uv(gray, model, params, 64, &uv, &mask);
        fractions.push_back(mask_fraction(mask));
    }
    CHECK(fractions[0] < fractions[1]);
    CHECK(fractions[1] < fractions[2]);
    CHECK(fractions[2] >= 0.40);
}

TEST_CASE("mask_fraction counts missing texels") {
    VisibilityMask all(8, 8);
    for (auto& v : all.visible) v = 1;
    CHECK(mask_fraction(all) == 0.0);
    for (int x = 0; x < 8; ++x)
        for (int y = 0; y < 4; ++y) all.at(y, x) = 0;
    CHECK(mask_fraction(all) == 0.5);
}

TEST_CASE("generator input: noise fill, mirror channels, determinism") {
    Rng rng(17);
    UvMap uv(16, 16);
    VisibilityMask mask(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            for (int c = 0; c < 3; ++c) uv.pixels.at(y, x, c) = rng.uniform();
            mask.at(y, x) = rng.uniform() < 0.6 ? 1 : 0;
        }

    const Image in1 = make_generator_input(uv, mask, 99);
    const Image in2 = make_generator_input(uv, mask, 99);
    CHECK(in1.data == in2.data);
    const Image in3 = make_generator_input(uv, mask, 100);
    CHECK(in1.data != in3.data);

    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            if (mask.at(y, x))
                for (int c = 0; c < 3; ++c) CHECK(in1.at(y, x, c) == uv.pixels.at(y, x, c));
            for (int c = 0; c < 3; ++c) CHECK(in1.at(y, x, 3 + c) == in1.at(y, 15 - x, c));
        }

    VisibilityMask full(16, 16);
    for (auto& v : full.visible) v = 1;
    const Image complete = make_generator_input(uv, full, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) CHECK(complete.at(y, x, c) == uv.pixels.at(y, x, c));
}

TEST_CASE("generator input halves swap equals a horizontal mirror of the whole") {
    Rng rng(31);
    UvMap uv(16, 16);
    VisibilityMask mask(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            for (int c = 0; c < 3; ++c) uv.pixels.at(y, x, c) = rng.uniform();
            mask.at(y, x) = rng.uniform() < 0.5 ? 1 : 0;
        }
    const Image in = make_generator_input(uv, mask, 7);
    // Swapping the halves at (y, x) must equal reading the whole input
    // mirrored: channel c+3 here is channel c at the mirrored column and
    // vice versa.
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) {
                CHECK(in.at(y, x, 3 + c) == in.at(y, 15 - x, c));
                CHECK(in.at(y, x, c) == in.at(y, 15 - x, 3 + c));
            }
}

TEST_CASE("central crop: identity, ratio half, nested crops") {
    Rng rng(13);
    Image img(64, 64, 3);
    for (auto& v : img.data) v = rng.uniform();

    const Image same = central_crop(img, 1.0);
    CHECK(same.data == img.data);

    const Image half = central_crop(img, 0.5);
    CHECK(half.width == 32);
    CHECK(half.height == 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) CHECK(half.at(y, x, c) == img.at(16 + y, 16 + x, c));

    const Image nested = central_crop(half, 0.5);
    const Image quarter = central_crop(img, 0.25);
    CHECK(nested.data == quarter.data);

    CHECK_THROWS_AS(central_crop(img, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(central_crop(img, 1.5), std::invalid_argument);
}

TEST_CASE("poisson blend: harmonic interior from a constant boundary") {
    const int s = 24;
    UvMap source = constant_uv(s, 0.3, 0.3, 0.3); // zero gradients
    UvMap target = constant_uv(s, 0.8, 0.6, 0.4);
    VisibilityMask region(s, s);
    for (int y = 5; y < 19; ++y)
        for (int x = 4; x < 20; ++x) region.at(y, x) = 1;

    const UvMap out = poisson_blend(source, target, region);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            CHECK(out.pixels.at(y, x, 0) == doctest::Approx(0.8).epsilon(1e-6));
            CHECK(out.pixels.at(y, x, 1) == doctest::Approx(0.6).epsilon(1e-6));
            CHECK(out.pixels.at(y, x, 2) == doctest::Approx(0.4).epsilon(1e-6));
        }
}

TEST_CASE("poisson blend: source equal to target is a fixed point") {
    Rng rng(41);
    const int s = 20;
    UvMap img(s, s);
    for (auto& v : img.pixels.data) v = rng.uniform();
    VisibilityMask region(s, s);
    for (int y = 3; y < 17; ++y)
        for (int x = 3; x < 17; ++x) region.at(y, x) = 1;

    const UvMap out = poisson_blend(img, img, region);
    for (std::size_t i = 0; i < out.pixels.data.size(); ++i)
        CHECK(out.pixels.data[i] == doctest::Approx(img.pixels.data[i]).epsilon(1e-8));
}

TEST_CASE("poisson blend: empty region returns target, border region rejected") {
    const int s = 12;
    UvMap source = constant_uv(s, 0.1, 0.2, 0.3);
    UvMap target = constant_uv(s, 0.9, 0.8, 0.7);
    VisibilityMask empty(s, s);
    const UvMap out = poisson_blend(source, target, empty);
    CHECK(out.pixels.data == target.pixels.data);

    VisibilityMask border(s, s);
    border.at(0, 3) = 1;
    CHECK_THROWS_AS(poisson_blend(source, target, border), std::invalid_argument);
}

TEST_CASE("poisson blend matches a dense linear solve on a 16x16 region") {
    Rng rng(71);
    const int s = 24;
    UvMap source(s, s), target(s, s);
    for (auto& v : source.pixels.data) v = rng.uniform();
    for (auto& v : target.pixels.data) v = rng.uniform();
    VisibilityMask region(s, s);
    for (int y = 4; y < 20; ++y)
        for (int x = 4; x < 20; ++x) region.at(y, x) = 1;

    const UvMap out = poisson_blend(source, target, region);

    // Dense oracle: assemble the full Laplacian system and solve with LU.
    std::vector<int> idx(static_cast<std::size_t>(s) * s, -1);
    std::vector<std::array<int, 2>> cells;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            if (region.at(y, x)) {
                idx[static_cast<std::size_t>(y) * s + x] = static_cast<int>(cells.size());
                cells.push_back({x, y});
            }
    const int n = static_cast<int>(cells.size());
    REQUIRE(n == 256);
    const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    for (int c = 0; c < 3; ++c) {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i) {
            const int px = cells[static_cast<std::size_t>(i)][0];
            const int py = cells[static_cast<std::size_t>(i)][1];
            a(i, i) = 4.0;
            b[i] = 4.0 * source.pixels.at(py, px, c);
            for (int k = 0; k < 4; ++k) {
                const int qx = px + dx[k], qy = py + dy[k];
                b[i] -= source.pixels.at(qy, qx, c);
                const int j = idx[static_cast<std::size_t>(qy) * s + qx];
                if (j >= 0) a(i, j) = -1.0;
                else b[i] += target.pixels.at(qy, qx, c);
            }
        }
        const Eigen::VectorXd x = a.fullPivLu().solve(b);
        for (int i = 0; i < n; ++i) {
            const int px = cells[static_cast<std::size_t>(i)][0];
            const int py = cells[static_cast<std::size_t>(i)][1];
            CHECK(std::abs(out.pixels.at(py, px, c) - x[i]) < 1e-6);
        }
    }
}

TEST_CASE("poisson blend output satisfies the discrete equation") {
    Rng rng(87);
    const int s = 32;
    UvMap source(s, s), target(s, s);
    for (auto& v : source.pixels.data) v = rng.uniform();
    for (auto& v : target.pixels.data) v = rng.uniform();
    VisibilityMask region(s, s);
    for (int y = 2; y < 30; ++y)
        for (int x = 3; x < 29; ++x)
            if ((x - 16) * (x - 16) + (y - 16) * (y - 16) < 170) region.at(y, x) = 1;

    const UvMap out = poisson_blend(source, target, region);
    const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    double max_resid = 0.0;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            if (!region.at(y, x)) continue;
            for (int c = 0; c < 3; ++c) {
                double lhs = 4.0 * out.pixels.at(y, x, c);
                double rhs = 4.0 * source.pixels.at(y, x, c);
                for (int k = 0; k < 4; ++k) {
                    lhs -= out.pixels.at(y + dy[k], x + dx[k], c);
                    rhs -= source.pixels.at(y + dy[k], x + dx[k], c);
                }
                max_resid = std::max(max_resid, std::abs(lhs - rhs));
            }
        }
    CHECK(max_resid < 1e-6);
}
