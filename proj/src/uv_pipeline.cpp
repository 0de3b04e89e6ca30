#include "uvforge/uv_pipeline.hpp"

#include "uvforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uvforge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct ProjectedMesh {
    Eigen::MatrixXd points; // N x 2 pixel coordinates
    std::vector<double> w;  // N camera-space distances (-z')
};

ProjectedMesh project_mesh(const Eigen::MatrixXd& vertices, const Camera& camera) {
    ProjectedMesh out;
    const Eigen::MatrixXd cam = camera_space(vertices, camera);
    out.points.resize(cam.rows(), 2);
    out.w.resize(static_cast<std::size_t>(cam.rows()));
    for (Eigen::Index i = 0; i < cam.rows(); ++i) {
        const double z = cam(i, 2);
        if (z >= -1e-8) throw projection_error("rasterize: vertex at or behind camera plane");
        const double w = -z;
        out.points(i, 0) = camera.cx + camera.focal * (cam(i, 0) / w);
        out.points(i, 1) = camera.cy + camera.focal * (cam(i, 1) / w);
        out.w[static_cast<std::size_t>(i)] = w;
    }
    return out;
}

// Uniform-grid spatial index over a fixed set of 2D points.
struct SampleBins {
    double min_x = 0, min_y = 0, inv_cell = 0;
    int grid = 0;
    std::vector<std::vector<int>> cells;

    explicit SampleBins(const Eigen::MatrixXd& pts) {
        const int k = static_cast<int>(pts.rows());
        grid = std::clamp(static_cast<int>(std::ceil(std::sqrt(static_cast<double>(k)))), 1, 1024);
        min_x = pts.col(0).minCoeff();
        min_y = pts.col(1).minCoeff();
        const double span = std::max({pts.col(0).maxCoeff() - min_x,
                                      pts.col(1).maxCoeff() - min_y, 1e-12});
        inv_cell = grid / (span * (1.0 + 1e-12));
        cells.resize(static_cast<std::size_t>(grid) * grid);
        for (int i = 0; i < k; ++i)
            cells[cell_index(pts(i, 0), pts(i, 1))].push_back(i);
    }

    int clamp_cell(double v) const {
        return std::clamp(static_cast<int>(v), 0, grid - 1);
    }
    std::size_t cell_index(double x, double y) const {
        return static_cast<std::size_t>(clamp_cell((y - min_y) * inv_cell)) * grid +
               clamp_cell((x - min_x) * inv_cell);
    }
};

} // namespace

double visibility_eps(const Eigen::MatrixXd& vertices) {
    const Eigen::Vector3d lo = vertices.colwise().minCoeff();
    const Eigen::Vector3d hi = vertices.colwise().maxCoeff();
    return 1e-4 * (hi - lo).norm();
}

RasterSurface rasterize_surface(const Eigen::MatrixXd& vertices,
                                const std::vector<std::array<int, 3>>& triangles,
                                const Camera& camera, int width, int height) {
    RasterSurface surf;
    surf.depth = DepthBuffer(width, height);
    surf.triangle.assign(static_cast<std::size_t>(width) * height, -1);
    surf.bary.assign(static_cast<std::size_t>(width) * height, {0.0, 0.0, 0.0});
    const ProjectedMesh pm = project_mesh(vertices, camera);

    for (std::size_t t = 0; t < triangles.size(); ++t) {
        int i0 = triangles[t][0], i1 = triangles[t][1], i2 = triangles[t][2];
        double area = orient2d(pm.points(i0, 0), pm.points(i0, 1), pm.points(i1, 0),
                               pm.points(i1, 1), pm.points(i2, 0), pm.points(i2, 1));
        bool swapped = false;
        if (area == 0.0) {
            ++surf.depth.degenerate_triangles;
            continue;
        }
        if (area < 0.0) {
            std::swap(i1, i2);
            area = -area;
            swapped = true;
        }
        const double ax = pm.points(i0, 0), ay = pm.points(i0, 1);
        const double bx = pm.points(i1, 0), by = pm.points(i1, 1);
        const double cx = pm.points(i2, 0), cy = pm.points(i2, 1);
        const double inv_w0 = 1.0 / pm.w[static_cast<std::size_t>(i0)];
        const double inv_w1 = 1.0 / pm.w[static_cast<std::size_t>(i1)];
        const double inv_w2 = 1.0 / pm.w[static_cast<std::size_t>(i2)];
        const bool tl0 = is_top_left_edge(bx, by, cx, cy);
        const bool tl1 = is_top_left_edge(cx, cy, ax, ay);
        const bool tl2 = is_top_left_edge(ax, ay, bx, by);

        const int x_lo = std::max(0, static_cast<int>(std::ceil(std::min({ax, bx, cx}))));
        const int x_hi = std::min(width - 1, static_cast<int>(std::floor(std::max({ax, bx, cx}))));
        const int y_lo = std::max(0, static_cast<int>(std::ceil(std::min({ay, by, cy}))));
        const int y_hi = std::min(height - 1, static_cast<int>(std::floor(std::max({ay, by, cy}))));
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double px = x, py = y;
                const double w0 = orient2d(bx, by, cx, cy, px, py);
                const double w1 = orient2d(cx, cy, ax, ay, px, py);
                const double w2 = orient2d(ax, ay, bx, by, px, py);
                const bool in0 = w0 > 0.0 || (w0 == 0.0 && tl0);
                const bool in1 = w1 > 0.0 || (w1 == 0.0 && tl1);
                const bool in2 = w2 > 0.0 || (w2 == 0.0 && tl2);
                if (!(in0 && in1 && in2)) continue;
                const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
                const double inv_w = b0 * inv_w0 + b1 * inv_w1 + b2 * inv_w2;
                const double d = 1.0 / inv_w;
                const std::size_t px_idx = static_cast<std::size_t>(y) * width + x;
                if (d < surf.depth.depth[px_idx]) {
                    surf.depth.depth[px_idx] = d;
                    surf.triangle[px_idx] = static_cast<int>(t);
                    const double p0 = b0 * inv_w0 / inv_w;
                    const double p1 = b1 * inv_w1 / inv_w;
                    const double p2 = b2 * inv_w2 / inv_w;
                    surf.bary[px_idx] = swapped ? std::array<double, 3>{p0, p2, p1}
                                                : std::array<double, 3>{p0, p1, p2};
                }
            }
        }
    }
    return surf;
}

DepthBuffer rasterize_depth(const Eigen::MatrixXd& vertices,
                            const std::vector<std::array<int, 3>>& triangles,
                            const Camera& camera, int width, int height) {
    return rasterize_surface(vertices, triangles, camera, width, height).depth;
}

std::vector<double> min_depth_at_samples(const Eigen::MatrixXd& projected,
                                         const std::vector<double>& depths,
                                         const std::vector<std::array<int, 3>>& triangles,
                                         const Eigen::MatrixXd& sample_points) {
    std::vector<double> min_depth(static_cast<std::size_t>(sample_points.rows()), kInf);
    if (sample_points.rows() == 0) return min_depth;
    const SampleBins bins(sample_points);

    for (const auto& tri : triangles) {
        int i0 = tri[0], i1 = tri[1], i2 = tri[2];
        double area = orient2d(projected(i0, 0), projected(i0, 1), projected(i1, 0),
                               projected(i1, 1), projected(i2, 0), projected(i2, 1));
        if (area == 0.0) continue;
        if (area < 0.0) {
            std::swap(i1, i2);
            area = -area;
        }
        const double ax = projected(i0, 0), ay = projected(i0, 1);
        const double bx = projected(i1, 0), by = projected(i1, 1);
        const double cx = projected(i2, 0), cy = projected(i2, 1);
        const double inv_w0 = 1.0 / depths[static_cast<std::size_t>(i0)];
        const double inv_w1 = 1.0 / depths[static_cast<std::size_t>(i1)];
        const double inv_w2 = 1.0 / depths[static_cast<std::size_t>(i2)];

        const int cx_lo = bins.clamp_cell((std::min({ax, bx, cx}) - bins.min_x) * bins.inv_cell);
        const int cx_hi = bins.clamp_cell((std::max({ax, bx, cx}) - bins.min_x) * bins.inv_cell);
        const int cy_lo = bins.clamp_cell((std::min({ay, by, cy}) - bins.min_y) * bins.inv_cell);
        const int cy_hi = bins.clamp_cell((std::max({ay, by, cy}) - bins.min_y) * bins.inv_cell);
        for (int gy = cy_lo; gy <= cy_hi; ++gy) {
            for (int gx = cx_lo; gx <= cx_hi; ++gx) {
                for (int s : bins.cells[static_cast<std::size_t>(gy) * bins.grid + gx]) {
                    const double px = sample_points(s, 0), py = sample_points(s, 1);
                    const double w0 = orient2d(bx, by, cx, cy, px, py);
                    const double w1 = orient2d(cx, cy, ax, ay, px, py);
                    const double w2 = orient2d(ax, ay, bx, by, px, py);
                    if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
                    const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
                    const double d = 1.0 / (b0 * inv_w0 + b1 * inv_w1 + b2 * inv_w2);
                    auto& slot = min_depth[static_cast<std::size_t>(s)];
                    slot = std::min(slot, d);
                }
            }
        }
    }
    return min_depth;
}

std::vector<std::uint8_t> visible_vertices(const Eigen::MatrixXd& vertices,
                                           const std::vector<std::array<int, 3>>& triangles,
                                           const Camera& camera, double eps) {
    const auto n = vertices.rows();
    const Eigen::MatrixXd cam = camera_space(vertices, camera);
    const ProjectedMesh pm = project_mesh(vertices, camera);

    // Area-weighted vertex normals in camera space: unnormalized face cross
    // products summed over incident triangles.
    Eigen::MatrixXd normals = Eigen::MatrixXd::Zero(n, 3);
    for (const auto& t : triangles) {
        const Eigen::Vector3d a = cam.row(t[0]);
        const Eigen::Vector3d e1 = Eigen::Vector3d(cam.row(t[1])) - a;
        const Eigen::Vector3d e2 = Eigen::Vector3d(cam.row(t[2])) - a;
        const Eigen::Vector3d fn = e1.cross(e2);
        for (int k = 0; k < 3; ++k) normals.row(t[k]) += fn.transpose();
    }

    const std::vector<double> occ = min_depth_at_samples(pm.points, pm.w, triangles, pm.points);
    std::vector<std::uint8_t> visible(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double facing = normals.row(i).dot(cam.row(i));
        if (facing >= 0.0) continue;
        const std::size_t idx = static_cast<std::size_t>(i);
        visible[idx] = pm.w[idx] <= occ[idx] + eps ? 1 : 0;
    }
    return visible;
}

namespace {

// A texel center covered by a UV-space triangle, with barycentric weights in
// positive-orientation vertex order i0, i1, i2.
struct UvTexel {
    int x, y, tri;
    int i0, i1, i2;
    double b0, b1, b2;
};

// UV-space rasterization over texel centers: texel (x, y) sits at
// uv = (x/(w-1), y/(h-1)), matching bilinear texture addressing.
std::vector<UvTexel> uv_coverage(const MorphableModel& model, int w, int h) {
    std::vector<UvTexel> covered;
    const double sx = w - 1.0, sy = h - 1.0;
    for (std::size_t t = 0; t < model.triangles.size(); ++t) {
        const auto& tri = model.triangles[t];
        int i0 = tri[0], i1 = tri[1], i2 = tri[2];
        const double ax = model.uv_coords[i0][0] * sx, ay = model.uv_coords[i0][1] * sy;
        double bx = model.uv_coords[i1][0] * sx, by = model.uv_coords[i1][1] * sy;
        double cx = model.uv_coords[i2][0] * sx, cy = model.uv_coords[i2][1] * sy;
        double area = orient2d(ax, ay, bx, by, cx, cy);
        if (area == 0.0) continue;
        if (area < 0.0) {
            std::swap(i1, i2);
            std::swap(bx, cx);
            std::swap(by, cy);
            area = -area;
        }
        const int x_lo = std::max(0, static_cast<int>(std::ceil(std::min({ax, bx, cx}))));
        const int x_hi = std::min(w - 1, static_cast<int>(std::floor(std::max({ax, bx, cx}))));
        const int y_lo = std::max(0, static_cast<int>(std::ceil(std::min({ay, by, cy}))));
        const int y_hi = std::min(h - 1, static_cast<int>(std::floor(std::max({ay, by, cy}))));
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double w0 = orient2d(bx, by, cx, cy, x, y);
                const double w1 = orient2d(cx, cy, ax, ay, x, y);
                const double w2 = orient2d(ax, ay, bx, by, x, y);
                if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
                covered.push_back({x, y, static_cast<int>(t), i0, i1, i2, w0 / area, w1 / area,
                                   w2 / area});
            }
        }
    }
    return covered;
}

} // namespace

void extract_uv(const Image& image, const MorphableModel& model, const FitParams& params,
                int uv_size, UvMap* uv, VisibilityMask* mask) {
    if (uv_size < 2) throw std::invalid_argument("extract_uv: uv_size too small");
    const int w = uv_size, h = uv_size;
    *uv = UvMap(w, h);
    *mask = VisibilityMask(w, h);

    const Eigen::MatrixXd shape = instantiate_shape(model, params.p);
    const Eigen::MatrixXd cam = camera_space(shape, params.camera);
    const ProjectedMesh pm = project_mesh(shape, params.camera);
    const double eps = visibility_eps(shape);

    const std::vector<UvTexel> covered = uv_coverage(model, w, h);

    // Surface points of covered texels, projected into the image.
    Eigen::MatrixXd samples(static_cast<Eigen::Index>(covered.size()), 2);
    std::vector<double> sample_w(covered.size());
    std::vector<Eigen::Vector3d> sample_cam(covered.size());
    for (std::size_t s = 0; s < covered.size(); ++s) {
        const auto& tex = covered[s];
        const Eigen::Vector3d pos = tex.b0 * Eigen::Vector3d(cam.row(tex.i0)) +
                                    tex.b1 * Eigen::Vector3d(cam.row(tex.i1)) +
                                    tex.b2 * Eigen::Vector3d(cam.row(tex.i2));
        sample_cam[s] = pos;
        sample_w[s] = -pos.z();
        const double inv_w = 1.0 / sample_w[s];
        samples(static_cast<Eigen::Index>(s), 0) =
            params.camera.cx + params.camera.focal * (pos.x() * inv_w);
        samples(static_cast<Eigen::Index>(s), 1) =
            params.camera.cy + params.camera.focal * (pos.y() * inv_w);
    }

    const std::vector<double> occ = min_depth_at_samples(pm.points, pm.w, model.triangles, samples);

    std::vector<double> color(3);
    for (std::size_t s = 0; s < covered.size(); ++s) {
        const auto& tex = covered[s];
        if (sample_w[s] <= 0.0) continue;
        const auto& tri = model.triangles[static_cast<std::size_t>(tex.tri)];
        const Eigen::Vector3d a = cam.row(tri[0]);
        const Eigen::Vector3d e1 = Eigen::Vector3d(cam.row(tri[1])) - a;
        const Eigen::Vector3d e2 = Eigen::Vector3d(cam.row(tri[2])) - a;
        if (e1.cross(e2).dot(sample_cam[s]) >= 0.0) continue; // faces away
        if (sample_w[s] > occ[s] + eps) continue;             // occluded
        const double ix = samples(static_cast<Eigen::Index>(s), 0);
        const double iy = samples(static_cast<Eigen::Index>(s), 1);
        if (ix < 0.0 || ix > image.width - 1.0 || iy < 0.0 || iy > image.height - 1.0) continue;
        bilinear_sample(image, ix, iy, color.data());
        for (int c = 0; c < 3; ++c) uv->pixels.at(tex.y, tex.x, c) = color[static_cast<std::size_t>(c)];
        mask->at(tex.y, tex.x) = 1;
    }
}

UvMap bake_texture_uv(const MorphableModel& model, const Eigen::MatrixXd& vertex_colors,
                      int uv_size) {
    if (vertex_colors.rows() != model.num_vertices() || vertex_colors.cols() != 3)
        throw std::invalid_argument("bake_texture_uv: color matrix shape mismatch");
    UvMap uv(uv_size, uv_size);
    for (const auto& tex : uv_coverage(model, uv_size, uv_size)) {
        for (int c = 0; c < 3; ++c) {
            const double v = tex.b0 * vertex_colors(tex.i0, c) +
                             tex.b1 * vertex_colors(tex.i1, c) +
                             tex.b2 * vertex_colors(tex.i2, c);
            uv.pixels.at(tex.y, tex.x, c) = std::clamp(v, 0.0, 1.0);
        }
    }
    return uv;
}

double mask_fraction(const VisibilityMask& mask) {
    if (mask.visible.empty()) return 0.0;
    std::size_t missing = 0;
    for (const auto v : mask.visible)
        if (!v) ++missing;
    return static_cast<double>(missing) / static_cast<double>(mask.visible.size());
}

Image make_generator_input(const UvMap& uv, const VisibilityMask& mask, std::uint64_t seed) {
    if (uv.width != mask.width || uv.height != mask.height)
        throw std::invalid_argument("make_generator_input: uv/mask size mismatch");
    Image out(uv.width, uv.height, 6);
    Rng rng(seed);
    for (int y = 0; y < uv.height; ++y) {
        for (int x = 0; x < uv.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = mask.at(y, x) ? uv.pixels.at(y, x, c) : rng.uniform();
                out.at(y, x, c) = v;
            }
        }
    }
    for (int y = 0; y < uv.height; ++y)
        for (int x = 0; x < uv.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, 3 + c) = out.at(y, uv.width - 1 - x, c);
    return out;
}

Image central_crop(const Image& img, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw std::invalid_argument("central_crop: ratio outside (0, 1]");
    const int side =
        std::max(1, static_cast<int>(std::lround(ratio * std::min(img.width, img.height))));
    const int x0 = (img.width - side) / 2;
    const int y0 = (img.height - side) / 2;
    Image out(side, side, img.channels);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

UvMap central_crop(const UvMap& uv, double ratio) {
    UvMap out;
    out.pixels = central_crop(uv.pixels, ratio);
    out.width = out.pixels.width;
    out.height = out.pixels.height;
    return out;
}

namespace {

// Matrix-free conjugate gradients on the 5-point Laplacian restricted to the
// region, Dirichlet boundary from the target. Returns interior values.
std::vector<double> solve_poisson_channel(const Image& source, const Image& target,
                                          const VisibilityMask& region, int channel,
                                          const std::vector<int>& index,
                                          const std::vector<std::array<int, 2>>& interior) {
    const int w = region.width;
    const auto n = interior.size();
    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};

    auto apply = [&](const std::vector<double>& x, std::vector<double>& out) {
        for (std::size_t i = 0; i < n; ++i) {
            const int px = interior[i][0], py = interior[i][1];
            double v = 4.0 * x[i];
            for (int k = 0; k < 4; ++k) {
                const int qx = px + dx[k], qy = py + dy[k];
                const int j = index[static_cast<std::size_t>(qy) * w + qx];
                if (j >= 0) v -= x[static_cast<std::size_t>(j)];
            }
            out[i] = v;
        }
    };

    std::vector<double> b(n), x(n), r(n), p(n), ap(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int px = interior[i][0], py = interior[i][1];
        double v = 4.0 * source.at(py, px, channel);
        for (int k = 0; k < 4; ++k) {
            const int qx = px + dx[k], qy = py + dy[k];
            v -= source.at(qy, qx, channel);
            if (index[static_cast<std::size_t>(qy) * w + qx] < 0) v += target.at(qy, qx, channel);
        }
        b[i] = v;
        x[i] = target.at(py, px, channel);
    }

    const double tol = 1e-9;
    apply(x, ap);
    double rr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        r[i] = b[i] - ap[i];
        p[i] = r[i];
        rr += r[i] * r[i];
    }
    const int max_iter = 40000;
    for (int it = 0; it < max_iter; ++it) {
        double inf = 0.0;
        for (std::size_t i = 0; i < n; ++i) inf = std::max(inf, std::abs(r[i]));
        if (inf < tol) {
            // Confirm with the true residual; recurrence drift restarts CG.
            apply(x, ap);
            double true_inf = 0.0, true_rr = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                r[i] = b[i] - ap[i];
                true_inf = std::max(true_inf, std::abs(r[i]));
                true_rr += r[i] * r[i];
            }
            if (true_inf < tol) break;
            for (std::size_t i = 0; i < n; ++i) p[i] = r[i];
            rr = true_rr;
        }
        apply(p, ap);
        double pap = 0.0;
        for (std::size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
        if (pap <= 0.0) break;
        const double alpha = rr / pap;
        double rr_next = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            rr_next += r[i] * r[i];
        }
        const double beta = rr_next / rr;
        rr = rr_next;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    return x;
}

} // namespace

UvMap poisson_blend(const UvMap& source, const UvMap& target, const VisibilityMask& region) {
    if (source.width != target.width || source.height != target.height ||
        source.width != region.width || source.height != region.height)
        throw std::invalid_argument("poisson_blend: size mismatch");
    const int w = region.width, h = region.height;

    UvMap out = target;
    std::vector<int> index(static_cast<std::size_t>(w) * h, -1);
    std::vector<std::array<int, 2>> interior;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!region.at(y, x)) continue;
            if (x == 0 || x == w - 1 || y == 0 || y == h - 1)
                throw std::invalid_argument("poisson_blend: region touches the border");
            index[static_cast<std::size_t>(y) * w + x] = static_cast<int>(interior.size());
            interior.push_back({x, y});
        }
    }
    if (interior.empty()) return out;

    for (int c = 0; c < 3; ++c) {
        const auto x = solve_poisson_channel(source.pixels, target.pixels, region, c, index, interior);
        for (std::size_t i = 0; i < interior.size(); ++i)
            out.pixels.at(interior[i][1], interior[i][0], c) = x[i];
    }
    return out;
}

} // namespace uvforge
