#pragma once

#include "uvforge/image.hpp"
#include "uvforge/model.hpp"

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <limits>
#include <vector>

namespace uvforge {

/// Texture-space color grid, values nominally in [0,1].
struct UvMap {
    int width = 0;
    int height = 0;
    Image pixels; // width x height x 3

    UvMap() = default;
    UvMap(int w, int h) : width(w), height(h), pixels(w, h, 3) {}
};

/// Per-texel observability flags paired with a UvMap.
struct VisibilityMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> visible; // row-major, 0 or 1

    VisibilityMask() = default;
    VisibilityMask(int w, int h)
        : width(w), height(h), visible(static_cast<std::size_t>(w) * h, 0) {}
    std::uint8_t& at(int y, int x) { return visible[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return visible[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel nearest camera-space distance (w = -z'), +inf where uncovered.
struct DepthBuffer {
    int width = 0;
    int height = 0;
    std::vector<double> depth;
    int degenerate_triangles = 0; // zero-area projected triangles skipped

    DepthBuffer() = default;
    DepthBuffer(int w, int h)
        : width(w), height(h),
          depth(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::infinity()) {}
    double& at(int y, int x) { return depth[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width + x]; }
};

/// Full rasterization product: per pixel the nearest covering triangle, its
/// perspective-correct barycentric weights, and the depth buffer.
struct RasterSurface {
    DepthBuffer depth;
    std::vector<int> triangle;                  // -1 where uncovered
    std::vector<std::array<double, 3>> bary;    // perspective-correct weights

    int tri_at(int y, int x) const {
        return triangle[static_cast<std::size_t>(y) * depth.width + x];
    }
    const std::array<double, 3>& bary_at(int y, int x) const {
        return bary[static_cast<std::size_t>(y) * depth.width + x];
    }
};

/// Twice the signed area of (a, b, p) in screen coordinates (y down);
/// positive for clockwise-on-screen triangles.
inline double orient2d(double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

/// Top-left fill rule for y-down, positive-orientation triangles: a boundary
/// pixel belongs to the triangle only through a top or left edge.
inline bool is_top_left_edge(double ax, double ay, double bx, double by) {
    const double dx = bx - ax;
    const double dy = by - ay;
    return dy < 0.0 || (dy == 0.0 && dx > 0.0);
}

/// Visibility tolerance: 1e-4 of the mesh bounding-box diagonal.
double visibility_eps(const Eigen::MatrixXd& vertices);

/// Rasterizes projected triangles over the integer pixel grid with the
/// top-left fill rule and perspective-correct depth (1/w interpolated
/// affinely). Both windings are kept; zero-area triangles are skipped and
/// counted. Throws projection_error if any vertex lies at or behind the
/// camera plane.
RasterSurface rasterize_surface(const Eigen::MatrixXd& vertices,
                                const std::vector<std::array<int, 3>>& triangles,
                                const Camera& camera, int width, int height);

/// Depth-only view of rasterize_surface.
DepthBuffer rasterize_depth(const Eigen::MatrixXd& vertices,
                            const std::vector<std::array<int, 3>>& triangles,
                            const Camera& camera, int width, int height);

/// Per-sample minimum occlusion distance: for each 2D sample point, the
/// smallest perspective-correct depth among triangles whose closed projected
/// footprint contains it (+inf where none does). Samples are binned into a
/// uniform grid so cost stays near triangles * local-samples.
std::vector<double> min_depth_at_samples(const Eigen::MatrixXd& projected,
                                         const std::vector<double>& depths,
                                         const std::vector<std::array<int, 3>>& triangles,
                                         const Eigen::MatrixXd& sample_points);

/// Per-vertex visibility: a vertex is visible iff its area-weighted normal
/// faces the camera and no triangle covers its exact projected position more
/// than eps nearer. The depth test runs at the exact sample points rather
/// than pixel centers, so results match a ray-cast occlusion query.
std::vector<std::uint8_t> visible_vertices(const Eigen::MatrixXd& vertices,
                                           const std::vector<std::array<int, 3>>& triangles,
                                           const Camera& camera, double eps);

/// Projects every UV texel's surface point into the image and pulls its color
/// where the point is front-facing, unoccluded and inside the frame. Occluded
/// or uncovered texels get mask 0 and color 0.
void extract_uv(const Image& image, const MorphableModel& model, const FitParams& params,
                int uv_size, UvMap* uv, VisibilityMask* mask);

/// Fraction of texels missing (mask false).
double mask_fraction(const VisibilityMask& mask);

/// Rasterizes per-vertex colors (N x 3) into texture space, clamped to [0,1].
/// Texels not covered by any UV triangle stay black.
UvMap bake_texture_uv(const MorphableModel& model, const Eigen::MatrixXd& vertex_colors,
                      int uv_size);

/// 6-channel generator input: channels 0-2 are the UV colors with masked
/// texels replaced by seeded uniform noise, channels 3-5 their horizontal
/// mirror.
Image make_generator_input(const UvMap& uv, const VisibilityMask& mask, std::uint64_t seed);

/// Axis-centered square crop of side ratio * min(W, H).
Image central_crop(const Image& img, double ratio);
UvMap central_crop(const UvMap& uv, double ratio);

/// Gradient-domain blend: solves the discrete Poisson equation inside region
/// with source gradients as guidance and target values as Dirichlet boundary,
/// by conjugate gradients to an interior residual below 1e-9. Outside region
/// the target is returned unchanged. The region must not touch the border.
UvMap poisson_blend(const UvMap& source, const UvMap& target, const VisibilityMask& region);

} // namespace uvforge
