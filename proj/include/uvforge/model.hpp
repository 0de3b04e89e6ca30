#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace uvforge {

/// Thrown when a vertex lands at or behind the camera plane.
struct projection_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Perspective pinhole camera. The camera sits at the origin looking down −Z;
/// a vertex v maps to v' = R(yaw, pitch, roll) v + translation and must end up
/// with z' < 0 to be projectable.
struct Camera {
    double yaw = 0.0;
    double pitch = 0.0;
    double roll = 0.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    double focal = 1.0;
    double cx = 0.0;
    double cy = 0.0;
};

/// Linear statistical face model. Shape instances are mean_shape + shape_basis * p
/// with coordinates interleaved as x0,y0,z0,x1,... Texture instances likewise hold
/// interleaved per-vertex RGB. Basis columns are orthonormal; eigenvalues are the
/// per-mode variances, strictly positive and non-increasing.
struct MorphableModel {
    Eigen::VectorXd mean_shape;          // 3N
    Eigen::MatrixXd shape_basis;         // 3N x n_s
    Eigen::VectorXd shape_eigenvalues;   // n_s
    Eigen::VectorXd mean_texture;        // 3N, values in [0,1]
    Eigen::MatrixXd texture_basis;       // 3N x n_t
    Eigen::VectorXd texture_eigenvalues; // n_t
    std::vector<std::array<int, 3>> triangles;
    std::vector<std::array<double, 2>> uv_coords; // per vertex, in [0,1]^2
    std::vector<int> landmark_indices;
    std::uint64_t seed = 0;

    int num_vertices() const { return static_cast<int>(mean_shape.size() / 3); }
    int num_shape_modes() const { return static_cast<int>(shape_basis.cols()); }
    int num_texture_modes() const { return static_cast<int>(texture_basis.cols()); }
};

/// Shape and texture coefficients plus the camera they were fitted under.
struct FitParams {
    Eigen::VectorXd p;
    Eigen::VectorXd lambda;
    Camera camera;
};

/// Intrinsic yaw-pitch-roll rotation: R = Ry(yaw) * Rx(pitch) * Rz(roll).
Eigen::Matrix3d rotation_matrix(double yaw, double pitch, double roll);

/// mean_shape + shape_basis * p, reshaped to N x 3 (row per vertex).
Eigen::MatrixXd instantiate_shape(const MorphableModel& model, const Eigen::VectorXd& p);

/// mean_texture + texture_basis * lambda, reshaped to N x 3. Not clamped;
/// clamping to [0,1] happens at render time only.
Eigen::MatrixXd instantiate_texture(const MorphableModel& model, const Eigen::VectorXd& lambda);

/// Projects N x 3 vertices to N x 2 pixel coordinates:
/// u = cx + f * x'/(-z'), v = cy + f * y'/(-z').
/// Throws projection_error if any z' >= -1e-8.
Eigen::MatrixXd project(const Eigen::MatrixXd& vertices, const Camera& camera);

/// Camera-space vertices R v + t as N x 3, shared by projection and visibility.
Eigen::MatrixXd camera_space(const Eigen::MatrixXd& vertices, const Camera& camera);

/// Frontal default camera for a given output resolution: face at distance 5,
/// focal 1.75 * min(w, h), principal point at the pixel-grid center.
Camera default_camera(int image_width, int image_height);

/// Builds a deterministic synthetic face model: a half-ellipsoid grid mesh with
/// nose/brow/mouth/chin bumps and eye sockets, seven landmark vertices, a
/// cylindrical UV unwrap, smooth random orthonormal shape/texture bases and
/// geometrically decaying eigenvalues. The actual vertex count is the grid
/// rows*cols closest to n_vertices (exact for the 2000 default).
MorphableModel make_synthetic_model(std::uint64_t seed, int n_vertices = 2000,
                                    int n_s = 20, int n_t = 20);

/// Draws shape/texture coefficients with per-mode variance equal to the
/// eigenvalues; camera defaults to frontal at 128x128.
FitParams sample_identity(const MorphableModel& model, std::uint64_t seed);

/// Throws std::runtime_error if any MorphableModel invariant is violated.
void validate_model(const MorphableModel& model);

/// Archive IO: text header (counts, seed) followed by little-endian float64
/// blocks; triangle and landmark indices stored as exact integer doubles.
void save_model(const std::string& path, const MorphableModel& model);
MorphableModel load_model(const std::string& path);

/// Wavefront OBJ export (v/vt/f) of an instantiated shape for inspection.
void export_obj(const std::string& path, const Eigen::MatrixXd& vertices,
                const MorphableModel& model);

} // namespace uvforge
