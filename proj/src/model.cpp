#include "uvforge/model.hpp"

#include "uvforge/rng.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace uvforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Face grid parameter domain: theta sweeps ear to ear around the vertical
// axis, phi sweeps chin to forehead. Positive phi is screen-down (+y). Both
// sweeps pass 90 degrees so the frontal silhouette lies on mesh interior and
// the open boundary faces away from a frontal camera.
constexpr double kThetaMax = 0.640 * kPi;
constexpr double kPhiMax = 0.540 * kPi;

// Chart density floor past grazing inclination. The unwrap allocates texels
// in proportion to frontally seen area (cosine of the sweep angle) but never
// below this share, keeping the map monotone out to the boundary.
constexpr double kGrazeFloor = 0.12;

double chart_warp(double t) {
    const double t0 = std::acos(kGrazeFloor);
    return t <= t0 ? std::sin(t) : std::sin(t0) + kGrazeFloor * (t - t0);
}

// Odd, monotone angle-to-chart map onto [0, 1]; 0.5 at angle zero.
double chart_coord(double angle, double angle_max) {
    const double mag = chart_warp(std::abs(angle)) / chart_warp(angle_max);
    return 0.5 + 0.5 * (angle < 0.0 ? -mag : mag);
}

// Semi-axes of the base ellipsoid.
constexpr double kAxisX = 1.0;
constexpr double kAxisY = 1.3;
constexpr double kAxisZ = 0.85;

struct Bump {
    double theta, phi;   // center
    double s_theta, s_phi; // widths
    double amp;          // radial displacement at center
};

// Nose, eye sockets, brow ridge, lips, chin. Symmetric in theta so the mesh
// stays mirror-symmetric about x = 0.
const Bump kBumps[] = {
    {0.00, 0.10, 0.22, 0.18, 0.28},   // nose
    {-0.50, -0.28, 0.18, 0.14, -0.06}, // left eye socket
    {0.50, -0.28, 0.18, 0.14, -0.06},  // right eye socket
    {0.00, -0.45, 0.70, 0.12, 0.05},   // brow ridge
    {0.00, 0.50, 0.28, 0.10, 0.05},    // lips
    {0.00, 0.85, 0.30, 0.18, 0.07},    // chin
};

// (theta, phi) targets for the seven landmark vertices, in order:
// left/right outer eye corner, left/right inner eye corner, nose tip,
// left/right mouth corner.
const double kLandmarkTargets[][2] = {
    {-0.75, -0.28}, {0.75, -0.28}, {-0.33, -0.28}, {0.33, -0.28},
    {0.00, 0.10},   {-0.30, 0.50}, {0.30, 0.50},
};

double gauss(double x, double center, double sigma) {
    const double d = (x - center) / sigma;
    return std::exp(-0.5 * d * d);
}

// Smooth random field over the grid: a handful of low-frequency product waves.
Eigen::VectorXd wave_field(Rng& rng, const std::vector<double>& thetas,
                           const std::vector<double>& phis) {
    struct Wave {
        double amp, k_theta, k_phi, p_theta, p_phi;
    };
    Wave waves[3];
    for (auto& w : waves) {
        w.amp = rng.normal();
        w.k_theta = static_cast<double>(rng.uniform_int(0, 3));
        w.k_phi = static_cast<double>(rng.uniform_int(0, 3));
        w.p_theta = rng.uniform(0.0, 2.0 * kPi);
        w.p_phi = rng.uniform(0.0, 2.0 * kPi);
    }
    const auto n = static_cast<Eigen::Index>(thetas.size());
    Eigen::VectorXd field(n);
    for (Eigen::Index v = 0; v < n; ++v) {
        double s = 0.0;
        for (const auto& w : waves)
            s += w.amp * std::cos(w.k_theta * thetas[v] + w.p_theta) *
                 std::cos(w.k_phi * phis[v] + w.p_phi);
        field[v] = s;
    }
    return field;
}

// Random smooth 3N x n_modes matrix, orthonormalized by thin QR. A tiny white
// jitter keeps the columns in general position so QR never sees a rank drop.
Eigen::MatrixXd make_basis(Rng& rng, const std::vector<double>& thetas,
                           const std::vector<double>& phis, int n_modes) {
    const auto n3 = static_cast<Eigen::Index>(3 * thetas.size());
    Eigen::MatrixXd raw(n3, n_modes);
    for (int k = 0; k < n_modes; ++k) {
        for (int c = 0; c < 3; ++c) {
            const Eigen::VectorXd f = wave_field(rng, thetas, phis);
            for (Eigen::Index v = 0; v < static_cast<Eigen::Index>(thetas.size()); ++v)
                raw(3 * v + c, k) = f[v];
        }
    }
    for (Eigen::Index i = 0; i < raw.size(); ++i)
        raw.data()[i] += 1e-6 * rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
    Eigen::MatrixXd thin_q =
        qr.householderQ() * Eigen::MatrixXd::Identity(n3, n_modes);
    return thin_q;
}

void pick_grid(int n_vertices, int* rows, int* cols) {
    if (n_vertices < 64)
        throw std::invalid_argument("make_synthetic_model: need at least 64 vertices");
    int r = static_cast<int>(std::lround(std::sqrt(0.8 * n_vertices)));
    r = std::max(r, 8);
    int c = static_cast<int>(std::lround(static_cast<double>(n_vertices) / r));
    c = std::max(c, 8);
    *rows = r;
    *cols = c;
}

} // namespace

Eigen::Matrix3d rotation_matrix(double yaw, double pitch, double roll) {
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cr = std::cos(roll), sr = std::sin(roll);
    Eigen::Matrix3d ry, rx, rz;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
    rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
    return ry * rx * rz;
}

Eigen::MatrixXd instantiate_shape(const MorphableModel& model, const Eigen::VectorXd& p) {
    if (p.size() != model.shape_basis.cols())
        throw std::invalid_argument("instantiate_shape: coefficient count mismatch");
    Eigen::VectorXd flat = model.mean_shape + model.shape_basis * p;
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(
               flat.data(), flat.size() / 3, 3)
        .eval();
}

Eigen::MatrixXd instantiate_texture(const MorphableModel& model, const Eigen::VectorXd& lambda) {
    if (lambda.size() != model.texture_basis.cols())
        throw std::invalid_argument("instantiate_texture: coefficient count mismatch");
    Eigen::VectorXd flat = model.mean_texture + model.texture_basis * lambda;
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(
               flat.data(), flat.size() / 3, 3)
        .eval();
}

Eigen::MatrixXd camera_space(const Eigen::MatrixXd& vertices, const Camera& camera) {
    const Eigen::Matrix3d r = rotation_matrix(camera.yaw, camera.pitch, camera.roll);
    Eigen::MatrixXd out = vertices * r.transpose();
    out.rowwise() += camera.translation.transpose();
    return out;
}

Eigen::MatrixXd project(const Eigen::MatrixXd& vertices, const Camera& camera) {
    const Eigen::MatrixXd cam = camera_space(vertices, camera);
    Eigen::MatrixXd out(cam.rows(), 2);
    for (Eigen::Index i = 0; i < cam.rows(); ++i) {
        const double z = cam(i, 2);
        if (z >= -1e-8)
            throw projection_error("project: vertex at or behind camera plane");
        const double w = -z;
        out(i, 0) = camera.cx + camera.focal * (cam(i, 0) / w);
        out(i, 1) = camera.cy + camera.focal * (cam(i, 1) / w);
    }
    return out;
}

Camera default_camera(int image_width, int image_height) {
    Camera cam;
    cam.translation = Eigen::Vector3d(0.0, 0.0, -5.0);
    cam.focal = 1.75 * std::min(image_width, image_height);
    cam.cx = 0.5 * (image_width - 1);
    cam.cy = 0.5 * (image_height - 1);
    return cam;
}

MorphableModel make_synthetic_model(std::uint64_t seed, int n_vertices, int n_s, int n_t) {
    if (n_s < 1 || n_t < 1)
        throw std::invalid_argument("make_synthetic_model: need at least one mode");
    int rows = 0, cols = 0;
    pick_grid(n_vertices, &rows, &cols);
    const int n = rows * cols;
    if (n_s > 3 * n || n_t > 3 * n)
        throw std::invalid_argument("make_synthetic_model: more modes than coordinates");

    std::vector<double> thetas(n), phis(n);
    MorphableModel model;
    model.seed = seed;
    model.mean_shape.resize(3 * n);
    model.uv_coords.resize(n);
    for (int i = 0; i < rows; ++i) {
        const double phi = -kPhiMax + 2.0 * kPhiMax * i / (rows - 1);
        for (int j = 0; j < cols; ++j) {
            const double theta = -kThetaMax + 2.0 * kThetaMax * j / (cols - 1);
            const int v = i * cols + j;
            thetas[v] = theta;
            phis[v] = phi;
            Eigen::Vector3d pos(kAxisX * std::cos(phi) * std::sin(theta),
                                kAxisY * std::sin(phi),
                                kAxisZ * std::cos(phi) * std::cos(theta));
            double bump = 0.0;
            for (const auto& b : kBumps)
                bump += b.amp * gauss(theta, b.theta, b.s_theta) * gauss(phi, b.phi, b.s_phi);
            pos += bump * pos.normalized();
            model.mean_shape.segment<3>(3 * v) = pos;
            model.uv_coords[v] = {chart_coord(theta, kThetaMax), chart_coord(phi, kPhiMax)};
        }
    }

    model.triangles.reserve(2 * (rows - 1) * (cols - 1));
    for (int i = 0; i + 1 < rows; ++i) {
        for (int j = 0; j + 1 < cols; ++j) {
            const int a = i * cols + j;
            const int b = i * cols + j + 1;
            const int c = (i + 1) * cols + j + 1;
            const int d = (i + 1) * cols + j;
            model.triangles.push_back({a, b, c});
            model.triangles.push_back({a, c, d});
        }
    }

    for (const auto& target : kLandmarkTargets) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int v = 0; v < n; ++v) {
            const double dt = thetas[v] - target[0];
            const double dp = phis[v] - target[1];
            const double d = dt * dt + dp * dp;
            if (d < best_d) {
                best_d = d;
                best = v;
            }
        }
        model.landmark_indices.push_back(best);
    }
    {
        auto sorted = model.landmark_indices;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw std::invalid_argument(
                "make_synthetic_model: grid too coarse to separate landmarks");
    }

    model.mean_texture.resize(3 * n);
    for (int v = 0; v < n; ++v) {
        const double th = thetas[v], ph = phis[v];
        double r = 0.80, g = 0.62, b = 0.52;
        const double brow = (gauss(th, -0.5, 0.12) + gauss(th, 0.5, 0.12)) * gauss(ph, -0.42, 0.06);
        const double eyes = (gauss(th, -0.5, 0.10) + gauss(th, 0.5, 0.10)) * gauss(ph, -0.28, 0.07);
        const double lips = gauss(th, 0.0, 0.28) * gauss(ph, 0.50, 0.10);
        const double cheeks = (gauss(th, -0.55, 0.25) + gauss(th, 0.55, 0.25)) * gauss(ph, 0.15, 0.20);
        const double shade = 0.05 * std::cos(2.0 * th) * std::cos(ph);
        r += shade - 0.25 * brow - 0.35 * eyes + 0.10 * lips + 0.04 * cheeks;
        g += shade - 0.20 * brow - 0.30 * eyes - 0.06 * lips;
        b += shade - 0.15 * brow - 0.25 * eyes - 0.04 * lips;
        model.mean_texture[3 * v + 0] = std::clamp(r, 0.05, 0.95);
        model.mean_texture[3 * v + 1] = std::clamp(g, 0.05, 0.95);
        model.mean_texture[3 * v + 2] = std::clamp(b, 0.05, 0.95);
    }

    Rng shape_rng(mix_seed(seed, 1));
    Rng texture_rng(mix_seed(seed, 2));
    model.shape_basis = make_basis(shape_rng, thetas, phis, n_s);
    model.texture_basis = make_basis(texture_rng, thetas, phis, n_t);

    // Eigenvalues are variances, calibrated so a one-sigma leading coefficient
    // moves each coordinate by about 2.5% of the face scale (6% for color).
    model.shape_eigenvalues.resize(n_s);
    model.texture_eigenvalues.resize(n_t);
    const double shape_var = 0.025 * 0.025 * 3.0 * n;
    const double texture_var = 0.06 * 0.06 * 3.0 * n;
    for (int k = 0; k < n_s; ++k)
        model.shape_eigenvalues[k] = shape_var * std::pow(0.8, k);
    for (int k = 0; k < n_t; ++k)
        model.texture_eigenvalues[k] = texture_var * std::pow(0.8, k);

    return model;
}

FitParams sample_identity(const MorphableModel& model, std::uint64_t seed) {
    Rng rng(seed);
    FitParams params;
    params.p.resize(model.num_shape_modes());
    for (Eigen::Index i = 0; i < params.p.size(); ++i)
        params.p[i] = rng.normal() * std::sqrt(model.shape_eigenvalues[i]);
    params.lambda.resize(model.num_texture_modes());
    for (Eigen::Index i = 0; i < params.lambda.size(); ++i)
        params.lambda[i] = rng.normal() * std::sqrt(model.texture_eigenvalues[i]);
    params.camera = default_camera(128, 128);
    return params;
}

void validate_model(const MorphableModel& model) {
    const int n = model.num_vertices();
    if (model.mean_shape.size() != 3 * n || model.mean_texture.size() != 3 * n ||
        model.shape_basis.rows() != 3 * n || model.texture_basis.rows() != 3 * n ||
        model.uv_coords.size() != static_cast<std::size_t>(n))
        throw std::runtime_error("model: inconsistent sizes");
    auto check_orthonormal = [](const Eigen::MatrixXd& u, const char* what) {
        const Eigen::MatrixXd gram = u.transpose() * u;
        const double resid =
            (gram - Eigen::MatrixXd::Identity(u.cols(), u.cols())).cwiseAbs().maxCoeff();
        if (resid >= 1e-8)
            throw std::runtime_error(std::string("model: ") + what + " basis not orthonormal");
    };
    check_orthonormal(model.shape_basis, "shape");
    check_orthonormal(model.texture_basis, "texture");
    auto check_eigen = [](const Eigen::VectorXd& ev, const char* what) {
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            if (!(ev[i] > 0.0))
                throw std::runtime_error(std::string("model: ") + what + " eigenvalue not positive");
            if (i > 0 && ev[i] > ev[i - 1])
                throw std::runtime_error(std::string("model: ") + what + " eigenvalues increase");
        }
    };
    check_eigen(model.shape_eigenvalues, "shape");
    check_eigen(model.texture_eigenvalues, "texture");
    for (const auto& t : model.triangles)
        for (int k = 0; k < 3; ++k)
            if (t[k] < 0 || t[k] >= n) throw std::runtime_error("model: triangle index out of range");
    for (const auto& uv : model.uv_coords)
        if (uv[0] < 0.0 || uv[0] > 1.0 || uv[1] < 0.0 || uv[1] > 1.0)
            throw std::runtime_error("model: uv coordinate outside [0,1]");
    for (int idx : model.landmark_indices)
        if (idx < 0 || idx >= n) throw std::runtime_error("model: landmark index out of range");
}

namespace {

void write_block(std::ofstream& f, const double* data, std::size_t count) {
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

void read_block(std::ifstream& f, double* data, std::size_t count) {
    f.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw std::runtime_error("model archive: truncated data block");
}

} // namespace

void save_model(const std::string& path, const MorphableModel& model) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_model: cannot open " + path);
    const int n = model.num_vertices();
    f << "UVFORGE-MODEL 1\n";
    f << "vertices " << n << "\n";
    f << "shape_modes " << model.num_shape_modes() << "\n";
    f << "texture_modes " << model.num_texture_modes() << "\n";
    f << "triangles " << model.triangles.size() << "\n";
    f << "landmarks " << model.landmark_indices.size() << "\n";
    f << "seed " << model.seed << "\n";
    f << "DATA\n";
    write_block(f, model.mean_shape.data(), model.mean_shape.size());
    write_block(f, model.shape_basis.data(), model.shape_basis.size());
    write_block(f, model.shape_eigenvalues.data(), model.shape_eigenvalues.size());
    write_block(f, model.mean_texture.data(), model.mean_texture.size());
    write_block(f, model.texture_basis.data(), model.texture_basis.size());
    write_block(f, model.texture_eigenvalues.data(), model.texture_eigenvalues.size());
    std::vector<double> scratch;
    scratch.reserve(2 * static_cast<std::size_t>(n));
    for (const auto& uv : model.uv_coords) {
        scratch.push_back(uv[0]);
        scratch.push_back(uv[1]);
    }
    write_block(f, scratch.data(), scratch.size());
    scratch.clear();
    for (const auto& t : model.triangles)
        for (int k = 0; k < 3; ++k) scratch.push_back(static_cast<double>(t[k]));
    write_block(f, scratch.data(), scratch.size());
    scratch.clear();
    for (int idx : model.landmark_indices) scratch.push_back(static_cast<double>(idx));
    write_block(f, scratch.data(), scratch.size());
    if (!f) throw std::runtime_error("save_model: short write to " + path);
}

MorphableModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_model: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "UVFORGE-MODEL 1")
        throw std::runtime_error("load_model: bad magic in " + path);
    int n = -1, n_s = -1, n_t = -1;
    long n_tris = -1, n_lm = -1;
    std::uint64_t seed = 0;
    while (std::getline(f, line) && line != "DATA") {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "vertices") ss >> n;
        else if (key == "shape_modes") ss >> n_s;
        else if (key == "texture_modes") ss >> n_t;
        else if (key == "triangles") ss >> n_tris;
        else if (key == "landmarks") ss >> n_lm;
        else if (key == "seed") ss >> seed;
        else throw std::runtime_error("load_model: unknown header key: " + key);
        if (!ss) throw std::runtime_error("load_model: malformed header line: " + line);
    }
    if (n <= 0 || n_s <= 0 || n_t <= 0 || n_tris < 0 || n_lm < 0)
        throw std::runtime_error("load_model: incomplete header in " + path);

    MorphableModel model;
    model.seed = seed;
    model.mean_shape.resize(3 * n);
    model.shape_basis.resize(3 * n, n_s);
    model.shape_eigenvalues.resize(n_s);
    model.mean_texture.resize(3 * n);
    model.texture_basis.resize(3 * n, n_t);
    model.texture_eigenvalues.resize(n_t);
    read_block(f, model.mean_shape.data(), model.mean_shape.size());
    read_block(f, model.shape_basis.data(), model.shape_basis.size());
    read_block(f, model.shape_eigenvalues.data(), model.shape_eigenvalues.size());
    read_block(f, model.mean_texture.data(), model.mean_texture.size());
    read_block(f, model.texture_basis.data(), model.texture_basis.size());
    read_block(f, model.texture_eigenvalues.data(), model.texture_eigenvalues.size());
    std::vector<double> scratch(2 * static_cast<std::size_t>(n));
    read_block(f, scratch.data(), scratch.size());
    model.uv_coords.resize(n);
    for (int v = 0; v < n; ++v) model.uv_coords[v] = {scratch[2 * v], scratch[2 * v + 1]};
    scratch.resize(3 * static_cast<std::size_t>(n_tris));
    read_block(f, scratch.data(), scratch.size());
    model.triangles.resize(n_tris);
    for (long t = 0; t < n_tris; ++t)
        model.triangles[t] = {static_cast<int>(scratch[3 * t]), static_cast<int>(scratch[3 * t + 1]),
                              static_cast<int>(scratch[3 * t + 2])};
    scratch.resize(n_lm);
    read_block(f, scratch.data(), scratch.size());
    model.landmark_indices.resize(n_lm);
    for (long i = 0; i < n_lm; ++i) model.landmark_indices[i] = static_cast<int>(scratch[i]);

    validate_model(model);
    return model;
}

void export_obj(const std::string& path, const Eigen::MatrixXd& vertices,
                const MorphableModel& model) {
    if (vertices.rows() != model.num_vertices() || vertices.cols() != 3)
        throw std::invalid_argument("export_obj: vertex matrix shape mismatch");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("export_obj: cannot open " + path);
    f.precision(9);
    for (Eigen::Index v = 0; v < vertices.rows(); ++v)
        f << "v " << vertices(v, 0) << " " << vertices(v, 1) << " " << vertices(v, 2) << "\n";
    for (const auto& uv : model.uv_coords) f << "vt " << uv[0] << " " << uv[1] << "\n";
    for (const auto& t : model.triangles)
        f << "f " << t[0] + 1 << "/" << t[0] + 1 << " " << t[1] + 1 << "/" << t[1] + 1 << " "
          << t[2] + 1 << "/" << t[2] + 1 << "\n";
    if (!f) throw std::runtime_error("export_obj: short write to " + path);
}

} // namespace uvforge
