#include "uvforge/fitter.hpp"

#include <cmath>
#include <stdexcept>

#include "uvforge/uv_pipeline.hpp"

namespace uvforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct RotationDerivs {
    Eigen::Matrix3d r;
    Eigen::Matrix3d d_yaw;
    Eigen::Matrix3d d_pitch;
    Eigen::Matrix3d d_roll;
};

RotationDerivs rotation_derivs(double yaw, double pitch, double roll) {
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cr = std::cos(roll), sr = std::sin(roll);
    Eigen::Matrix3d ry, rx, rz, dry, drx, drz;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
    rz << cr, -sr, 0, sr, cr, 0, 0, 0, 1;
    dry << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
    drx << 0, 0, 0, 0, -sp, -cp, 0, cp, -sp;
    drz << -sr, -cr, 0, cr, -sr, 0, 0, 0, 0;
    RotationDerivs out;
    out.r = ry * rx * rz;
    out.d_yaw = dry * rx * rz;
    out.d_pitch = ry * drx * rz;
    out.d_roll = ry * rx * drz;
    return out;
}

void validate_inputs(const Image& image, const Landmarks& landmarks,
                     const MorphableModel& model, const FitParams& params) {
    if (image.width < 2 || image.height < 2 || image.channels != 3)
        throw std::invalid_argument("fitter: image must be 3-channel and at least 2x2");
    if (landmarks.points.rows() != static_cast<Eigen::Index>(landmarks.indices.size()))
        throw std::invalid_argument("fitter: landmark point/index count mismatch");
    if (landmarks.points.rows() > 0 && landmarks.points.cols() != 2)
        throw std::invalid_argument("fitter: landmark points must be L x 2");
    const int n = model.num_vertices();
    for (int idx : landmarks.indices)
        if (idx < 0 || idx >= n)
            throw std::invalid_argument("fitter: landmark index out of range");
    if (params.p.size() != model.num_shape_modes() ||
        params.lambda.size() != model.num_texture_modes())
        throw std::invalid_argument("fitter: parameter size mismatch");
}

// Builds the weighted least-squares system at the given parameters. Returns
// the energy (sum of squared residuals); when neq is nonnull the normal
// equations J^T J and J^T r are accumulated alongside. The energy path and
// the Jacobian path share every masking decision, so a candidate evaluated
// without a Jacobian scores exactly what the solver optimized.
double assemble(const Image& image, const Landmarks& landmarks, const MorphableModel& model,
                const FitParams& params, const FitWeights& weights, EnergyBreakdown* breakdown,
                Eigen::MatrixXd* jtj, Eigen::VectorXd* jtr) {
    validate_inputs(image, landmarks, model, params);
    if (weights.alpha_landmark < 0 || weights.alpha_shape < 0 || weights.alpha_texture < 0)
        throw std::invalid_argument("fitter: weights must be non-negative");

    const int n_s = model.num_shape_modes();
    const int n_t = model.num_texture_modes();
    const int m = 6 + n_s + n_t;
    const bool with_j = jtj != nullptr;
    if (with_j) {
        jtj->setZero(m, m);
        jtr->setZero(m);
    }

    const Eigen::MatrixXd shape = instantiate_shape(model, params.p);
    const Eigen::MatrixXd texture = instantiate_texture(model, params.lambda);
    const Camera& c = params.camera;
    const RotationDerivs rot = rotation_derivs(c.yaw, c.pitch, c.roll);
    const double eps = visibility_eps(shape);
    const auto vis = visible_vertices(shape, model.triangles, c, eps);

    int visible_count = 0;
    for (std::uint8_t v : vis) visible_count += v;
    if (visible_count == 0) throw std::runtime_error("energy: no visible vertices");

    EnergyBreakdown acc;
    Eigen::RowVectorXd row(m);
    const double xmax = image.width - 1.0;
    const double ymax = image.height - 1.0;

    // Screen derivative of one camera-space point, rows (du, dv).
    const auto screen_jac = [&](const Eigen::Vector3d& pc, double w) {
        Eigen::Matrix<double, 2, 3> s;
        s << c.focal / w, 0.0, c.focal * pc.x() / (w * w),
             0.0, c.focal / w, c.focal * pc.y() / (w * w);
        return s;
    };

    for (int i = 0; i < model.num_vertices(); ++i) {
        if (!vis[static_cast<std::size_t>(i)]) continue;
        const Eigen::Vector3d pm = shape.row(i);
        const Eigen::Vector3d pc = rot.r * pm + c.translation;
        const double w = -pc.z();
        if (w <= 1e-8) continue;
        const double u = c.cx + c.focal * (pc.x() / w);
        const double v = c.cy + c.focal * (pc.y() / w);
        if (u < 0.0 || u > xmax || v < 0.0 || v > ymax) continue;

        double col[3], gx[3], gy[3];
        bilinear_sample(image, u, v, col);
        Eigen::Matrix<double, 2, 6> dpose;
        Eigen::MatrixXd dshape;
        if (with_j) {
            bilinear_gradient(image, u, v, gx, gy);
            const Eigen::Matrix<double, 2, 3> s = screen_jac(pc, w);
            dpose.col(0) = s * (rot.d_yaw * pm);
            dpose.col(1) = s * (rot.d_pitch * pm);
            dpose.col(2) = s * (rot.d_roll * pm);
            dpose.rightCols<3>() = s;
            dshape.noalias() = (s * rot.r) * model.shape_basis.middleRows(3 * i, 3);
        }
        for (int ch = 0; ch < 3; ++ch) {
            const double r = col[ch] - texture(i, ch);
            acc.photometric += r * r;
            if (!with_j) continue;
            const Eigen::RowVector2d g(gx[ch], gy[ch]);
            row.head<6>() = g * dpose;
            row.segment(6, n_s) = g * dshape;
            row.segment(6 + n_s, n_t) = -model.texture_basis.row(3 * i + ch);
            jtj->selfadjointView<Eigen::Lower>().rankUpdate(row.transpose());
            *jtr += row.transpose() * r;
        }
    }

    const double sqrt_al = std::sqrt(weights.alpha_landmark);
    for (Eigen::Index l = 0; l < landmarks.points.rows(); ++l) {
        const int idx = landmarks.indices[static_cast<std::size_t>(l)];
        const Eigen::Vector3d pm = shape.row(idx);
        const Eigen::Vector3d pc = rot.r * pm + c.translation;
        const double w = -pc.z();
        if (w <= 1e-8)
            throw projection_error("energy: landmark vertex at or behind camera plane");
        const double u = c.cx + c.focal * (pc.x() / w);
        const double v = c.cy + c.focal * (pc.y() / w);
        const double ru = sqrt_al * (u - landmarks.points(l, 0));
        const double rv = sqrt_al * (v - landmarks.points(l, 1));
        acc.landmark += ru * ru + rv * rv;
        if (!with_j || weights.alpha_landmark == 0.0) continue;
        const Eigen::Matrix<double, 2, 3> s = screen_jac(pc, w);
        Eigen::Matrix<double, 2, 6> dpose;
        dpose.col(0) = s * (rot.d_yaw * pm);
        dpose.col(1) = s * (rot.d_pitch * pm);
        dpose.col(2) = s * (rot.d_roll * pm);
        dpose.rightCols<3>() = s;
        const Eigen::MatrixXd dshape = (s * rot.r) * model.shape_basis.middleRows(3 * idx, 3);
        for (int k = 0; k < 2; ++k) {
            row.setZero();
            row.head<6>() = sqrt_al * dpose.row(k);
            row.segment(6, n_s) = sqrt_al * dshape.row(k);
            jtj->selfadjointView<Eigen::Lower>().rankUpdate(row.transpose());
            *jtr += row.transpose() * (k == 0 ? ru : rv);
        }
    }

    for (int k = 0; k < n_s; ++k) {
        const double scale = std::sqrt(weights.alpha_shape / model.shape_eigenvalues(k));
        const double r = scale * params.p(k);
        acc.shape_prior += r * r;
        if (!with_j) continue;
        (*jtj)(6 + k, 6 + k) += scale * scale;
        (*jtr)(6 + k) += scale * r;
    }
    for (int k = 0; k < n_t; ++k) {
        const double scale = std::sqrt(weights.alpha_texture / model.texture_eigenvalues(k));
        const double r = scale * params.lambda(k);
        acc.texture_prior += r * r;
        if (!with_j) continue;
        (*jtj)(6 + n_s + k, 6 + n_s + k) += scale * scale;
        (*jtr)(6 + n_s + k) += scale * r;
    }

    if (with_j)
        jtj->triangularView<Eigen::StrictlyUpper>() = jtj->transpose();
    if (breakdown) *breakdown = acc;
    return acc.total();
}

FitParams apply_step(const FitParams& cur, const Eigen::VectorXd& delta, int n_s) {
    FitParams out = cur;
    out.camera.yaw += delta(0);
    out.camera.pitch += delta(1);
    out.camera.roll += delta(2);
    out.camera.translation += delta.segment<3>(3);
    out.p += delta.segment(6, n_s);
    out.lambda += delta.tail(delta.size() - 6 - n_s);
    return out;
}

}  // namespace

SampledColors sample_image(const Image& image, const Eigen::MatrixXd& points) {
    if (image.width < 1 || image.height < 1 || image.channels < 1)
        throw std::invalid_argument("sample_image: empty image");
    if (points.cols() != 2 && points.rows() > 0)
        throw std::invalid_argument("sample_image: points must be M x 2");
    const Eigen::Index m = points.rows();
    SampledColors out;
    out.colors = Eigen::MatrixXd::Zero(m, image.channels);
    out.in_bounds.assign(static_cast<std::size_t>(m), 0);
    std::vector<double> buf(static_cast<std::size_t>(image.channels));
    for (Eigen::Index i = 0; i < m; ++i) {
        const double x = points(i, 0), y = points(i, 1);
        if (!(x >= 0.0 && x <= image.width - 1.0 && y >= 0.0 && y <= image.height - 1.0))
            continue;
        bilinear_sample(image, x, y, buf.data());
        for (int ch = 0; ch < image.channels; ++ch) out.colors(i, ch) = buf[ch];
        out.in_bounds[static_cast<std::size_t>(i)] = 1;
    }
    return out;
}

double energy(const Image& image, const Landmarks& landmarks, const MorphableModel& model,
              const FitParams& params, const FitWeights& weights, EnergyBreakdown* breakdown) {
    return assemble(image, landmarks, model, params, weights, breakdown, nullptr, nullptr);
}

Eigen::VectorXd fit_gradient(const Image& image, const Landmarks& landmarks,
                             const MorphableModel& model, const FitParams& params,
                             const FitWeights& weights) {
    Eigen::MatrixXd jtj;
    Eigen::VectorXd jtr;
    assemble(image, landmarks, model, params, weights, nullptr, &jtj, &jtr);
    return 2.0 * jtr;
}

FitReport gauss_newton_fit(const Image& image, const Landmarks& landmarks,
                           const MorphableModel& model, const FitParams& init,
                           const FitWeights& weights, int max_iter, double tol) {
    if (landmarks.points.rows() < 4)
        throw std::invalid_argument("gauss_newton_fit: need at least 4 landmarks");
    if (max_iter < 1) throw std::invalid_argument("gauss_newton_fit: max_iter must be positive");

    const int n_s = model.num_shape_modes();
    const int n_t = model.num_texture_modes();
    const int m = 6 + n_s + n_t;

    FitReport report;
    report.params = init;
    Eigen::MatrixXd jtj(m, m);
    Eigen::VectorXd jtr(m);
    double mu = 1e-3;
    const double mu_max = 1e12;

    for (int it = 0; it < max_iter; ++it) {
        // Recomputing at the accepted parameters reproduces the candidate's
        // score bit for bit, so the base energy always equals the last
        // history entry and the history stays monotone.
        const double e_cur =
            assemble(image, landmarks, model, report.params, weights, nullptr, &jtj, &jtr);
        if (report.cost_history.empty()) report.cost_history.push_back(e_cur);

        bool accepted = false;
        double e_new = 0.0;
        FitParams cand;
        while (mu <= mu_max) {
            Eigen::MatrixXd damped = jtj;
            damped.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
            const Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
            if (ldlt.info() != Eigen::Success) {
                mu *= 4.0;
                continue;
            }
            const Eigen::VectorXd delta = ldlt.solve(-jtr);
            if (!delta.allFinite()) {
                mu *= 4.0;
                continue;
            }
            cand = apply_step(report.params, delta, n_s);
            double e_try;
            try {
                e_try = assemble(image, landmarks, model, cand, weights, nullptr, nullptr,
                                 nullptr);
            } catch (const std::runtime_error&) {
                mu *= 4.0;
                continue;
            }
            if (e_try <= e_cur) {
                accepted = true;
                e_new = e_try;
                mu = std::max(mu / 3.0, 1e-12);
                break;
            }
            mu *= 4.0;
        }
        if (!accepted) {
            report.converged = false;
            return report;
        }

        report.params = cand;
        report.cost_history.push_back(e_new);
        report.iterations = it + 1;
        if (std::abs(e_cur - e_new) <= tol * std::max(e_cur, 1e-300)) {
            report.converged = true;
            return report;
        }
    }
    report.converged = false;
    return report;
}

int pose_bin(double yaw) {
    const double deg = yaw * (180.0 / kPi);
    const int bin = static_cast<int>(std::floor((deg + 97.5) / 15.0)) + 1;
    if (bin < 1 || bin > 13)
        throw std::out_of_range("pose_bin: yaw outside [-97.5, 97.5) degrees");
    return bin;
}

Image mean_face(const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("mean_face: empty stack");
    const Image& first = images.front();
    for (const Image& img : images)
        if (!img.same_shape(first)) throw std::invalid_argument("mean_face: shape mismatch");
    Image out(first.width, first.height, first.channels, 0.0);
    for (const Image& img : images)
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += img.data[i];
    const double inv = 1.0 / static_cast<double>(images.size());
    for (double& v : out.data) v *= inv;
    return out;
}

}  // namespace uvforge
