#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "uvforge/image.hpp"
#include "uvforge/model.hpp"

namespace uvforge {

/// Term weights for the fitting energy. Landmark and prior terms can be
/// switched off individually by setting a weight to zero.
struct FitWeights {
    double alpha_landmark = 10.0;
    double alpha_shape = 1.0;
    double alpha_texture = 1.0;
};

/// 2D landmark observations: points is L x 2 in pixel coordinates and
/// indices[i] names the model vertex that points.row(i) observes.
struct Landmarks {
    Eigen::MatrixXd points;
    std::vector<int> indices;
};

/// Bilinear samples of an image at continuous positions. in_bounds[i] is 0
/// when points.row(i) fell outside the valid interpolation domain, in which
/// case colors.row(i) is zero.
struct SampledColors {
    Eigen::MatrixXd colors;
    std::vector<std::uint8_t> in_bounds;
};

/// Per-term split of the fitting energy; the total is their sum.
struct EnergyBreakdown {
    double photometric = 0.0;
    double landmark = 0.0;
    double shape_prior = 0.0;
    double texture_prior = 0.0;

    double total() const { return photometric + landmark + shape_prior + texture_prior; }
};

/// Result of a Gauss-Newton fit. cost_history[k] is the accepted energy
/// after k steps (history[0] is the initial energy), non-increasing by
/// construction. converged means the relative decrease fell below tol
/// before max_iter; a fit that stalls under maximum damping reports
/// converged = false with the best parameters found.
struct FitReport {
    FitParams params;
    std::vector<double> cost_history;
    bool converged = false;
    int iterations = 0;
};

/// Samples image colors at M continuous (x, y) positions with bilinear
/// interpolation. Points outside [0, w-1] x [0, h-1] are flagged out of
/// bounds rather than clamped.
SampledColors sample_image(const Image& image, const Eigen::MatrixXd& points);

/// Fitting energy: squared photometric error between the image sampled at
/// visible projected vertices and the instantiated texture, plus weighted
/// landmark reprojection and Tikhonov priors scaled by inverse eigenvalues.
/// Vertices projecting outside the image are dropped from the photometric
/// sum. Throws if no vertex is visible or the landmark block is malformed.
double energy(const Image& image, const Landmarks& landmarks, const MorphableModel& model,
              const FitParams& params, const FitWeights& weights,
              EnergyBreakdown* breakdown = nullptr);

/// Gradient of energy with respect to the optimized parameters, ordered
/// [yaw, pitch, roll, tx, ty, tz, p, lambda]. Assembled from the same
/// residual system the solver uses.
Eigen::VectorXd fit_gradient(const Image& image, const Landmarks& landmarks,
                             const MorphableModel& model, const FitParams& params,
                             const FitWeights& weights);

/// Minimizes energy over shape coefficients, texture coefficients and the
/// six camera pose parameters (focal length and principal point stay
/// fixed). Levenberg-damped Gauss-Newton: steps are accepted only when the
/// energy does not increase, so the reported cost history is monotone.
FitReport gauss_newton_fit(const Image& image, const Landmarks& landmarks,
                           const MorphableModel& model, const FitParams& init,
                           const FitWeights& weights = {}, int max_iter = 50,
                           double tol = 1e-6);

/// Pose bin 1..13 for a yaw angle in radians: bin centers at -90, -75, ...,
/// +90 degrees, each bin covering [center - 7.5, center + 7.5) degrees.
/// Throws when the yaw falls outside every bin.
int pose_bin(double yaw);

/// Per-pixel mean of a stack of same-shape images.
Image mean_face(const std::vector<Image>& images);

}  // namespace uvforge
