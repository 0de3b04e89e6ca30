#pragma once

#include "uvforge/image.hpp"
#include "uvforge/model.hpp"
#include "uvforge/uv_pipeline.hpp"

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <vector>

namespace uvforge {

/// Z-buffered textured rasterization with perspective-correct barycentric UV
/// lookup and bilinear texture sampling; background black, colors clamped to
/// [0,1]. Warns on stderr if the mesh misses the frame entirely.
Image render(const MorphableModel& model, const FitParams& params, const UvMap& uv,
             int width, int height);

/// Inclusive arithmetic yaw grid in radians; the count is rounded so a span
/// that is an integer multiple of step lands exactly on both ends.
std::vector<double> yaw_grid(double lo, double hi, double step);

struct ViewSet {
    std::vector<Image> images;
    std::vector<double> yaws; // radians
};

/// Renders the textured mesh at each yaw, overriding only the camera yaw.
ViewSet synthesize_views(const MorphableModel& model, const FitParams& params, const UvMap& uv,
                         const std::vector<double>& yaws, int width, int height);

/// Seeded-uniform yaws in [-pi/2, pi/2].
ViewSet synthesize_views(const MorphableModel& model, const FitParams& params, const UvMap& uv,
                         int count, std::uint64_t seed, int width, int height);

/// A set of images of one subject summarized by the length-normalized mean of
/// their embeddings.
struct Template {
    std::vector<Image> images;
    Eigen::VectorXd descriptor;
};

using EmbedFn = std::function<Eigen::VectorXd(const Image&)>;

Template make_template(const std::vector<Image>& images, const EmbedFn& embed);

/// Cosine similarity of the unit descriptors, in [-1, 1].
double template_similarity(const Template& a, const Template& b);

/// Entry (i, j) compares A_i against B_j; templates ordered frontal,
/// three-quarter, profile.
Eigen::Matrix3d pose_similarity_matrix(const std::array<Template, 3>& a,
                                       const std::array<Template, 3>& b);

/// Element-wise mean of per-subject pose matrices.
Eigen::Matrix3d average_pose_matrices(const std::vector<Eigen::Matrix3d>& mats);

struct VerificationReport {
    std::vector<double> fold_accuracy;
    std::vector<double> fold_threshold;
    double mean = 0.0;
    double stddev = 0.0;
};

/// 10-fold cross-validated verification over precomputed pair similarities:
/// folds are assigned round-robin, each fold's threshold is the candidate
/// maximizing accuracy on the other folds (smallest on ties), evaluated on
/// the held-out fold. Predicts "same" at similarity >= threshold.
VerificationReport verification_accuracy(const std::vector<double>& similarities,
                                         const std::vector<std::uint8_t>& same, int folds = 10);

} // namespace uvforge
