#include "uvforge/synthesis.hpp"

#include "uvforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace uvforge {

Image render(const MorphableModel& model, const FitParams& params, const UvMap& uv,
             int width, int height) {
    if (width <= 0 || height <= 0)
        throw std::invalid_argument("render: frame dimensions must be positive");
    if (uv.pixels.channels != 3)
        throw std::invalid_argument("render: texture must have 3 channels");

    const Eigen::MatrixXd shape = instantiate_shape(model, params.p);
    const RasterSurface surf = rasterize_surface(shape, model.triangles, params.camera, width, height);

    Image out(width, height, 3);
    bool covered = false;
    const double us = static_cast<double>(uv.width - 1);
    const double vs = static_cast<double>(uv.height - 1);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const int t = surf.tri_at(y, x);
            if (t < 0)
                continue;
            covered = true;
            const auto& tri = model.triangles[static_cast<std::size_t>(t)];
            const std::array<double, 3>& b = surf.bary_at(y, x);
            double u = 0.0, v = 0.0;
            for (int k = 0; k < 3; ++k) {
                const auto& tc = model.uv_coords[static_cast<std::size_t>(tri[static_cast<std::size_t>(k)])];
                u += b[k] * tc[0];
                v += b[k] * tc[1];
            }
            double rgb[3];
            bilinear_sample(uv.pixels, u * us, v * vs, rgb);
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = std::clamp(rgb[c], 0.0, 1.0);
        }
    }
    if (!covered)
        std::fprintf(stderr, "render: mesh projects entirely outside the frame\n");
    return out;
}

std::vector<double> yaw_grid(double lo, double hi, double step) {
    if (!(step > 0.0) || hi < lo)
        throw std::invalid_argument("yaw_grid: need step > 0 and hi >= lo");
    const int n = static_cast<int>(std::floor((hi - lo) / step + 0.5)) + 1;
    std::vector<double> yaws(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        yaws[static_cast<std::size_t>(i)] = lo + static_cast<double>(i) * step;
    return yaws;
}

ViewSet synthesize_views(const MorphableModel& model, const FitParams& params, const UvMap& uv,
                         const std::vector<double>& yaws, int width, int height) {
    if (yaws.empty())
        throw std::invalid_argument("synthesize_views: empty yaw list");
    ViewSet views;
    views.yaws = yaws;
    views.images.reserve(yaws.size());
    FitParams view_params = params;
    for (double yaw : yaws) {
        view_params.camera.yaw = yaw;
        views.images.push_back(render(model, view_params, uv, width, height));
    }
    return views;
}

ViewSet synthesize_views(const MorphableModel& model, const FitParams& params, const UvMap& uv,
                         int count, std::uint64_t seed, int width, int height) {
    if (count <= 0)
        throw std::invalid_argument("synthesize_views: count must be positive");
    Rng rng(seed);
    std::vector<double> yaws(static_cast<std::size_t>(count));
    constexpr double kHalfPi = 1.5707963267948966;
    for (auto& yaw : yaws)
        yaw = (rng.uniform() * 2.0 - 1.0) * kHalfPi;
    return synthesize_views(model, params, uv, yaws, width, height);
}

Template make_template(const std::vector<Image>& images, const EmbedFn& embed) {
    if (images.empty())
        throw std::invalid_argument("make_template: empty image set");
    Template t;
    t.images = images;
    Eigen::VectorXd sum;
    for (const Image& im : images) {
        Eigen::VectorXd e = embed(im);
        if (sum.size() == 0)
            sum = Eigen::VectorXd::Zero(e.size());
        else if (e.size() != sum.size())
            throw std::invalid_argument("make_template: embedding dimensions disagree");
        sum += e;
    }
    sum /= static_cast<double>(images.size());
    const double norm = sum.norm();
    if (norm == 0.0)
        throw std::runtime_error("make_template: zero-norm mean embedding");
    t.descriptor = sum / norm;
    return t;
}

double template_similarity(const Template& a, const Template& b) {
    if (a.descriptor.size() == 0 || b.descriptor.size() == 0)
        throw std::invalid_argument("template_similarity: empty descriptor");
    if (a.descriptor.size() != b.descriptor.size())
        throw std::invalid_argument("template_similarity: dimension mismatch");
    return a.descriptor.dot(b.descriptor);
}

Eigen::Matrix3d pose_similarity_matrix(const std::array<Template, 3>& a,
                                       const std::array<Template, 3>& b) {
    Eigen::Matrix3d m;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            m(i, j) = template_similarity(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(j)]);
    return m;
}

Eigen::Matrix3d average_pose_matrices(const std::vector<Eigen::Matrix3d>& mats) {
    if (mats.empty())
        throw std::invalid_argument("average_pose_matrices: empty input");
    Eigen::Matrix3d sum = Eigen::Matrix3d::Zero();
    for (const auto& m : mats)
        sum += m;
    return sum / static_cast<double>(mats.size());
}

namespace {

double pair_accuracy(const std::vector<double>& sims, const std::vector<std::uint8_t>& same,
                     const std::vector<int>& idx, double threshold) {
    int correct = 0;
    for (int i : idx) {
        const bool pred = sims[static_cast<std::size_t>(i)] >= threshold;
        if (pred == (same[static_cast<std::size_t>(i)] != 0))
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Candidate thresholds: one below every train similarity, the midpoints of
// adjacent distinct values, and one above. Accuracy is piecewise constant
// between sorted train similarities so this sweep is exhaustive.
double pick_threshold(const std::vector<double>& sims, const std::vector<std::uint8_t>& same,
                      const std::vector<int>& train) {
    std::vector<double> values;
    values.reserve(train.size());
    for (int i : train)
        values.push_back(sims[static_cast<std::size_t>(i)]);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());

    std::vector<double> candidates;
    candidates.reserve(values.size() + 1);
    candidates.push_back(values.front() - 1.0);
    for (std::size_t k = 0; k + 1 < values.size(); ++k)
        candidates.push_back(0.5 * (values[k] + values[k + 1]));
    candidates.push_back(values.back() + 1.0);

    double best_thr = candidates.front();
    double best_acc = -1.0;
    for (double thr : candidates) {
        const double acc = pair_accuracy(sims, same, train, thr);
        if (acc > best_acc) {
            best_acc = acc;
            best_thr = thr;
        }
    }
    return best_thr;
}

} // namespace

VerificationReport verification_accuracy(const std::vector<double>& similarities,
                                         const std::vector<std::uint8_t>& same, int folds) {
    const int n = static_cast<int>(similarities.size());
    if (similarities.size() != same.size())
        throw std::invalid_argument("verification_accuracy: size mismatch");
    if (folds < 2)
        throw std::invalid_argument("verification_accuracy: need at least 2 folds");
    if (n < folds)
        throw std::invalid_argument("verification_accuracy: fewer pairs than folds");

    VerificationReport report;
    report.fold_accuracy.resize(static_cast<std::size_t>(folds));
    report.fold_threshold.resize(static_cast<std::size_t>(folds));
    for (int f = 0; f < folds; ++f) {
        std::vector<int> train, test;
        for (int i = 0; i < n; ++i)
            (i % folds == f ? test : train).push_back(i);
        const double thr = pick_threshold(similarities, same, train);
        report.fold_threshold[static_cast<std::size_t>(f)] = thr;
        report.fold_accuracy[static_cast<std::size_t>(f)] = pair_accuracy(similarities, same, test, thr);
    }

    double sum = 0.0;
    for (double a : report.fold_accuracy)
        sum += a;
    report.mean = sum / static_cast<double>(folds);
    double var = 0.0;
    for (double a : report.fold_accuracy)
        var += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(var / static_cast<double>(folds));
    return report;
}

} // namespace uvforge
