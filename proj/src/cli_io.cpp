#include "uvforge/cli_io.hpp"

#include "uvforge/image.hpp"
#include "uvforge/metrics.hpp"
#include "uvforge/rng.hpp"
#include "uvforge/synthesis.hpp"
#include "uvforge/uv_pipeline.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace uvforge {
namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt(int v) { return std::to_string(v); }

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& s, const std::string& what) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument(what + ": not a number: '" + s + "'");
    }
    if (pos != s.size()) throw std::invalid_argument(what + ": trailing junk in '" + s + "'");
    return v;
}

int parse_int(const std::string& s, const std::string& what) {
    const double v = parse_double(s, what);
    if (v != std::floor(v)) throw std::invalid_argument(what + ": expected an integer, got '" + s + "'");
    return static_cast<int>(v);
}

std::string join(const std::string& dir, const std::string& rel) {
    return (fs::path(dir) / rel).string();
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec || !fs::is_directory(path))
        throw std::runtime_error("cannot create directory: " + path);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.push_back("");
    return out;
}

// Yaw pose bins used for template grouping: frontal, three-quarter, profile.
const std::array<const char*, 3> kPoseNames = {"frontal", "threequarter", "profile"};

UvMap to_uvmap(Image img) {
    if (img.channels != 3) throw std::invalid_argument("uv map: expected 3 channels");
    UvMap uv(img.width, img.height);
    uv.pixels = std::move(img);
    return uv;
}

int pose_group(double yaw) {
    const double a = std::abs(yaw) / kDeg;
    if (a <= 22.5) return 0;
    if (a <= 67.5) return 1;
    return 2;
}

} // namespace

PipelineConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key or value");
        if (!kv.emplace(key, value).second)
            throw std::invalid_argument("config: duplicate key " + key);
    }

    PipelineConfig cfg;
    auto take = [&](const char* key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) return "";
        std::string v = it->second;
        kv.erase(it);
        return v;
    };

    const std::string seed_str = take("seed");
    if (seed_str.empty()) throw std::invalid_argument("config: seed must be given explicitly");
    cfg.seed = std::strtoull(seed_str.c_str(), nullptr, 10);
    cfg.model_path = take("model.path");
    if (cfg.model_path.empty()) throw std::invalid_argument("config: model.path is required");
    cfg.out_dir = take("out.dir");
    if (cfg.out_dir.empty()) throw std::invalid_argument("config: out.dir is required");
    cfg.dataset_dir = take("dataset.dir");
    if (cfg.dataset_dir.empty()) cfg.dataset_dir = join(cfg.out_dir, "dataset");

    auto num = [&](const char* key, double dflt) {
        const std::string v = take(key);
        return v.empty() ? dflt : parse_double(v, std::string("config ") + key);
    };
    auto integer = [&](const char* key, int dflt) {
        const std::string v = take(key);
        return v.empty() ? dflt : parse_int(v, std::string("config ") + key);
    };

    cfg.dataset_identities = integer("dataset.identities", cfg.dataset_identities);
    cfg.dataset_views = integer("dataset.views", cfg.dataset_views);
    cfg.uv_size = integer("uv.size", cfg.uv_size);
    cfg.image_size = integer("image.size", cfg.image_size);
    cfg.fit_iterations = integer("fit.iterations", cfg.fit_iterations);
    cfg.fit_weights.alpha_landmark = num("fit.alpha_landmark", cfg.fit_weights.alpha_landmark);
    cfg.fit_weights.alpha_shape = num("fit.alpha_shape", cfg.fit_weights.alpha_shape);
    cfg.fit_weights.alpha_texture = num("fit.alpha_texture", cfg.fit_weights.alpha_texture);
    cfg.train.epochs = integer("train.epochs", cfg.train.epochs);
    cfg.train.batch_size = integer("train.batch", cfg.train.batch_size);
    cfg.train.learning_rate = num("train.lr", cfg.train.learning_rate);
    cfg.train.lambda1 = num("train.lambda1", cfg.train.lambda1);
    cfg.train.lambda2 = num("train.lambda2", cfg.train.lambda2);
    cfg.train.lambda3 = num("train.lambda3", cfg.train.lambda3);
    cfg.embed_steps = integer("embed.steps", cfg.embed_steps);
    cfg.yaw_lo_deg = num("synthesis.yaw_lo", cfg.yaw_lo_deg);
    cfg.yaw_hi_deg = num("synthesis.yaw_hi", cfg.yaw_hi_deg);
    cfg.yaw_step_deg = num("synthesis.yaw_step", cfg.yaw_step_deg);

    if (!kv.empty()) throw std::invalid_argument("config: unknown key " + kv.begin()->first);
    if (!fs::exists(cfg.model_path))
        throw std::runtime_error("config: model.path does not exist: " + cfg.model_path);
    return cfg;
}

void save_fit_params(const std::string& path, const FitParams& params) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("fit params: cannot write " + path);
    out << "uvforge-fitparams 1\n";
    out << "p " << params.p.size();
    for (Eigen::Index i = 0; i < params.p.size(); ++i) out << " " << fmt(params.p[i]);
    out << "\nlambda " << params.lambda.size();
    for (Eigen::Index i = 0; i < params.lambda.size(); ++i) out << " " << fmt(params.lambda[i]);
    const Camera& c = params.camera;
    out << "\ncamera " << fmt(c.yaw) << " " << fmt(c.pitch) << " " << fmt(c.roll) << " "
        << fmt(c.translation.x()) << " " << fmt(c.translation.y()) << " "
        << fmt(c.translation.z()) << " " << fmt(c.focal) << " " << fmt(c.cx) << " " << fmt(c.cy)
        << "\n";
    if (!out) throw std::runtime_error("fit params: write failed: " + path);
}

FitParams load_fit_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("fit params: cannot open " + path);
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "uvforge-fitparams" || version != 1)
        throw std::runtime_error("fit params: bad header in " + path);
    FitParams params;
    auto read_vec = [&](const char* tag) {
        std::string name;
        Eigen::Index n = 0;
        in >> name >> n;
        if (!in || name != tag || n < 0)
            throw std::runtime_error(std::string("fit params: bad ") + tag + " block in " + path);
        Eigen::VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) in >> v[i];
        return v;
    };
    params.p = read_vec("p");
    params.lambda = read_vec("lambda");
    std::string tag;
    Camera& c = params.camera;
    in >> tag >> c.yaw >> c.pitch >> c.roll >> c.translation.x() >> c.translation.y() >>
        c.translation.z() >> c.focal >> c.cx >> c.cy;
    if (!in || tag != "camera") throw std::runtime_error("fit params: bad camera line in " + path);
    return params;
}

void save_landmarks(const std::string& path, const Landmarks& landmarks) {
    if (landmarks.points.rows() != static_cast<Eigen::Index>(landmarks.indices.size()) ||
        (landmarks.points.rows() > 0 && landmarks.points.cols() != 2))
        throw std::invalid_argument("landmarks: points/indices mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("landmarks: cannot write " + path);
    for (Eigen::Index i = 0; i < landmarks.points.rows(); ++i)
        out << landmarks.indices[static_cast<std::size_t>(i)] << " " << fmt(landmarks.points(i, 0))
            << " " << fmt(landmarks.points(i, 1)) << "\n";
    if (!out) throw std::runtime_error("landmarks: write failed: " + path);
}

Landmarks load_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("landmarks: cannot open " + path);
    std::vector<int> idx;
    std::vector<double> xs, ys;
    int i = 0;
    double x = 0.0, y = 0.0;
    while (in >> i >> x >> y) {
        idx.push_back(i);
        xs.push_back(x);
        ys.push_back(y);
    }
    Landmarks lm;
    lm.indices = idx;
    lm.points.resize(static_cast<Eigen::Index>(xs.size()), 2);
    for (std::size_t k = 0; k < xs.size(); ++k) {
        lm.points(static_cast<Eigen::Index>(k), 0) = xs[k];
        lm.points(static_cast<Eigen::Index>(k), 1) = ys[k];
    }
    return lm;
}

void save_manifest(const DatasetManifest& manifest) {
    const std::string path = join(manifest.dir, "manifest.csv");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    out << "identity,yaw,image,landmarks,uv,split\n";
    for (const ManifestRow& r : manifest.rows)
        out << r.identity << "," << fmt(r.yaw) << "," << r.image << "," << r.landmarks << ","
            << r.uv << "," << r.split << "\n";
    if (!out) throw std::runtime_error("manifest: write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    DatasetManifest m;
    m.dir = fs::path(path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";
    std::string line;
    if (!std::getline(in, line) || trim(line) != "identity,yaw,image,landmarks,uv,split")
        throw std::runtime_error("manifest: bad header in " + path);
    std::map<int, std::string> split_of;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto f = split(trim(line), ',');
        if (f.size() != 6)
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected 6 fields");
        ManifestRow r;
        r.identity = parse_int(f[0], "manifest identity");
        r.yaw = parse_double(f[1], "manifest yaw");
        r.image = f[2];
        r.landmarks = f[3];
        r.uv = f[4];
        r.split = f[5];
        if (r.split != "train" && r.split != "test")
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": bad split tag '" +
                                     r.split + "'");
        auto it = split_of.find(r.identity);
        if (it == split_of.end())
            split_of.emplace(r.identity, r.split);
        else if (it->second != r.split)
            throw std::runtime_error("manifest: identity " + std::to_string(r.identity) +
                                     " appears in both splits");
        for (const std::string& rel : {r.image, r.landmarks, r.uv})
            if (!fs::exists(join(m.dir, rel)))
                throw std::runtime_error("manifest: missing file " + join(m.dir, rel));
        m.rows.push_back(std::move(r));
    }
    return m;
}

DatasetManifest gen_dataset(const MorphableModel& model, int n_identities,
                            int views_per_identity, std::uint64_t seed,
                            const std::string& out_dir, int uv_size, int image_size) {
    if (n_identities < 1 || views_per_identity < 1)
        throw std::invalid_argument("gen_dataset: need at least one identity and one view");
    ensure_dir(out_dir);
    ensure_dir(join(out_dir, "images"));
    ensure_dir(join(out_dir, "landmarks"));
    ensure_dir(join(out_dir, "uv"));

    DatasetManifest manifest;
    manifest.dir = out_dir;
    const int n_train = (n_identities * 9) / 10;
    char name[128];
    for (int id = 0; id < n_identities; ++id) {
        FitParams base = sample_identity(model, mix_seed(seed, 101 + static_cast<std::uint64_t>(id)));
        base.camera = default_camera(image_size, image_size);
        const UvMap uv = bake_texture_uv(model, instantiate_texture(model, base.lambda), uv_size);
        std::snprintf(name, sizeof(name), "uv/id_%03d.ppm", id);
        const std::string uv_rel = name;
        write_ppm(join(out_dir, uv_rel), uv.pixels);

        const Eigen::MatrixXd shape = instantiate_shape(model, base.p);
        Eigen::MatrixXd lm_vertices(static_cast<Eigen::Index>(model.landmark_indices.size()), 3);
        for (std::size_t k = 0; k < model.landmark_indices.size(); ++k)
            lm_vertices.row(static_cast<Eigen::Index>(k)) = shape.row(model.landmark_indices[k]);

        Rng yaw_rng(mix_seed(seed, 501 + static_cast<std::uint64_t>(id)));
        for (int v = 0; v < views_per_identity; ++v) {
            FitParams pv = base;
            pv.camera.yaw = yaw_rng.uniform(-1.5707963267948966, 1.5707963267948966);
            const Image img = render(model, pv, uv, image_size, image_size);
            std::snprintf(name, sizeof(name), "images/id_%03d_v%02d.ppm", id, v);
            const std::string img_rel = name;
            write_ppm(join(out_dir, img_rel), img);

            Landmarks lm;
            lm.indices = model.landmark_indices;
            lm.points = project(lm_vertices, pv.camera);
            std::snprintf(name, sizeof(name), "landmarks/id_%03d_v%02d.txt", id, v);
            const std::string lm_rel = name;
            save_landmarks(join(out_dir, lm_rel), lm);

            ManifestRow row;
            row.identity = id;
            row.yaw = pv.camera.yaw;
            row.image = img_rel;
            row.landmarks = lm_rel;
            row.uv = uv_rel;
            row.split = id < n_train ? "train" : "test";
            manifest.rows.push_back(std::move(row));
        }
    }
    save_manifest(manifest);
    return manifest;
}

namespace {

// Fitted and unwrapped dataset, the shared substrate of train/eval stages.
struct Prepared {
    struct Item {
        ManifestRow row;
        FitReport fit;
        UvMap uv;
        VisibilityMask mask;
        Image gt; // ground-truth UV chart
    };
    std::vector<Item> items;
    std::vector<int> train_ids, test_ids; // unique, manifest order
    std::vector<TrainSample> train_samples;
    double mean_fit_cost = 0.0;
    double mean_fit_iterations = 0.0;
};

// The recorded yaw seeds the camera; coefficients start from the prior mean.
Prepared prepare(const MorphableModel& model, const DatasetManifest& manifest,
                 const FitWeights& weights, int fit_iterations, int uv_size,
                 std::uint64_t seed) {
    if (manifest.rows.empty()) throw std::runtime_error("prepare: empty manifest");
    Prepared prep;
    std::map<int, int> label_of;
    for (std::size_t r = 0; r < manifest.rows.size(); ++r) {
        const ManifestRow& row = manifest.rows[r];
        const Image img = read_ppm(join(manifest.dir, row.image));
        const Landmarks lm = load_landmarks(join(manifest.dir, row.landmarks));
        FitParams init;
        init.p = Eigen::VectorXd::Zero(model.num_shape_modes());
        init.lambda = Eigen::VectorXd::Zero(model.num_texture_modes());
        init.camera = default_camera(img.width, img.height);
        init.camera.yaw = row.yaw;
        Prepared::Item item;
        item.row = row;
        item.fit = gauss_newton_fit(img, lm, model, init, weights, fit_iterations);
        extract_uv(img, model, item.fit.params, uv_size, &item.uv, &item.mask);
        item.gt = read_ppm(join(manifest.dir, row.uv));
        prep.mean_fit_cost += item.fit.cost_history.back();
        prep.mean_fit_iterations += item.fit.iterations;

        auto& ids = row.split == "train" ? prep.train_ids : prep.test_ids;
        if (std::find(ids.begin(), ids.end(), row.identity) == ids.end())
            ids.push_back(row.identity);
        if (row.split == "train") {
            if (!label_of.count(row.identity))
                label_of[row.identity] = static_cast<int>(prep.train_ids.size()) - 1;
            TrainSample s;
            s.input = make_generator_input(item.uv, item.mask,
                                           mix_seed(seed, 7000 + static_cast<std::uint64_t>(r)));
            s.target = item.gt;
            s.label = label_of[row.identity];
            prep.train_samples.push_back(std::move(s));
        }
        prep.items.push_back(std::move(item));
    }
    prep.mean_fit_cost /= static_cast<double>(prep.items.size());
    prep.mean_fit_iterations /= static_cast<double>(prep.items.size());
    return prep;
}

const Prepared::Item& first_item_of(const Prepared& prep, int identity) {
    for (const auto& item : prep.items)
        if (item.row.identity == identity) return item;
    throw std::logic_error("first_item_of: identity not in dataset");
}

// Renders per-identity views from the ground-truth charts for classifier
// pretraining; yaw range matches the embedder's operating envelope.
std::vector<EmbedSample> embed_data(const MorphableModel& model, const Prepared& prep,
                                    std::uint64_t seed) {
    constexpr int kViewsPerId = 8;
    std::vector<EmbedSample> data;
    for (std::size_t k = 0; k < prep.train_ids.size(); ++k) {
        const auto& item = first_item_of(prep, prep.train_ids[k]);
        const UvMap gt_uv = to_uvmap(item.gt);
        Rng rng(mix_seed(seed, 9000 + static_cast<std::uint64_t>(prep.train_ids[k])));
        for (int v = 0; v < kViewsPerId; ++v) {
            FitParams pv = item.fit.params;
            pv.camera = default_camera(EmbedNet::kInputSize, EmbedNet::kInputSize);
            pv.camera.yaw = rng.uniform(-1.2, 1.2);
            EmbedSample s;
            s.image = render(model, pv, gt_uv, EmbedNet::kInputSize, EmbedNet::kInputSize);
            s.label = static_cast<int>(k);
            data.push_back(std::move(s));
        }
    }
    return data;
}

struct CompletionOutcome {
    std::map<int, UvMap> completed; // first item per identity
    double psnr_mean = 0.0;
    double psnr_baseline = 0.0;
    double ssim_mean = 0.0;
};

CompletionOutcome complete_all(const MorphableModel& model, const Prepared& prep,
                               const GeneratorNet& generator, std::uint64_t seed,
                               const std::string& artifacts_dir) {
    (void)model;
    if (!artifacts_dir.empty()) ensure_dir(join(artifacts_dir, "completed"));
    CompletionOutcome out;
    int n_test = 0;
    char name[128];
    for (std::size_t r = 0; r < prep.items.size(); ++r) {
        const auto& item = prep.items[r];
        const std::uint64_t s = mix_seed(seed, 4000 + static_cast<std::uint64_t>(r));
        const bool is_test = item.row.split == "test";
        const bool keep = !out.completed.count(item.row.identity);
        if (!is_test && !keep) continue;
        const UvMap completed = complete(generator, item.uv, item.mask, s);
        if (keep) out.completed.emplace(item.row.identity, completed);
        if (!is_test) continue;
        ++n_test;
        out.psnr_mean += psnr(completed.pixels, item.gt);
        out.ssim_mean += ssim(completed.pixels, item.gt);
        const Image input = make_generator_input(item.uv, item.mask, s);
        Image noisy(item.uv.width, item.uv.height, 3);
        for (int y = 0; y < item.uv.height; ++y)
            for (int x = 0; x < item.uv.width; ++x)
                for (int c = 0; c < 3; ++c) noisy.at(y, x, c) = input.at(y, x, c);
        out.psnr_baseline += psnr(noisy, item.gt);
        if (!artifacts_dir.empty()) {
            std::snprintf(name, sizeof(name), "completed/id_%03d_v%02d.ppm", item.row.identity,
                          n_test - 1);
            write_ppm(join(artifacts_dir, name), completed.pixels);
        }
    }
    if (n_test == 0) throw std::runtime_error("complete: test split is empty");
    out.psnr_mean /= n_test;
    out.psnr_baseline /= n_test;
    out.ssim_mean /= n_test;
    return out;
}

struct EvalOutcome {
    Eigen::Matrix3d simmatrix = Eigen::Matrix3d::Zero();
    VerificationReport verification;
    int verification_identities = 0;
};

std::array<Template, 3> pose_templates(const ViewSet& views, const EmbedFn& embed) {
    std::array<std::vector<Image>, 3> groups;
    for (std::size_t i = 0; i < views.images.size(); ++i)
        groups[static_cast<std::size_t>(pose_group(views.yaws[i]))].push_back(views.images[i]);
    for (std::size_t g = 0; g < 3; ++g)
        if (groups[g].empty())
            throw std::runtime_error(std::string("synthesize: yaw grid leaves the ") +
                                     kPoseNames[g] + " pose group empty");
    return {make_template(groups[0], embed), make_template(groups[1], embed),
            make_template(groups[2], embed)};
}

EvalOutcome synthesize_and_eval(const MorphableModel& model, const Prepared& prep,
                                const CompletionOutcome& completion, const EmbedNet& embedder,
                                const std::vector<double>& yaws, int image_size,
                                const std::string& artifacts_dir) {
    const EmbedFn embed = [&](const Image& img) {
        const auto batch = image_batch({&img});
        const auto e = embedder.embed(batch);
        Eigen::VectorXd v(EmbedNet::kEmbedDim);
        for (int j = 0; j < EmbedNet::kEmbedDim; ++j) v[j] = e->values[j];
        return v;
    };

    // Completed-texture templates compare against ground-truth-texture ones.
    std::vector<int> all_ids = prep.train_ids;
    all_ids.insert(all_ids.end(), prep.test_ids.begin(), prep.test_ids.end());
    std::map<int, std::array<Template, 3>> synth_t, gt_t;
    char name[128];
    for (int id : all_ids) {
        const auto& item = first_item_of(prep, id);
        FitParams pv = item.fit.params;
        pv.camera = default_camera(EmbedNet::kInputSize, EmbedNet::kInputSize);
        const UvMap& completed = completion.completed.at(id);
        const UvMap gt_uv = to_uvmap(item.gt);
        const ViewSet synth = synthesize_views(model, pv, completed, yaws,
                                               EmbedNet::kInputSize, EmbedNet::kInputSize);
        const ViewSet gt = synthesize_views(model, pv, gt_uv, yaws, EmbedNet::kInputSize,
                                            EmbedNet::kInputSize);
        synth_t.emplace(id, pose_templates(synth, embed));
        gt_t.emplace(id, pose_templates(gt, embed));
        if (!artifacts_dir.empty() &&
            std::find(prep.test_ids.begin(), prep.test_ids.end(), id) != prep.test_ids.end()) {
            std::snprintf(name, sizeof(name), "synth/id_%03d", id);
            ensure_dir(join(artifacts_dir, name));
            const ViewSet full = synthesize_views(model, item.fit.params, completed, yaws,
                                                  image_size, image_size);
            for (std::size_t v = 0; v < full.images.size(); ++v) {
                std::snprintf(name, sizeof(name), "synth/id_%03d/yaw%+04.0f.ppm", id,
                              full.yaws[v] / kDeg);
                write_ppm(join(artifacts_dir, name), full.images[v]);
            }
        }
    }

    EvalOutcome out;
    std::vector<Eigen::Matrix3d> mats;
    for (int id : prep.test_ids) mats.push_back(pose_similarity_matrix(synth_t.at(id), gt_t.at(id)));
    out.simmatrix = average_pose_matrices(mats);

    // Frontal-profile verification: ground-truth frontal gallery against
    // synthesized profile probes. Falls back to every identity when the test
    // split is too small to form cross pairs.
    const std::vector<int>& vids = prep.test_ids.size() >= 2 ? prep.test_ids : all_ids;
    std::vector<double> sims;
    std::vector<std::uint8_t> same;
    for (std::size_t i = 0; i < vids.size(); ++i)
        for (std::size_t j = 0; j < vids.size(); ++j) {
            sims.push_back(template_similarity(gt_t.at(vids[i])[0], synth_t.at(vids[j])[2]));
            same.push_back(i == j ? 1 : 0);
        }
    out.verification = verification_accuracy(sims, same,
                                             std::min<int>(10, static_cast<int>(sims.size())));
    out.verification_identities = static_cast<int>(vids.size());
    return out;
}

template <typename F>
auto stage(const char* tag, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("[") + tag + "] " + e.what());
    }
}

} // namespace

const std::string* PipelineReport::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

std::string PipelineReport::text() const {
    std::string out = "uvforge report\n";
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    return out;
}

const std::vector<std::string>& report_metric_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k = {"fit.mean_final_cost", "train.final.l_gen",
                                      "train.final.l_total", "eval.psnr.mean",
                                      "eval.psnr.baseline",  "eval.ssim.mean",
                                      "eval.verification.mean", "eval.verification.stddev"};
        for (const char* a : kPoseNames)
            for (const char* b : kPoseNames)
                k.push_back(std::string("eval.similarity.") + a + "." + b);
        return k;
    }();
    return keys;
}

PipelineReport run_pipeline(const PipelineConfig& config) {
    ensure_dir(config.out_dir);
    const MorphableModel model = stage("load-model", [&] { return load_model(config.model_path); });

    const std::string manifest_path = join(config.dataset_dir, "manifest.csv");
    const DatasetManifest manifest = stage("dataset", [&] {
        if (fs::exists(manifest_path)) return load_manifest(manifest_path);
        return gen_dataset(model, config.dataset_identities, config.dataset_views,
                           mix_seed(config.seed, 1), config.dataset_dir, config.uv_size,
                           config.image_size);
    });

    const Prepared prep = stage("fit", [&] {
        return prepare(model, manifest, config.fit_weights, config.fit_iterations, config.uv_size,
                       mix_seed(config.seed, 2));
    });

    const EmbedNet embedder = stage("embed", [&] {
        if (prep.train_ids.size() < 2)
            throw std::runtime_error("need at least 2 train identities, have " +
                                     std::to_string(prep.train_ids.size()));
        return pretrain_embedder(embed_data(model, prep, mix_seed(config.seed, 3)),
                                 static_cast<int>(prep.train_ids.size()), config.embed_steps,
                                 mix_seed(config.seed, 4));
    });

    TrainConfig tcfg = config.train;
    tcfg.seed = mix_seed(config.seed, 5);
    const TrainResult result = stage("train", [&] {
        return train(prep.train_samples, tcfg.lambda3 > 0.0 ? &embedder : nullptr, tcfg);
    });
    const int batches = (static_cast<int>(prep.train_samples.size()) + tcfg.batch_size - 1) /
                        tcfg.batch_size;
    save_checkpoint(join(config.out_dir, "generator.uvn"), result, tcfg.seed,
                    tcfg.epochs * batches);
    save_embedder(join(config.out_dir, "embedder.uvn"), embedder);
    write_loss_curves(join(config.out_dir, "loss_curves.csv"), result.curves);

    const CompletionOutcome completion = stage("complete", [&] {
        return complete_all(model, prep, result.generator, mix_seed(config.seed, 6),
                            config.out_dir);
    });

    const std::vector<double> yaws = yaw_grid(config.yaw_lo_deg * kDeg, config.yaw_hi_deg * kDeg,
                                              config.yaw_step_deg * kDeg);
    const EvalOutcome ev = stage("synthesize", [&] {
        return synthesize_and_eval(model, prep, completion, embedder, yaws, config.image_size,
                                   config.out_dir);
    });

    PipelineReport report = stage("eval", [&] {
        PipelineReport rep;
        auto put = [&](const std::string& k, const std::string& v) { rep.entries.emplace_back(k, v); };
        put("config.seed", std::to_string(config.seed));
        put("dataset.identities", fmt(static_cast<int>(prep.train_ids.size() + prep.test_ids.size())));
        put("dataset.rows", fmt(static_cast<int>(manifest.rows.size())));
        put("dataset.train_rows", fmt(static_cast<int>(prep.train_samples.size())));
        put("fit.mean_final_cost", fmt(prep.mean_fit_cost));
        put("fit.mean_iterations", fmt(prep.mean_fit_iterations));
        const LossRecord& last = result.curves.back();
        put("train.epochs", fmt(tcfg.epochs));
        put("train.final.l_gen", fmt(last.l_gen));
        put("train.final.l_adv_global", fmt(last.l_adv_global));
        put("train.final.l_adv_local", fmt(last.l_adv_local));
        put("train.final.l_id", fmt(last.l_id));
        put("train.final.l_total", fmt(last.l_total));
        put("embed.train_accuracy", fmt(embedder.train_accuracy));
        put("embed.converged", embedder.converged ? "1" : "0");
        put("eval.psnr.mean", fmt(completion.psnr_mean));
        put("eval.psnr.baseline", fmt(completion.psnr_baseline));
        put("eval.ssim.mean", fmt(completion.ssim_mean));
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                put(std::string("eval.similarity.") + kPoseNames[a] + "." + kPoseNames[b],
                    fmt(ev.simmatrix(a, b)));
        put("eval.verification.mean", fmt(ev.verification.mean));
        put("eval.verification.stddev", fmt(ev.verification.stddev));
        put("eval.verification.identities", fmt(ev.verification_identities));
        for (const std::string& key : report_metric_keys())
            if (!rep.find(key)) throw std::logic_error("report missing metric key " + key);
        return rep;
    });

    std::ofstream out(join(config.out_dir, "report.txt"));
    if (!out) throw std::runtime_error("[eval] cannot write report.txt");
    out << report.text();
    return report;
}

namespace {

std::uint64_t resolve_seed(const CLI::Option* seed_opt, std::uint64_t seed_flag) {
    if (seed_opt->count() > 0) return seed_flag;
    if (const char* env = std::getenv("UVFORGE_SEED")) return std::strtoull(env, nullptr, 10);
    return seed_flag;
}

VisibilityMask read_mask(const std::string& path) {
    VisibilityMask mask;
    const auto gray = read_pgm(path, &mask.width, &mask.height);
    mask.visible.resize(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) mask.visible[i] = gray[i] > 0 ? 1 : 0;
    return mask;
}

void write_mask(const std::string& path, const VisibilityMask& mask) {
    std::vector<std::uint8_t> gray(mask.visible.size());
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.visible[i] ? 255 : 0;
    write_pgm(path, gray, mask.width, mask.height);
}

UvMap read_uv(const std::string& path) { return to_uvmap(read_ppm(path)); }

} // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"uvforge: morphable-model fitting, UV completion and pose synthesis"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    int n_vertices = 2000, n_shape = 20, n_texture = 20;
    int identities = 10, views = 5, uv_size = 64, image_size = 128;
    int fit_iters = 12, embed_steps = 600, synth_size = 128;
    double init_yaw_deg = 0.0, yaw_lo = -90.0, yaw_hi = 90.0, yaw_step = 45.0;
    bool raw_output = false;
    std::string out_path, obj_path, model_path, image_path, landmarks_path, params_path;
    std::string manifest_path, checkpoint_path, embedder_path, uv_path, mask_path, out_dir;
    std::string config_path, protocol = "frontal-profile";
    TrainConfig tc;

    auto* genmodel = app.add_subcommand("genmodel", "Generate a synthetic morphable model");
    auto* genmodel_seed = genmodel->add_option("--seed", seed, "Random seed");
    genmodel->add_option("--vertices", n_vertices, "Approximate vertex count");
    genmodel->add_option("--shape-modes", n_shape, "Number of shape modes");
    genmodel->add_option("--texture-modes", n_texture, "Number of texture modes");
    genmodel->add_option("--out", out_path, "Output model archive path")->required();
    genmodel->add_option("--obj", obj_path, "Optional OBJ dump of the mean shape");

    auto* gendata = app.add_subcommand("gendata", "Render a synthetic labeled dataset");
    auto* gendata_seed = gendata->add_option("--seed", seed, "Random seed");
    gendata->add_option("--model", model_path, "Model archive")->required();
    gendata->add_option("--identities", identities, "Number of identities");
    gendata->add_option("--views", views, "Views per identity");
    gendata->add_option("--uv-size", uv_size, "Ground-truth UV resolution");
    gendata->add_option("--image-size", image_size, "Rendered image resolution");
    gendata->add_option("--out", out_dir, "Output dataset directory")->required();

    auto* fit = app.add_subcommand("fit", "Fit the model to one image");
    fit->add_option("--model", model_path, "Model archive")->required();
    fit->add_option("--image", image_path, "Input image (PPM)")->required();
    fit->add_option("--landmarks", landmarks_path, "Landmark file (vertex x y lines)");
    fit->add_option("--init-yaw", init_yaw_deg, "Initial yaw in degrees");
    fit->add_option("--iters", fit_iters, "Maximum iterations");
    fit->add_option("--out", out_path, "Output fit parameter file")->required();

    auto* extract = app.add_subcommand("extract-uv", "Unwrap visible texture into UV space");
    extract->add_option("--model", model_path, "Model archive")->required();
    extract->add_option("--image", image_path, "Input image (PPM)")->required();
    extract->add_option("--params", params_path, "Fit parameter file")->required();
    extract->add_option("--size", uv_size, "UV resolution");
    extract->add_option("--out-uv", uv_path, "Output UV map (PPM)")->required();
    extract->add_option("--out-mask", mask_path, "Output visibility mask (PGM)");

    auto* train_cmd = app.add_subcommand("train", "Train the completion network on a dataset");
    auto* train_seed = train_cmd->add_option("--seed", seed, "Random seed");
    train_cmd->add_option("--model", model_path, "Model archive")->required();
    train_cmd->add_option("--manifest", manifest_path, "Dataset manifest.csv")->required();
    train_cmd->add_option("--out", checkpoint_path, "Output checkpoint path")->required();
    train_cmd->add_option("--epochs", tc.epochs, "Training epochs");
    train_cmd->add_option("--batch", tc.batch_size, "Batch size");
    train_cmd->add_option("--lr", tc.learning_rate, "Learning rate");
    train_cmd->add_option("--l1", tc.lambda1, "Global adversarial weight");
    train_cmd->add_option("--l2", tc.lambda2, "Local adversarial weight");
    train_cmd->add_option("--l3", tc.lambda3, "Identity preservation weight");
    train_cmd->add_option("--uv-size", uv_size, "UV resolution");
    train_cmd->add_option("--fit-iters", fit_iters, "Fit iterations per image");
    train_cmd->add_option("--embed-steps", embed_steps, "Embedder pretraining steps");
    train_cmd->add_option("--out-embedder", embedder_path, "Output embedder checkpoint");
    train_cmd->add_option("--curves", out_path, "Output loss curve CSV");

    auto* complete_cmd = app.add_subcommand("complete", "Complete a masked UV map");
    auto* complete_seed = complete_cmd->add_option("--seed", seed, "Noise seed");
    complete_cmd->add_option("--checkpoint", checkpoint_path, "Generator checkpoint")->required();
    complete_cmd->add_option("--uv", uv_path, "Input UV map (PPM)")->required();
    complete_cmd->add_option("--mask", mask_path, "Visibility mask (PGM)")->required();
    complete_cmd->add_option("--out", out_path, "Output completed UV (PPM)")->required();
    complete_cmd->add_flag("--raw", raw_output, "Skip compositing visible texels");

    auto* synth = app.add_subcommand("synthesize", "Render the completed face at a yaw sweep");
    synth->add_option("--model", model_path, "Model archive")->required();
    synth->add_option("--params", params_path, "Fit parameter file")->required();
    synth->add_option("--uv", uv_path, "Completed UV map (PPM)")->required();
    synth->add_option("--out-dir", out_dir, "Output directory")->required();
    synth->add_option("--lo", yaw_lo, "Start yaw (degrees)");
    synth->add_option("--hi", yaw_hi, "End yaw (degrees)");
    synth->add_option("--step", yaw_step, "Yaw step (degrees)");
    synth->add_option("--size", synth_size, "Rendered resolution");

    auto* eval_cmd = app.add_subcommand("eval", "Run a recognition protocol on a dataset");
    auto* eval_seed = eval_cmd->add_option("--seed", seed, "Random seed");
    eval_cmd->add_option("--model", model_path, "Model archive")->required();
    eval_cmd->add_option("--manifest", manifest_path, "Dataset manifest.csv")->required();
    eval_cmd->add_option("--checkpoint", checkpoint_path, "Generator checkpoint")->required();
    eval_cmd->add_option("--embedder", embedder_path, "Embedder checkpoint (pretrained when absent)");
    eval_cmd->add_option("--protocol", protocol, "frontal-profile or pose-matrix");
    eval_cmd->add_option("--uv-size", uv_size, "UV resolution");
    eval_cmd->add_option("--fit-iters", fit_iters, "Fit iterations per image");
    eval_cmd->add_option("--embed-steps", embed_steps, "Embedder pretraining steps");
    eval_cmd->add_option("--out", out_path, "Optional report file");

    auto* pipeline = app.add_subcommand("pipeline", "Run the full experiment from a config file");
    pipeline->add_option("--config", config_path, "Flat key=value config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (genmodel->parsed()) {
            const auto s = resolve_seed(genmodel_seed, seed);
            const auto model = make_synthetic_model(s, n_vertices, n_shape, n_texture);
            save_model(out_path, model);
            if (!obj_path.empty())
                export_obj(obj_path,
                           instantiate_shape(model, Eigen::VectorXd::Zero(model.num_shape_modes())),
                           model);
            std::printf("model: %d vertices, %d shape modes, %d texture modes -> %s\n",
                        model.num_vertices(), model.num_shape_modes(), model.num_texture_modes(),
                        out_path.c_str());
        } else if (gendata->parsed()) {
            const auto model = load_model(model_path);
            const auto manifest = gen_dataset(model, identities, views,
                                              resolve_seed(gendata_seed, seed), out_dir, uv_size,
                                              image_size);
            std::printf("dataset: %d identities, %zu rows -> %s\n", identities,
                        manifest.rows.size(), join(out_dir, "manifest.csv").c_str());
        } else if (fit->parsed()) {
            const auto model = load_model(model_path);
            const Image img = read_ppm(image_path);
            Landmarks lm;
            lm.points.resize(0, 2);
            if (!landmarks_path.empty()) lm = load_landmarks(landmarks_path);
            FitParams init;
            init.p = Eigen::VectorXd::Zero(model.num_shape_modes());
            init.lambda = Eigen::VectorXd::Zero(model.num_texture_modes());
            init.camera = default_camera(img.width, img.height);
            init.camera.yaw = init_yaw_deg * kDeg;
            const FitReport rep = gauss_newton_fit(img, lm, model, init, {}, fit_iters);
            save_fit_params(out_path, rep.params);
            std::printf("fit: cost %.6g -> %.6g in %d iterations (%s) -> %s\n",
                        rep.cost_history.front(), rep.cost_history.back(), rep.iterations,
                        rep.converged ? "converged" : "not converged", out_path.c_str());
        } else if (extract->parsed()) {
            const auto model = load_model(model_path);
            const Image img = read_ppm(image_path);
            const FitParams params = load_fit_params(params_path);
            UvMap uv;
            VisibilityMask mask;
            extract_uv(img, model, params, uv_size, &uv, &mask);
            write_ppm(uv_path, uv.pixels);
            if (!mask_path.empty()) write_mask(mask_path, mask);
            std::printf("extract-uv: %dx%d, %.1f%% masked -> %s\n", uv.width, uv.height,
                        100.0 * mask_fraction(mask), uv_path.c_str());
        } else if (train_cmd->parsed()) {
            const auto model = load_model(model_path);
            const auto manifest = load_manifest(manifest_path);
            const std::uint64_t s = resolve_seed(train_seed, seed);
            const Prepared prep = prepare(model, manifest, {}, fit_iters, uv_size, mix_seed(s, 2));
            EmbedNet* embedder = nullptr;
            EmbedNet trained_embedder(0, 2);
            if (tc.lambda3 > 0.0) {
                if (prep.train_ids.size() < 2)
                    throw std::runtime_error("train: identity loss needs at least 2 train identities");
                trained_embedder = pretrain_embedder(embed_data(model, prep, mix_seed(s, 3)),
                                                     static_cast<int>(prep.train_ids.size()),
                                                     embed_steps, mix_seed(s, 4));
                embedder = &trained_embedder;
            }
            tc.seed = mix_seed(s, 5);
            const TrainResult result = train(prep.train_samples, embedder, tc);
            const int batches = (static_cast<int>(prep.train_samples.size()) + tc.batch_size - 1) /
                                tc.batch_size;
            save_checkpoint(checkpoint_path, result, tc.seed, tc.epochs * batches);
            if (embedder && !embedder_path.empty()) save_embedder(embedder_path, *embedder);
            if (!out_path.empty()) write_loss_curves(out_path, result.curves);
            const LossRecord& last = result.curves.back();
            std::printf("train: %zu samples, %d epochs, final l_gen %.6g l_total %.6g -> %s\n",
                        prep.train_samples.size(), tc.epochs, last.l_gen, last.l_total,
                        checkpoint_path.c_str());
        } else if (complete_cmd->parsed()) {
            const Checkpoint ckpt = load_checkpoint(checkpoint_path);
            const UvMap uv = read_uv(uv_path);
            const VisibilityMask mask = read_mask(mask_path);
            const UvMap out = complete(ckpt.nets.generator, uv, mask,
                                       resolve_seed(complete_seed, seed), !raw_output);
            write_ppm(out_path, out.pixels);
            std::printf("complete: %dx%d, %.1f%% filled -> %s\n", out.width, out.height,
                        100.0 * mask_fraction(mask), out_path.c_str());
        } else if (synth->parsed()) {
            const auto model = load_model(model_path);
            const FitParams params = load_fit_params(params_path);
            const UvMap uv = read_uv(uv_path);
            ensure_dir(out_dir);
            const auto yaws = yaw_grid(yaw_lo * kDeg, yaw_hi * kDeg, yaw_step * kDeg);
            FitParams pv = params;
            pv.camera = default_camera(synth_size, synth_size);
            pv.camera.translation = params.camera.translation;
            const ViewSet set = synthesize_views(model, pv, uv, yaws, synth_size, synth_size);
            char name[64];
            for (std::size_t v = 0; v < set.images.size(); ++v) {
                std::snprintf(name, sizeof(name), "yaw%+04.0f.ppm", set.yaws[v] / kDeg);
                write_ppm(join(out_dir, name), set.images[v]);
            }
            std::printf("synthesize: %zu views -> %s\n", set.images.size(), out_dir.c_str());
        } else if (eval_cmd->parsed()) {
            if (protocol != "frontal-profile" && protocol != "pose-matrix")
                throw std::invalid_argument("eval: unknown protocol '" + protocol + "'");
            const auto model = load_model(model_path);
            const auto manifest = load_manifest(manifest_path);
            const Checkpoint ckpt = load_checkpoint(checkpoint_path);
            const std::uint64_t s = resolve_seed(eval_seed, seed);
            const Prepared prep = prepare(model, manifest, {}, fit_iters, uv_size, mix_seed(s, 2));
            EmbedNet embedder(0, 2);
            if (!embedder_path.empty()) {
                embedder = load_embedder(embedder_path);
            } else {
                if (prep.train_ids.size() < 2)
                    throw std::runtime_error("eval: embedder pretraining needs 2+ train identities");
                embedder = pretrain_embedder(embed_data(model, prep, mix_seed(s, 3)),
                                             static_cast<int>(prep.train_ids.size()), embed_steps,
                                             mix_seed(s, 4));
            }
            const CompletionOutcome completion =
                complete_all(model, prep, ckpt.nets.generator, mix_seed(s, 6), "");
            const auto yaws = yaw_grid(-90.0 * kDeg, 90.0 * kDeg, 45.0 * kDeg);
            const EvalOutcome ev =
                synthesize_and_eval(model, prep, completion, embedder, yaws, image_size, "");
            std::string table;
            if (protocol == "frontal-profile") {
                table = "protocol: frontal-profile verification\n";
                table += "identities " + fmt(ev.verification_identities) + "\n";
                table += "fold accuracy threshold\n";
                for (std::size_t f = 0; f < ev.verification.fold_accuracy.size(); ++f)
                    table += fmt(static_cast<int>(f)) + " " + fmt(ev.verification.fold_accuracy[f]) +
                             " " + fmt(ev.verification.fold_threshold[f]) + "\n";
                table += "mean " + fmt(ev.verification.mean) + "\n";
                table += "stddev " + fmt(ev.verification.stddev) + "\n";
            } else {
                table = "protocol: pose similarity matrix (completed vs ground truth)\n";
                table += "rows: completed pose; columns: ground-truth pose\n";
                table += "pose";
                for (const char* b : kPoseNames) table += std::string(" ") + b;
                table += "\n";
                for (int a = 0; a < 3; ++a) {
                    table += kPoseNames[a];
                    for (int b = 0; b < 3; ++b) table += " " + fmt(ev.simmatrix(a, b));
                    table += "\n";
                }
            }
            table += "psnr.mean " + fmt(completion.psnr_mean) + "\n";
            table += "ssim.mean " + fmt(completion.ssim_mean) + "\n";
            std::fputs(table.c_str(), stdout);
            if (!out_path.empty()) {
                std::ofstream f(out_path);
                if (!f) throw std::runtime_error("eval: cannot write " + out_path);
                f << table;
            }
        } else if (pipeline->parsed()) {
            const PipelineConfig cfg = parse_config(config_path);
            const PipelineReport report = run_pipeline(cfg);
            std::printf("%s", report.text().c_str());
            std::printf("report -> %s\n", join(cfg.out_dir, "report.txt").c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

} // namespace uvforge
