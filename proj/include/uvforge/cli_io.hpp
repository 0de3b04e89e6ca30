#pragma once

#include "uvforge/fitter.hpp"
#include "uvforge/model.hpp"
#include "uvforge/nets.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace uvforge {

/// Experiment configuration, loaded from a flat key=value text file with
/// dotted keys ('#' starts a comment). The seed must be given explicitly and
/// model.path must exist when the file is parsed.
struct PipelineConfig {
    std::uint64_t seed = 0;
    std::string model_path;
    std::string dataset_dir; // holds manifest.csv, generated there when absent
    std::string out_dir;
    int dataset_identities = 5;
    int dataset_views = 3;
    int uv_size = 64;
    int image_size = 128;
    int fit_iterations = 12;
    FitWeights fit_weights;
    TrainConfig train;
    int embed_steps = 600;
    double yaw_lo_deg = -90.0;
    double yaw_hi_deg = 90.0;
    double yaw_step_deg = 45.0;
};

PipelineConfig parse_config(const std::string& path);

struct ManifestRow {
    int identity = 0;
    double yaw = 0.0; // radians
    std::string image;     // paths relative to the manifest directory
    std::string landmarks;
    std::string uv;
    std::string split; // "train" or "test"
};

/// Dataset index. Rows reference files under `dir`; identities never appear
/// in both splits.
struct DatasetManifest {
    std::string dir;
    std::vector<ManifestRow> rows;
};

/// Samples identities, renders views at seeded uniform yaws, writes images
/// (PPM), projected landmark files, ground-truth UV maps and manifest.csv
/// under out_dir. The first 90% of identities are tagged train, the rest
/// test. Deterministic: same arguments produce byte-identical files.
DatasetManifest gen_dataset(const MorphableModel& model, int n_identities,
                            int views_per_identity, std::uint64_t seed,
                            const std::string& out_dir, int uv_size = 64,
                            int image_size = 128);

void save_manifest(const DatasetManifest& manifest);
/// Loads and validates: header, field count, split tags, identity-disjoint
/// splits, and that every referenced file exists.
DatasetManifest load_manifest(const std::string& path);

/// Text round trip for fit parameters (coefficients plus camera).
void save_fit_params(const std::string& path, const FitParams& params);
FitParams load_fit_params(const std::string& path);

/// Landmark text files: one "vertex_index x y" line per landmark.
void save_landmarks(const std::string& path, const Landmarks& landmarks);
Landmarks load_landmarks(const std::string& path);

/// Ordered key = value report; rendered text is byte-stable for identical
/// runs of the same binary.
struct PipelineReport {
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const;
    std::string text() const;
};

/// Metric keys every pipeline report must carry.
const std::vector<std::string>& report_metric_keys();

/// fit -> extract -> train -> complete -> synthesize -> evaluate. Writes all
/// artifacts (dataset if absent, checkpoints, completed UVs, synthesized
/// views, loss curves, report.txt) under config.out_dir. Any stage failure
/// throws std::runtime_error prefixed with the stage name in brackets.
PipelineReport run_pipeline(const PipelineConfig& config);

/// Command line entry point. Returns 0 on success, 2 on usage errors, 1 on
/// stage failures. Honors UVFORGE_SEED only when --seed is absent.
int run_cli(int argc, char** argv);

} // namespace uvforge
