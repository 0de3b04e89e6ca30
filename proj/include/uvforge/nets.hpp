#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "uvforge/image.hpp"
#include "uvforge/tensor.hpp"
#include "uvforge/uv_pipeline.hpp"

namespace uvforge {

// Encoder-decoder completion network and the adversarial training loop around
// it. All nets share the same building block: 4x4 kernels, stride 2, pad 1,
// so every stage exactly halves (or doubles) the spatial extent. Inputs must
// be square with power-of-two side >= 16.

struct ConvLayer {
    TensorPtr weight;
    TensorPtr bias;
};

/// U-shaped completion net. Input is the 6-channel generator image (noise
/// filled UV stacked with its horizontal mirror), output a 3-channel map in
/// (0, 1) at the input resolution.
struct GeneratorNet {
    std::vector<ConvLayer> enc; // 6 -> 16 -> 32 -> 64 -> 64
    std::vector<ConvLayer> dec; // mirrored, with skip concatenations
    std::vector<ConvLayer> ref; // full-resolution refinement on top of dec

    explicit GeneratorNet(std::uint64_t seed);

    TensorPtr forward(const TensorPtr& input) const;
    std::vector<TensorPtr> parameters() const;
};

/// Stacked stride-2 conv classifier ending in a sigmoid probability, one value
/// per batch row. `input_size` is fixed at construction because of the final
/// flatten. The discriminator sees 6 channels: candidate UV plus condition.
struct DiscriminatorNet {
    std::vector<ConvLayer> stages;
    ConvLayer head; // linear over the flattened final feature map
    int input_size = 0;
    int stage_count = 0;

    DiscriminatorNet(std::uint64_t seed, int input_size, int stage_count);

    TensorPtr forward(const TensorPtr& input) const;
    std::vector<TensorPtr> parameters() const;
};

/// Small identity classifier whose penultimate layer is the embedding. Frozen
/// after pretraining; the class centers live in embedding space.
struct EmbedNet {
    static constexpr int kEmbedDim = 32;
    static constexpr int kInputSize = 64;

    std::vector<ConvLayer> stages; // 3 -> 8 -> 16 -> 32 -> 32
    ConvLayer embed_head;          // 512 -> 32
    ConvLayer class_head;          // 32 -> n_classes
    int n_classes = 0;
    Eigen::MatrixXd centers;       // n_classes x kEmbedDim
    bool frozen = false;
    bool converged = false;
    double train_accuracy = 0.0;

    EmbedNet(std::uint64_t seed, int n_classes);

    TensorPtr embed(const TensorPtr& images) const;  // (N,3,64,64) -> (N,32)
    TensorPtr logits(const TensorPtr& images) const; // (N,3,64,64) -> (N,n_classes)
    std::vector<TensorPtr> parameters() const;
};

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 1e-4;
    double lambda1 = 1e-2; // global adversarial weight
    double lambda2 = 4e-2; // local adversarial weight
    double lambda3 = 1e-3; // identity preservation weight
    std::uint64_t seed = 0;
};

struct TrainSample {
    Image input;  // 6-channel generator input
    Image target; // 3-channel ground-truth UV
    int label = 0;
};

struct LossRecord {
    int epoch = 0;
    double l_gen = 0.0;
    double l_adv_global = 0.0;
    double l_adv_local = 0.0;
    double l_id = 0.0;
    double l_total = 0.0;
};

struct TrainResult {
    GeneratorNet generator;
    DiscriminatorNet global_d;
    DiscriminatorNet local_d;
    std::vector<LossRecord> curves;
};

// Loss pieces. Tensor arguments are live graph nodes so each result can be
// driven backward.

/// Mean absolute difference over every entry (pixelwise L1, channel averaged).
TensorPtr loss_gen(const TensorPtr& output, const TensorPtr& target);

/// Both sides of the adversarial objective from discriminator probabilities
/// (shape (N,1), clamped to [1e-7, 1-1e-7] before the logs).
/// d_objective = mean log D(real) + mean log(1 - D(fake)), to be maximized.
/// g_objective = -mean log D(fake), to be minimized by the generator.
struct AdvObjectives {
    TensorPtr d_objective;
    TensorPtr g_objective;
};
AdvObjectives adv_objectives(const TensorPtr& d_real, const TensorPtr& d_fake);

/// The generator side alone: -mean log D(fake), same clamping.
TensorPtr generator_objective(const TensorPtr& d_fake);

/// Mean squared distance between embedding rows and their class centers.
TensorPtr center_distance_loss(const TensorPtr& embeddings,
                               const Eigen::MatrixXd& centers,
                               const std::vector<int>& labels);

/// center_distance_loss applied to embedder.embed(images).
TensorPtr loss_id(const EmbedNet& embedder, const TensorPtr& images,
                  const std::vector<int>& labels);

/// l_gen + lambda1 * l_adv_global + lambda2 * l_adv_local + lambda3 * l_id.
/// `id` may be null when lambda3 is zero; the term is skipped entirely so no
/// gradient path through the embedder exists.
TensorPtr loss_total(const TensorPtr& gen, const TensorPtr& adv_global,
                     const TensorPtr& adv_local, const TensorPtr& id,
                     const TrainConfig& cfg);

// Batch conversion between interleaved images and NCHW tensors.
TensorPtr image_batch(const std::vector<const Image*>& images,
                      bool requires_grad = false);
Image tensor_image(const Tensor& t, int batch_index);

struct EmbedSample {
    Image image; // 3-channel, 64x64
    int label = 0;
};

/// Trains the identity classifier with softmax cross entropy, computes class
/// centers from the final embeddings, and freezes the net. `converged` is
/// false when final training accuracy lands below 0.9.
EmbedNet pretrain_embedder(const std::vector<EmbedSample>& data, int n_classes,
                           int steps, std::uint64_t seed);

/// Adversarial training: per batch one step for each discriminator on
/// detached fakes, then one generator step on the combined loss. Plain SGD.
/// Discriminator steps are skipped while both adversarial weights are zero.
/// Throws if any loss goes non-finite, naming the epoch.
TrainResult train(const std::vector<TrainSample>& data, const EmbedNet* embedder,
                  const TrainConfig& cfg);

/// Runs the generator on make_generator_input(uv, mask, seed). In composite
/// mode visible texels are pasted back from the input so only missing texels
/// come from the net.
UvMap complete(const GeneratorNet& generator, const UvMap& uv,
               const VisibilityMask& mask, std::uint64_t seed,
               bool composite = true);

// Checkpoints: a text header describing each layer followed by flat
// little-endian f64 blocks in layer order.
void save_checkpoint(const std::string& path, const TrainResult& nets,
                     std::uint64_t seed, int steps);
struct Checkpoint {
    TrainResult nets;
    std::uint64_t seed = 0;
    int steps = 0;
};
Checkpoint load_checkpoint(const std::string& path);

void save_embedder(const std::string& path, const EmbedNet& net);
EmbedNet load_embedder(const std::string& path);

/// FNV-1a over the raw parameter bytes, in parameter order. Used to verify
/// the embedder stays untouched by completion training.
std::uint64_t parameter_hash(const std::vector<TensorPtr>& params);

/// Writes loss curves as CSV: epoch,l_gen,l_adv_global,l_adv_local,l_id,l_total.
void write_loss_curves(const std::string& path, const std::vector<LossRecord>& curves);

} // namespace uvforge
