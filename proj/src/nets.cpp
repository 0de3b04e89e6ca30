#include "uvforge/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "uvforge/rng.hpp"

namespace uvforge {

namespace {

constexpr int kKernel = 4;
constexpr int kStride = 2;
constexpr int kPad = 1;
constexpr double kProbEps = 1e-7;

ConvLayer make_conv(Rng& rng, int co, int ci, int k = kKernel) {
    const double s = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
    return {tensor_param({co, ci, k, k}, rng, s), tensor_param({co}, rng, s)};
}

// Transposed conv weight layout is (Ci, Co, k, k).
ConvLayer make_tconv(Rng& rng, int ci, int co) {
    const double s = 1.0 / std::sqrt(static_cast<double>(ci) * kKernel * kKernel);
    return {tensor_param({ci, co, kKernel, kKernel}, rng, s),
            tensor_param({co}, rng, s)};
}

ConvLayer make_linear(Rng& rng, int out, int in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    return {tensor_param({out, in}, rng, s), tensor_param({out}, rng, s)};
}

bool pow2_at_least(int v, int floor) {
    return v >= floor && (v & (v - 1)) == 0;
}

void check_net_input(const TensorPtr& x, int channels, const char* who) {
    if (!x || x->shape.size() != 4)
        throw std::invalid_argument(std::string(who) + ": expected NCHW input");
    if (x->dim(1) != channels)
        throw std::invalid_argument(std::string(who) + ": wrong channel count");
    if (x->dim(2) != x->dim(3) || !pow2_at_least(x->dim(2), 16))
        throw std::invalid_argument(std::string(who) +
                                    ": input must be square power-of-two >= 16");
}

void append_params(std::vector<TensorPtr>& out, const std::vector<ConvLayer>& layers) {
    for (const ConvLayer& l : layers) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
}

// Normalization is skipped on degenerate spatial planes where the variance
// estimate collapses (a 1x1 plane normalizes to zero).
TensorPtr maybe_norm(const TensorPtr& t) {
    return t->dim(2) * t->dim(3) >= 4 ? instance_norm(t) : t;
}

} // namespace

GeneratorNet::GeneratorNet(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xE5C0DE));
    enc.push_back(make_conv(rng, 16, 6));
    enc.push_back(make_conv(rng, 32, 16));
    enc.push_back(make_conv(rng, 64, 32));
    enc.push_back(make_conv(rng, 64, 64));
    dec.push_back(make_tconv(rng, 64, 64));   // bottleneck up, then cat enc3
    dec.push_back(make_tconv(rng, 128, 32));  // cat enc2
    dec.push_back(make_tconv(rng, 64, 16));   // cat enc1
    dec.push_back(make_tconv(rng, 32, 3));
    ref.push_back(make_conv(rng, 16, 9, 3));
    ref.push_back(make_conv(rng, 3, 16, 3));
    // Zero final layer: with the residual connection in forward() the initial
    // network is exactly the identity on the first three input channels, so
    // training only has to learn the correction.
    ref[1].weight->values.setZero();
    ref[1].bias->values.setZero();
}

TensorPtr GeneratorNet::forward(const TensorPtr& input) const {
    check_net_input(input, 6, "generator");
    // Instance normalization on the inner stages; the first encoder sees raw
    // pixels and the head stays un-normalized.
    auto e0 = leaky_relu(conv2d(input, enc[0].weight, enc[0].bias, kStride, kPad));
    auto e1 = leaky_relu(maybe_norm(conv2d(e0, enc[1].weight, enc[1].bias, kStride, kPad)));
    auto e2 = leaky_relu(maybe_norm(conv2d(e1, enc[2].weight, enc[2].bias, kStride, kPad)));
    auto e3 = leaky_relu(maybe_norm(conv2d(e2, enc[3].weight, enc[3].bias, kStride, kPad)));
    auto d0 = relu(maybe_norm(tconv2d(e3, dec[0].weight, dec[0].bias, kStride, kPad)));
    auto d1 = relu(maybe_norm(
        tconv2d(concat_channels(d0, e2), dec[1].weight, dec[1].bias, kStride, kPad)));
    auto d2 = relu(maybe_norm(
        tconv2d(concat_channels(d1, e1), dec[2].weight, dec[2].bias, kStride, kPad)));
    auto coarse = tconv2d(concat_channels(d2, e0), dec[3].weight, dec[3].bias, kStride, kPad);
    // Full-resolution refinement: stride-1 convs that see both the coarse
    // decoder output and the raw input, so per-texel decisions (keep a texel,
    // replace a noise fill) do not have to survive an upsampling stage. The
    // refinement output is a correction on top of the input UV channels and
    // the clamp is the bounded output stage.
    auto f = relu(conv2d(concat_channels(coarse, input), ref[0].weight, ref[0].bias, 1, 1));
    auto corr = conv2d(f, ref[1].weight, ref[1].bias, 1, 1);
    return clamp_val(add(corr, slice_channels(input, 0, 3)), 0.0, 1.0);
}

std::vector<TensorPtr> GeneratorNet::parameters() const {
    std::vector<TensorPtr> out;
    append_params(out, enc);
    append_params(out, dec);
    append_params(out, ref);
    return out;
}

DiscriminatorNet::DiscriminatorNet(std::uint64_t seed, int input_size_, int stage_count_)
    : input_size(input_size_), stage_count(stage_count_) {
    static const int kWidths[] = {16, 32, 64, 64};
    if (stage_count < 1 || stage_count > 4)
        throw std::invalid_argument("discriminator: stage_count outside [1, 4]");
    if (input_size < (1 << stage_count) || input_size % (1 << stage_count) != 0)
        throw std::invalid_argument("discriminator: input_size not divisible by 2^stages");
    Rng rng(mix_seed(seed, 0xD15C));
    int ci = 6;
    for (int i = 0; i < stage_count; ++i) {
        stages.push_back(make_conv(rng, kWidths[i], ci));
        ci = kWidths[i];
    }
    const int fs = input_size >> stage_count;
    head = make_linear(rng, 1, ci * fs * fs);
}

TensorPtr DiscriminatorNet::forward(const TensorPtr& input) const {
    if (!input || input->shape.size() != 4 || input->dim(1) != 6 ||
        input->dim(2) != input_size || input->dim(3) != input_size)
        throw std::invalid_argument("discriminator: input shape mismatch");
    TensorPtr h = input;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        h = conv2d(h, stages[i].weight, stages[i].bias, kStride, kPad);
        if (i > 0) h = maybe_norm(h);
        h = leaky_relu(h);
    }
    const int feat = h->dim(1) * h->dim(2) * h->dim(3);
    auto flat = reshape(h, {h->dim(0), feat});
    return sigmoid(linear(flat, head.weight, head.bias));
}

std::vector<TensorPtr> DiscriminatorNet::parameters() const {
    std::vector<TensorPtr> out;
    append_params(out, stages);
    out.push_back(head.weight);
    out.push_back(head.bias);
    return out;
}

EmbedNet::EmbedNet(std::uint64_t seed, int n_classes_) : n_classes(n_classes_) {
    if (n_classes < 2)
        throw std::invalid_argument("embedder: need at least two classes");
    Rng rng(mix_seed(seed, 0xE3BED));
    stages.push_back(make_conv(rng, 8, 3));
    stages.push_back(make_conv(rng, 16, 8));
    stages.push_back(make_conv(rng, 32, 16));
    stages.push_back(make_conv(rng, 32, 32));
    embed_head = make_linear(rng, kEmbedDim, 32 * 4 * 4);
    class_head = make_linear(rng, n_classes, kEmbedDim);
    centers.resize(0, kEmbedDim);
}

TensorPtr EmbedNet::embed(const TensorPtr& images) const {
    if (!images || images->shape.size() != 4 || images->dim(1) != 3 ||
        images->dim(2) != kInputSize || images->dim(3) != kInputSize)
        throw std::invalid_argument("embedder: expected (N, 3, 64, 64) input");
    TensorPtr h = images;
    for (const ConvLayer& l : stages)
        h = leaky_relu(conv2d(h, l.weight, l.bias, kStride, kPad));
    auto flat = reshape(h, {h->dim(0), 32 * 4 * 4});
    return linear(flat, embed_head.weight, embed_head.bias);
}

TensorPtr EmbedNet::logits(const TensorPtr& images) const {
    return linear(embed(images), class_head.weight, class_head.bias);
}

std::vector<TensorPtr> EmbedNet::parameters() const {
    std::vector<TensorPtr> out;
    append_params(out, stages);
    out.push_back(embed_head.weight);
    out.push_back(embed_head.bias);
    out.push_back(class_head.weight);
    out.push_back(class_head.bias);
    return out;
}

TensorPtr loss_gen(const TensorPtr& output, const TensorPtr& target) {
    if (!output || !target || output->shape != target->shape)
        throw std::invalid_argument("loss_gen: shape mismatch");
    return mean_all(abs_val(sub(output, target)));
}

TensorPtr generator_objective(const TensorPtr& d_fake) {
    if (!d_fake || d_fake->shape.size() != 2 || d_fake->dim(1) != 1)
        throw std::invalid_argument("generator_objective: expected (N, 1) probabilities");
    return scale(mean_all(log_val(clamp_val(d_fake, kProbEps, 1.0 - kProbEps))), -1.0);
}

AdvObjectives adv_objectives(const TensorPtr& d_real, const TensorPtr& d_fake) {
    if (!d_real || !d_fake || d_real->shape.size() != 2 || d_real->dim(1) != 1 ||
        d_real->shape != d_fake->shape)
        throw std::invalid_argument("adv_objectives: expected matching (N, 1) probabilities");
    auto cr = clamp_val(d_real, kProbEps, 1.0 - kProbEps);
    auto cf = clamp_val(d_fake, kProbEps, 1.0 - kProbEps);
    auto one_minus = sub(tensor_const(cf->shape, 1.0), cf);
    AdvObjectives obj;
    obj.d_objective = add(mean_all(log_val(cr)), mean_all(log_val(one_minus)));
    obj.g_objective = generator_objective(d_fake);
    return obj;
}

TensorPtr center_distance_loss(const TensorPtr& embeddings,
                               const Eigen::MatrixXd& centers,
                               const std::vector<int>& labels) {
    if (!embeddings || embeddings->shape.size() != 2)
        throw std::invalid_argument("center_distance_loss: expected (N, d) embeddings");
    const int n = embeddings->dim(0);
    const int d = embeddings->dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("center_distance_loss: label count mismatch");
    if (centers.cols() != d)
        throw std::invalid_argument("center_distance_loss: center dimension mismatch");
    Eigen::VectorXd flat(static_cast<Eigen::Index>(n) * d);
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= centers.rows())
            throw std::invalid_argument("center_distance_loss: label out of range");
        flat.segment(static_cast<Eigen::Index>(i) * d, d) = centers.row(labels[i]).transpose();
    }
    auto target = tensor_from({n, d}, std::move(flat));
    // mean_all averages over n*d entries; rescaling by d leaves the mean of
    // per-row squared norms.
    return scale(mean_all(square(sub(embeddings, target))), static_cast<double>(d));
}

TensorPtr loss_id(const EmbedNet& embedder, const TensorPtr& images,
                  const std::vector<int>& labels) {
    if (embedder.centers.rows() == 0)
        throw std::invalid_argument("loss_id: embedder has no class centers");
    return center_distance_loss(embedder.embed(images), embedder.centers, labels);
}

TensorPtr loss_total(const TensorPtr& gen, const TensorPtr& adv_global,
                     const TensorPtr& adv_local, const TensorPtr& id,
                     const TrainConfig& cfg) {
    if (!gen) throw std::invalid_argument("loss_total: reconstruction term is required");
    TensorPtr total = gen;
    if (cfg.lambda1 != 0.0) {
        if (!adv_global)
            throw std::invalid_argument("loss_total: lambda1 set but no global term");
        total = add(total, scale(adv_global, cfg.lambda1));
    }
    if (cfg.lambda2 != 0.0) {
        if (!adv_local)
            throw std::invalid_argument("loss_total: lambda2 set but no local term");
        total = add(total, scale(adv_local, cfg.lambda2));
    }
    if (cfg.lambda3 != 0.0) {
        if (!id)
            throw std::invalid_argument("loss_total: lambda3 set but no identity term");
        total = add(total, scale(id, cfg.lambda3));
    }
    return total;
}

TensorPtr image_batch(const std::vector<const Image*>& images, bool requires_grad) {
    if (images.empty())
        throw std::invalid_argument("image_batch: empty batch");
    const Image& first = *images[0];
    if (first.width <= 0 || first.channels <= 0)
        throw std::invalid_argument("image_batch: empty image");
    const int n = static_cast<int>(images.size());
    const int c = first.channels, h = first.height, w = first.width;
    Eigen::VectorXd flat(static_cast<Eigen::Index>(n) * c * h * w);
    Eigen::Index k = 0;
    for (const Image* img : images) {
        if (!img || !img->same_shape(first))
            throw std::invalid_argument("image_batch: shape mismatch");
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) flat[k++] = img->at(y, x, ch);
    }
    return tensor_from({n, c, h, w}, std::move(flat), requires_grad);
}

Image tensor_image(const Tensor& t, int batch_index) {
    if (t.shape.size() != 4)
        throw std::invalid_argument("tensor_image: expected NCHW tensor");
    if (batch_index < 0 || batch_index >= t.shape[0])
        throw std::invalid_argument("tensor_image: batch index out of range");
    const int c = t.shape[1], h = t.shape[2], w = t.shape[3];
    Image img(w, h, c);
    const Eigen::Index base = static_cast<Eigen::Index>(batch_index) * c * h * w;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(y, x, ch) =
                    t.values[base + (static_cast<Eigen::Index>(ch) * h + y) * w + x];
    return img;
}

namespace {

// Drops the gradient path: same values, fresh constant leaf.
TensorPtr detach(const TensorPtr& x) { return tensor_from(x->shape, x->values); }

// Channels [0, 3) of a 6-channel training input, as their own image.
Image condition_slice(const Image& input6) {
    Image out(input6.width, input6.height, 3);
    for (int y = 0; y < input6.height; ++y)
        for (int x = 0; x < input6.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = input6.at(y, x, c);
    return out;
}

void check_finite(const TensorPtr& t, const char* term, int epoch) {
    if (!t->values.allFinite())
        throw std::runtime_error("train: " + std::string(term) +
                                 " loss non-finite at epoch " + std::to_string(epoch));
}

} // namespace

EmbedNet pretrain_embedder(const std::vector<EmbedSample>& data, int n_classes,
                           int steps, std::uint64_t seed) {
    if (n_classes < 2)
        throw std::invalid_argument("pretrain_embedder: need at least two classes");
    if (data.empty())
        throw std::invalid_argument("pretrain_embedder: empty dataset");
    if (steps < 1)
        throw std::invalid_argument("pretrain_embedder: steps must be positive");
    std::vector<int> class_count(n_classes, 0);
    for (const EmbedSample& s : data) {
        if (s.label < 0 || s.label >= n_classes)
            throw std::invalid_argument("pretrain_embedder: label out of range");
        if (s.image.channels != 3 || s.image.width != EmbedNet::kInputSize ||
            s.image.height != EmbedNet::kInputSize)
            throw std::invalid_argument("pretrain_embedder: images must be 3x64x64");
        ++class_count[s.label];
    }
    for (int c = 0; c < n_classes; ++c)
        if (class_count[c] == 0)
            throw std::invalid_argument("pretrain_embedder: class " + std::to_string(c) +
                                        " has no samples");

    EmbedNet net(mix_seed(seed, 1), n_classes);
    const std::vector<TensorPtr> params = net.parameters();
    Rng rng(mix_seed(seed, 2));
    const int m = static_cast<int>(data.size());
    const int batch = std::min(16, m);
    const double lr = 0.05;

    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;
    int cursor = m; // forces an initial shuffle

    for (int step = 0; step < steps; ++step) {
        if (cursor + batch > m) {
            rng.shuffle(order);
            cursor = 0;
        }
        std::vector<const Image*> imgs(batch);
        std::vector<int> labels(batch);
        for (int i = 0; i < batch; ++i) {
            const EmbedSample& s = data[order[cursor + i]];
            imgs[i] = &s.image;
            labels[i] = s.label;
        }
        cursor += batch;
        auto loss = softmax_cross_entropy(net.logits(image_batch(imgs)), labels);
        if (!loss->values.allFinite())
            throw std::runtime_error("pretrain_embedder: loss non-finite at step " +
                                     std::to_string(step));
        zero_grad(params);
        backward(loss);
        sgd_step(params, lr);
    }

    // Final full pass: accuracy, then class centers from the embeddings.
    Eigen::MatrixXd emb(m, EmbedNet::kEmbedDim);
    int correct = 0;
    for (int start = 0; start < m; start += 32) {
        const int b = std::min(32, m - start);
        std::vector<const Image*> imgs(b);
        for (int i = 0; i < b; ++i) imgs[i] = &data[start + i].image;
        auto batch_t = image_batch(imgs);
        auto e = net.embed(batch_t);
        auto lg = linear(e, net.class_head.weight, net.class_head.bias);
        for (int i = 0; i < b; ++i) {
            emb.row(start + i) =
                e->values.segment(static_cast<Eigen::Index>(i) * EmbedNet::kEmbedDim,
                                  EmbedNet::kEmbedDim)
                    .transpose();
            int argmax = 0;
            for (int k = 1; k < n_classes; ++k)
                if (lg->values[static_cast<Eigen::Index>(i) * n_classes + k] >
                    lg->values[static_cast<Eigen::Index>(i) * n_classes + argmax])
                    argmax = k;
            if (argmax == data[start + i].label) ++correct;
        }
    }
    net.train_accuracy = static_cast<double>(correct) / m;
    net.converged = net.train_accuracy >= 0.9;
    net.centers = Eigen::MatrixXd::Zero(n_classes, EmbedNet::kEmbedDim);
    for (int i = 0; i < m; ++i) net.centers.row(data[i].label) += emb.row(i);
    for (int c = 0; c < n_classes; ++c) net.centers.row(c) /= class_count[c];
    net.frozen = true;
    return net;
}

TrainResult train(const std::vector<TrainSample>& data, const EmbedNet* embedder,
                  const TrainConfig& cfg) {
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("train: epochs and batch_size must be positive");
    if (cfg.learning_rate <= 0.0)
        throw std::invalid_argument("train: learning_rate must be positive");
    if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 || cfg.lambda3 < 0.0)
        throw std::invalid_argument("train: loss weights must be non-negative");
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.lambda3 != 0.0) {
        if (!embedder || embedder->centers.rows() == 0)
            throw std::invalid_argument("train: lambda3 set but no pretrained embedder");
        if (!embedder->frozen)
            throw std::invalid_argument("train: embedder must be frozen");
    }

    const Image& probe = data[0].input;
    const int s = probe.height;
    if (probe.channels != 6 || probe.width != s || !pow2_at_least(s, 16))
        throw std::invalid_argument("train: inputs must be 6-channel square power-of-two >= 16");
    for (const TrainSample& t : data) {
        if (!t.input.same_shape(probe))
            throw std::invalid_argument("train: inconsistent input shapes");
        if (t.target.channels != 3 || t.target.width != s || t.target.height != s)
            throw std::invalid_argument("train: targets must be 3-channel at input size");
        if (cfg.lambda3 != 0.0 &&
            (t.label < 0 || t.label >= embedder->centers.rows()))
            throw std::invalid_argument("train: sample label outside embedder classes");
    }
    if (cfg.lambda3 != 0.0 && s != EmbedNet::kInputSize)
        throw std::invalid_argument("train: identity loss requires 64x64 data");

    TrainResult r{GeneratorNet(mix_seed(cfg.seed, 10)),
                  DiscriminatorNet(mix_seed(cfg.seed, 11), s, 4),
                  DiscriminatorNet(mix_seed(cfg.seed, 12), s / 2, 3),
                  {}};
    const std::vector<TensorPtr> gp = r.generator.parameters();
    const std::vector<TensorPtr> dgp = r.global_d.parameters();
    const std::vector<TensorPtr> dlp = r.local_d.parameters();
    const bool adv_on = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;

    Rng rng(mix_seed(cfg.seed, 13));
    const int m = static_cast<int>(data.size());
    std::vector<int> order(m);
    for (int i = 0; i < m; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        LossRecord rec;
        rec.epoch = epoch;
        int batches = 0;
        for (int start = 0; start < m; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, m - start);
            std::vector<const Image*> ins(b), tgts(b);
            std::vector<Image> conds(b);
            std::vector<const Image*> cond_ptr(b);
            std::vector<int> labels(b);
            for (int i = 0; i < b; ++i) {
                const TrainSample& t = data[order[start + i]];
                ins[i] = &t.input;
                tgts[i] = &t.target;
                conds[i] = condition_slice(t.input);
                cond_ptr[i] = &conds[i];
                labels[i] = t.label;
            }
            auto X = image_batch(ins);
            auto T = image_batch(tgts);
            auto cond = image_batch(cond_ptr);

            if (adv_on) {
                auto fake = detach(r.generator.forward(X));
                {
                    auto obj = adv_objectives(
                        r.global_d.forward(concat_channels(T, cond)),
                        r.global_d.forward(concat_channels(fake, cond)));
                    auto d_loss = scale(obj.d_objective, -1.0);
                    check_finite(d_loss, "global discriminator", epoch);
                    zero_grad(dgp);
                    backward(d_loss);
                    sgd_step(dgp, cfg.learning_rate);
                }
                {
                    auto obj = adv_objectives(
                        r.local_d.forward(crop_center(concat_channels(T, cond), 0.5)),
                        r.local_d.forward(crop_center(concat_channels(fake, cond), 0.5)));
                    auto d_loss = scale(obj.d_objective, -1.0);
                    check_finite(d_loss, "local discriminator", epoch);
                    zero_grad(dlp);
                    backward(d_loss);
                    sgd_step(dlp, cfg.learning_rate);
                }
            }

            auto fake = r.generator.forward(X);
            auto l_gen = loss_gen(fake, T);
            TensorPtr l_advg, l_advl, l_id_t;
            if (cfg.lambda1 > 0.0)
                l_advg = generator_objective(
                    r.global_d.forward(concat_channels(fake, cond)));
            if (cfg.lambda2 > 0.0)
                l_advl = generator_objective(
                    r.local_d.forward(crop_center(concat_channels(fake, cond), 0.5)));
            if (cfg.lambda3 > 0.0) l_id_t = loss_id(*embedder, fake, labels);
            auto total = loss_total(l_gen, l_advg, l_advl, l_id_t, cfg);
            check_finite(total, "generator", epoch);
            zero_grad(gp);
            backward(total);
            sgd_step(gp, cfg.learning_rate);

            rec.l_gen += l_gen->scalar();
            rec.l_adv_global += l_advg ? l_advg->scalar() : 0.0;
            rec.l_adv_local += l_advl ? l_advl->scalar() : 0.0;
            rec.l_id += l_id_t ? l_id_t->scalar() : 0.0;
            rec.l_total += total->scalar();
            ++batches;
        }
        rec.l_gen /= batches;
        rec.l_adv_global /= batches;
        rec.l_adv_local /= batches;
        rec.l_id /= batches;
        rec.l_total /= batches;
        r.curves.push_back(rec);
    }
    return r;
}

UvMap complete(const GeneratorNet& generator, const UvMap& uv,
               const VisibilityMask& mask, std::uint64_t seed, bool composite) {
    if (uv.width != mask.width || uv.height != mask.height)
        throw std::invalid_argument("complete: UV and mask sizes differ");
    const Image input = make_generator_input(uv, mask, seed);
    auto out = generator.forward(image_batch({&input}));
    UvMap result(uv.width, uv.height);
    result.pixels = tensor_image(*out, 0);
    if (composite) {
        for (int y = 0; y < uv.height; ++y)
            for (int x = 0; x < uv.width; ++x)
                if (mask.at(y, x))
                    for (int c = 0; c < 3; ++c)
                        result.pixels.at(y, x, c) = uv.pixels.at(y, x, c);
    }
    return result;
}

namespace {

void write_param_block(std::ostream& os, const std::vector<TensorPtr>& params) {
    for (const TensorPtr& p : params)
        os.write(reinterpret_cast<const char*>(p->values.data()),
                 static_cast<std::streamsize>(p->numel() * sizeof(double)));
}

void read_param_block(std::istream& is, const std::vector<TensorPtr>& params,
                      const char* who) {
    for (const TensorPtr& p : params) {
        is.read(reinterpret_cast<char*>(p->values.data()),
                static_cast<std::streamsize>(p->numel() * sizeof(double)));
        if (!is) throw std::runtime_error(std::string(who) + ": truncated data block");
    }
}

void write_shape_lines(std::ostream& os, const std::vector<TensorPtr>& params) {
    for (const TensorPtr& p : params) {
        os << p->shape.size();
        for (int d : p->shape) os << ' ' << d;
        os << '\n';
    }
}

void check_shape_lines(std::istream& is, const std::vector<TensorPtr>& params,
                       const char* who) {
    for (const TensorPtr& p : params) {
        std::size_t nd = 0;
        if (!(is >> nd) || nd != p->shape.size())
            throw std::runtime_error(std::string(who) + ": layer spec mismatch");
        for (int d : p->shape) {
            int got = 0;
            if (!(is >> got) || got != d)
                throw std::runtime_error(std::string(who) + ": layer spec mismatch");
        }
    }
}

} // namespace

void save_checkpoint(const std::string& path, const TrainResult& nets,
                     std::uint64_t seed, int steps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    const auto gp = nets.generator.parameters();
    const auto dgp = nets.global_d.parameters();
    const auto dlp = nets.local_d.parameters();
    os << "uvforge-checkpoint 1\n";
    os << "seed " << seed << "\n";
    os << "steps " << steps << "\n";
    os << "input_size " << nets.global_d.input_size << "\n";
    os << "params " << (gp.size() + dgp.size() + dlp.size()) << "\n";
    write_shape_lines(os, gp);
    write_shape_lines(os, dgp);
    write_shape_lines(os, dlp);
    os << "data\n";
    write_param_block(os, gp);
    write_param_block(os, dgp);
    write_param_block(os, dlp);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "uvforge-checkpoint" || version != 1)
        throw std::runtime_error("load_checkpoint: not a checkpoint file");
    std::string key;
    std::uint64_t seed = 0;
    int steps = 0, input_size = 0;
    std::size_t count = 0;
    if (!(is >> key >> seed) || key != "seed")
        throw std::runtime_error("load_checkpoint: malformed header");
    if (!(is >> key >> steps) || key != "steps")
        throw std::runtime_error("load_checkpoint: malformed header");
    if (!(is >> key >> input_size) || key != "input_size")
        throw std::runtime_error("load_checkpoint: malformed header");
    if (!(is >> key >> count) || key != "params")
        throw std::runtime_error("load_checkpoint: malformed header");

    Checkpoint ck{TrainResult{GeneratorNet(0), DiscriminatorNet(0, input_size, 4),
                              DiscriminatorNet(0, input_size / 2, 3), {}},
                  seed, steps};
    const auto gp = ck.nets.generator.parameters();
    const auto dgp = ck.nets.global_d.parameters();
    const auto dlp = ck.nets.local_d.parameters();
    if (count != gp.size() + dgp.size() + dlp.size())
        throw std::runtime_error("load_checkpoint: parameter count mismatch");
    check_shape_lines(is, gp, "load_checkpoint");
    check_shape_lines(is, dgp, "load_checkpoint");
    check_shape_lines(is, dlp, "load_checkpoint");
    if (!(is >> key) || key != "data")
        throw std::runtime_error("load_checkpoint: missing data section");
    is.ignore(1); // the newline before the binary block
    read_param_block(is, gp, "load_checkpoint");
    read_param_block(is, dgp, "load_checkpoint");
    read_param_block(is, dlp, "load_checkpoint");
    return ck;
}

void save_embedder(const std::string& path, const EmbedNet& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_embedder: cannot open " + path);
    const auto params = net.parameters();
    os << "uvforge-embedder 1\n";
    os << "n_classes " << net.n_classes << "\n";
    os << "frozen " << (net.frozen ? 1 : 0) << "\n";
    os << "converged " << (net.converged ? 1 : 0) << "\n";
    os.precision(17);
    os << "train_accuracy " << net.train_accuracy << "\n";
    os << "centers " << net.centers.rows() << " " << net.centers.cols() << "\n";
    os << "params " << params.size() << "\n";
    write_shape_lines(os, params);
    os << "data\n";
    write_param_block(os, params);
    Eigen::MatrixXd ct = net.centers.transpose(); // stores row-major center rows
    os.write(reinterpret_cast<const char*>(ct.data()),
             static_cast<std::streamsize>(ct.size() * sizeof(double)));
    if (!os) throw std::runtime_error("save_embedder: write failed for " + path);
}

EmbedNet load_embedder(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_embedder: cannot open " + path);
    std::string magic, key;
    int version = 0;
    if (!(is >> magic >> version) || magic != "uvforge-embedder" || version != 1)
        throw std::runtime_error("load_embedder: not an embedder file");
    int n_classes = 0, frozen = 0, converged = 0;
    double acc = 0.0;
    Eigen::Index rows = 0, cols = 0;
    std::size_t count = 0;
    if (!(is >> key >> n_classes) || key != "n_classes")
        throw std::runtime_error("load_embedder: malformed header");
    if (!(is >> key >> frozen) || key != "frozen")
        throw std::runtime_error("load_embedder: malformed header");
    if (!(is >> key >> converged) || key != "converged")
        throw std::runtime_error("load_embedder: malformed header");
    if (!(is >> key >> acc) || key != "train_accuracy")
        throw std::runtime_error("load_embedder: malformed header");
    if (!(is >> key >> rows >> cols) || key != "centers")
        throw std::runtime_error("load_embedder: malformed header");
    if (!(is >> key >> count) || key != "params")
        throw std::runtime_error("load_embedder: malformed header");

    EmbedNet net(0, n_classes);
    net.frozen = frozen != 0;
    net.converged = converged != 0;
    net.train_accuracy = acc;
    const auto params = net.parameters();
    if (count != params.size())
        throw std::runtime_error("load_embedder: parameter count mismatch");
    check_shape_lines(is, params, "load_embedder");
    if (!(is >> key) || key != "data")
        throw std::runtime_error("load_embedder: missing data section");
    is.ignore(1);
    read_param_block(is, params, "load_embedder");
    if (rows < 0 || cols != EmbedNet::kEmbedDim)
        throw std::runtime_error("load_embedder: bad center dimensions");
    Eigen::MatrixXd ct(cols, rows);
    is.read(reinterpret_cast<char*>(ct.data()),
            static_cast<std::streamsize>(ct.size() * sizeof(double)));
    if (!is) throw std::runtime_error("load_embedder: truncated centers");
    net.centers = ct.transpose();
    return net;
}

std::uint64_t parameter_hash(const std::vector<TensorPtr>& params) {
    std::uint64_t h = 1469598103934665603ull; // FNV-1a offset basis
    for (const TensorPtr& p : params) {
        for (Eigen::Index i = 0; i < p->numel(); ++i) {
            std::uint64_t bits = 0;
            std::memcpy(&bits, &p->values[i], sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xFF;
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

void write_loss_curves(const std::string& path, const std::vector<LossRecord>& curves) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_loss_curves: cannot open " + path);
    os << "epoch,l_gen,l_adv_global,l_adv_local,l_id,l_total\n";
    os.precision(17);
    for (const LossRecord& r : curves)
        os << r.epoch << ',' << r.l_gen << ',' << r.l_adv_global << ','
           << r.l_adv_local << ',' << r.l_id << ',' << r.l_total << '\n';
    if (!os) throw std::runtime_error("write_loss_curves: write failed for " + path);
}

} // namespace uvforge
