#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "uvforge/rng.hpp"

namespace uvforge {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Node of a dynamically built reverse-mode graph. Values are flat row-major
/// in shape order; for images the layout is (N, C, H, W). Leaves (parameters
/// and inputs) own no backward function; interior nodes hold closures that
/// scatter their grad into their parents' grads. backward() walks the graph
/// once and then frees it, so each forward pass supports one backward pass.
struct Tensor {
    std::vector<int> shape;
    Eigen::VectorXd values;
    Eigen::VectorXd grad;
    bool requires_grad = false;

    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;
    bool released = false;

    Eigen::Index numel() const { return values.size(); }
    int dim(std::size_t i) const { return shape[i]; }
    bool is_scalar() const { return values.size() == 1; }
    double scalar() const { return values(0); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad = Eigen::VectorXd::Zero(values.size());
    }
};

/// Leaf filled with a constant.
TensorPtr tensor_const(const std::vector<int>& shape, double fill = 0.0);

/// Leaf wrapping existing values; set requires_grad for trainable leaves.
TensorPtr tensor_from(const std::vector<int>& shape, Eigen::VectorXd values,
                      bool requires_grad = false);

/// Trainable leaf with entries uniform in (-scale, scale).
TensorPtr tensor_param(const std::vector<int>& shape, Rng& rng, double scale);

/// Reverse-mode pass from a scalar loss: seeds d(loss)/d(loss) = 1, runs the
/// graph in reverse topological order, accumulates into each leaf's grad,
/// then releases the graph. A second call on the same loss is an error.
void backward(const TensorPtr& loss);

void zero_grad(const std::vector<TensorPtr>& params);
void sgd_step(const std::vector<TensorPtr>& params, double lr);

// Elementwise and reduction ops.
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr add_scalar(const TensorPtr& x, double c);
TensorPtr abs_val(const TensorPtr& x);
TensorPtr square(const TensorPtr& x);
TensorPtr log_val(const TensorPtr& x);
TensorPtr relu(const TensorPtr& x);
TensorPtr leaky_relu(const TensorPtr& x, double slope = 0.2);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr clamp_val(const TensorPtr& x, double lo, double hi);
TensorPtr mean_all(const TensorPtr& x);

/// Per-sample, per-channel normalization over the spatial plane to zero mean
/// and unit variance (no affine parameters).
TensorPtr instance_norm(const TensorPtr& x, double eps = 1e-5);

// Shape ops. reshape aliases values with a new shape of equal size.
TensorPtr reshape(const TensorPtr& x, const std::vector<int>& shape);
TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b);

/// Channels [start, start + count) of an NCHW tensor.
TensorPtr slice_channels(const TensorPtr& x, int start, int count);

/// Axis-centered spatial crop of an NCHW tensor, same side arithmetic as the
/// image-space central_crop: side = max(1, lround(ratio * min(H, W))).
TensorPtr crop_center(const TensorPtr& x, double ratio);

/// 2D convolution, NCHW. weight shape (Co, Ci, k, k), bias (Co).
/// H_out = (H + 2 pad - k) / stride + 1.
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                 int stride, int pad);

/// Transposed 2D convolution (adjoint of conv2d's linear map), NCHW.
/// weight shape (Ci, Co, k, k), bias (Co). H_out = (H - 1) stride - 2 pad + k.
TensorPtr tconv2d(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                  int stride, int pad);

/// Fully connected: x (N, F), weight (K, F), bias (K) -> (N, K).
TensorPtr linear(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);

/// Mean softmax cross-entropy of logits (N, K) against integer labels.
TensorPtr softmax_cross_entropy(const TensorPtr& logits, const std::vector<int>& labels);

}  // namespace uvforge
