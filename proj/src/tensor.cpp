#include "uvforge/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace uvforge {

namespace {

TensorPtr make_node(std::vector<int> shape, Eigen::VectorXd values,
                    std::vector<TensorPtr> parents) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->values = std::move(values);
    t->parents = std::move(parents);
    return t;
}

Eigen::Index shape_size(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
        n *= d;
    }
    return n;
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void check_4d(const TensorPtr& x, const char* op) {
    if (x->shape.size() != 4)
        throw std::invalid_argument(std::string(op) + ": expected NCHW tensor");
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;

// Convolution footprint shared by conv2d and tconv2d. (ci, h, w) is the
// gathered side, (ho, wo) the column grid: x[ci, oy*stride-pad+ky, ...].
struct ConvGeom {
    int n, ci, h, w, k, stride, pad, ho, wo;
    Eigen::Index cols() const { return static_cast<Eigen::Index>(n) * ho * wo; }
    Eigen::Index rows() const { return static_cast<Eigen::Index>(ci) * k * k; }
};

Eigen::MatrixXd im2col(const Eigen::VectorXd& x, const ConvGeom& g) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(g.rows(), g.cols());
    for (int n = 0; n < g.n; ++n)
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                const Eigen::Index col =
                    (static_cast<Eigen::Index>(n) * g.ho + oy) * g.wo + ox;
                for (int ci = 0; ci < g.ci; ++ci)
                    for (int ky = 0; ky < g.k; ++ky) {
                        const int y = oy * g.stride - g.pad + ky;
                        if (y < 0 || y >= g.h) continue;
                        for (int kx = 0; kx < g.k; ++kx) {
                            const int xx = ox * g.stride - g.pad + kx;
                            if (xx < 0 || xx >= g.w) continue;
                            m((static_cast<Eigen::Index>(ci) * g.k + ky) * g.k + kx, col) =
                                x[((static_cast<Eigen::Index>(n) * g.ci + ci) * g.h + y) *
                                      g.w +
                                  xx];
                        }
                    }
            }
    return m;
}

void col2im_add(const Eigen::MatrixXd& m, const ConvGeom& g, Eigen::VectorXd& x) {
    for (int n = 0; n < g.n; ++n)
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                const Eigen::Index col =
                    (static_cast<Eigen::Index>(n) * g.ho + oy) * g.wo + ox;
                for (int ci = 0; ci < g.ci; ++ci)
                    for (int ky = 0; ky < g.k; ++ky) {
                        const int y = oy * g.stride - g.pad + ky;
                        if (y < 0 || y >= g.h) continue;
                        for (int kx = 0; kx < g.k; ++kx) {
                            const int xx = ox * g.stride - g.pad + kx;
                            if (xx < 0 || xx >= g.w) continue;
                            x[((static_cast<Eigen::Index>(n) * g.ci + ci) * g.h + y) * g.w +
                              xx] +=
                                m((static_cast<Eigen::Index>(ci) * g.k + ky) * g.k + kx, col);
                        }
                    }
            }
}

// Elementwise helper: forward values f(x), backward factor df(x) applied to
// the incoming grad.
template <typename F, typename DF>
TensorPtr elementwise(const TensorPtr& x, F f, DF df) {
    Eigen::VectorXd v(x->numel());
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f(x->values[i]);
    TensorPtr out = make_node(x->shape, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px, df]() {
        for (Eigen::Index i = 0; i < self->grad.size(); ++i)
            px->grad[i] += self->grad[i] * df(px->values[i]);
    };
    return out;
}

}  // namespace

TensorPtr tensor_const(const std::vector<int>& shape, double fill) {
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->values = Eigen::VectorXd::Constant(shape_size(shape), fill);
    return t;
}

TensorPtr tensor_from(const std::vector<int>& shape, Eigen::VectorXd values,
                      bool requires_grad) {
    if (shape_size(shape) != values.size())
        throw std::invalid_argument("tensor_from: size mismatch");
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->values = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr tensor_param(const std::vector<int>& shape, Rng& rng, double scale) {
    Eigen::VectorXd v(shape_size(shape));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-scale, scale);
    return tensor_from(shape, std::move(v), true);
}

void backward(const TensorPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null loss");
    if (loss->released) throw std::runtime_error("backward: graph already released");
    if (!loss->is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->values.allFinite()) throw std::runtime_error("backward: non-finite loss");

    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> seen;
    struct Frame {
        Tensor* node;
        std::size_t next;
    };
    std::vector<Frame> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            Tensor* p = f.node->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (Tensor* t : topo) t->ensure_grad();
    loss->grad(0) = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
    for (Tensor* t : topo)
        if (t->backward_fn) {
            t->backward_fn = nullptr;
            t->parents.clear();
            t->released = true;
        }
}

void zero_grad(const std::vector<TensorPtr>& params) {
    for (const TensorPtr& p : params) p->grad = Eigen::VectorXd::Zero(p->numel());
}

void sgd_step(const std::vector<TensorPtr>& params, double lr) {
    for (const TensorPtr& p : params) {
        if (p->grad.size() != p->numel())
            throw std::runtime_error("sgd_step: parameter has no gradient");
        p->values -= lr * p->grad;
    }
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "add");
    TensorPtr out = make_node(a->shape, a->values + b->values, {a, b});
    Tensor* self = out.get();
    Tensor *pa = a.get(), *pb = b.get();
    out->backward_fn = [self, pa, pb]() {
        pa->grad += self->grad;
        pb->grad += self->grad;
    };
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "sub");
    TensorPtr out = make_node(a->shape, a->values - b->values, {a, b});
    Tensor* self = out.get();
    Tensor *pa = a.get(), *pb = b.get();
    out->backward_fn = [self, pa, pb]() {
        pa->grad += self->grad;
        pb->grad -= self->grad;
    };
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "mul");
    TensorPtr out = make_node(a->shape, a->values.cwiseProduct(b->values), {a, b});
    Tensor* self = out.get();
    Tensor *pa = a.get(), *pb = b.get();
    out->backward_fn = [self, pa, pb]() {
        pa->grad.array() += self->grad.array() * pb->values.array();
        pb->grad.array() += self->grad.array() * pa->values.array();
    };
    return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
    TensorPtr out = make_node(x->shape, c * x->values, {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px, c]() { px->grad += c * self->grad; };
    return out;
}

TensorPtr add_scalar(const TensorPtr& x, double c) {
    TensorPtr out = make_node(x->shape, x->values.array() + c, {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px]() { px->grad += self->grad; };
    return out;
}

TensorPtr abs_val(const TensorPtr& x) {
    return elementwise(
        x, [](double v) { return std::abs(v); },
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

TensorPtr square(const TensorPtr& x) {
    return elementwise(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

TensorPtr log_val(const TensorPtr& x) {
    if (x->values.minCoeff() <= 0.0)
        throw std::invalid_argument("log_val: requires strictly positive input");
    return elementwise(x, [](double v) { return std::log(v); },
                       [](double v) { return 1.0 / v; });
}

TensorPtr relu(const TensorPtr& x) {
    return elementwise(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

TensorPtr leaky_relu(const TensorPtr& x, double slope) {
    return elementwise(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                       [slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

TensorPtr sigmoid(const TensorPtr& x) {
    Eigen::VectorXd v(x->numel());
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-x->values[i]));
    TensorPtr out = make_node(x->shape, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px]() {
        px->grad.array() +=
            self->grad.array() * self->values.array() * (1.0 - self->values.array());
    };
    return out;
}

TensorPtr clamp_val(const TensorPtr& x, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp_val: lo must be below hi");
    return elementwise(
        x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

TensorPtr mean_all(const TensorPtr& x) {
    Eigen::VectorXd v(1);
    v(0) = x->values.mean();
    TensorPtr out = make_node({1}, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    const double inv = 1.0 / static_cast<double>(x->numel());
    out->backward_fn = [self, px, inv]() { px->grad.array() += self->grad(0) * inv; };
    return out;
}

TensorPtr instance_norm(const TensorPtr& x, double eps) {
    check_4d(x, "instance_norm");
    if (!(eps > 0.0)) throw std::invalid_argument("instance_norm: eps must be positive");
    const int n = x->dim(0), c = x->dim(1);
    const Eigen::Index plane = static_cast<Eigen::Index>(x->dim(2)) * x->dim(3);
    Eigen::VectorXd v(x->numel());
    Eigen::VectorXd inv_sd(static_cast<Eigen::Index>(n) * c);
    for (Eigen::Index g = 0; g < static_cast<Eigen::Index>(n) * c; ++g) {
        const auto seg = x->values.segment(g * plane, plane);
        const double mu = seg.mean();
        const double var = (seg.array() - mu).square().mean();
        inv_sd[g] = 1.0 / std::sqrt(var + eps);
        v.segment(g * plane, plane) = (seg.array() - mu) * inv_sd[g];
    }
    TensorPtr out = make_node({n, c, x->dim(2), x->dim(3)}, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px, n, c, plane, inv_sd = std::move(inv_sd)]() {
        // dx = inv_sd * (dy - mean(dy) - xhat * mean(dy * xhat))
        for (Eigen::Index g = 0; g < static_cast<Eigen::Index>(n) * c; ++g) {
            const auto dy = self->grad.segment(g * plane, plane);
            const auto xhat = self->values.segment(g * plane, plane);
            const double m_dy = dy.mean();
            const double m_dyx = (dy.array() * xhat.array()).mean();
            px->grad.segment(g * plane, plane).array() +=
                inv_sd[g] * (dy.array() - m_dy - xhat.array() * m_dyx);
        }
    };
    return out;
}

TensorPtr reshape(const TensorPtr& x, const std::vector<int>& shape) {
    if (shape_size(shape) != x->numel())
        throw std::invalid_argument("reshape: element count mismatch");
    TensorPtr out = make_node(shape, x->values, {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px]() { px->grad += self->grad; };
    return out;
}

TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b) {
    check_4d(a, "concat_channels");
    check_4d(b, "concat_channels");
    if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3))
        throw std::invalid_argument("concat_channels: incompatible shapes");
    const int n = a->dim(0), ca = a->dim(1), cb = b->dim(1);
    const Eigen::Index block_a = static_cast<Eigen::Index>(ca) * a->dim(2) * a->dim(3);
    const Eigen::Index block_b = static_cast<Eigen::Index>(cb) * b->dim(2) * b->dim(3);
    Eigen::VectorXd v(a->numel() + b->numel());
    for (int i = 0; i < n; ++i) {
        v.segment(i * (block_a + block_b), block_a) = a->values.segment(i * block_a, block_a);
        v.segment(i * (block_a + block_b) + block_a, block_b) =
            b->values.segment(i * block_b, block_b);
    }
    TensorPtr out = make_node({n, ca + cb, a->dim(2), a->dim(3)}, std::move(v), {a, b});
    Tensor* self = out.get();
    Tensor *pa = a.get(), *pb = b.get();
    out->backward_fn = [self, pa, pb, n, block_a, block_b]() {
        for (int i = 0; i < n; ++i) {
            pa->grad.segment(i * block_a, block_a) +=
                self->grad.segment(i * (block_a + block_b), block_a);
            pb->grad.segment(i * block_b, block_b) +=
                self->grad.segment(i * (block_a + block_b) + block_a, block_b);
        }
    };
    return out;
}

TensorPtr slice_channels(const TensorPtr& x, int start, int count) {
    check_4d(x, "slice_channels");
    const int c = x->dim(1);
    if (start < 0 || count < 1 || start + count > c)
        throw std::invalid_argument("slice_channels: range outside channels");
    const int n = x->dim(0), h = x->dim(2), w = x->dim(3);
    const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
    const Eigen::Index in_block = static_cast<Eigen::Index>(c) * plane;
    const Eigen::Index out_block = static_cast<Eigen::Index>(count) * plane;
    Eigen::VectorXd v(static_cast<Eigen::Index>(n) * out_block);
    for (int i = 0; i < n; ++i)
        v.segment(i * out_block, out_block) =
            x->values.segment(i * in_block + start * plane, out_block);
    TensorPtr out = make_node({n, count, h, w}, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px, n, start, plane, in_block, out_block]() {
        for (int i = 0; i < n; ++i)
            px->grad.segment(i * in_block + start * plane, out_block) +=
                self->grad.segment(i * out_block, out_block);
    };
    return out;
}

TensorPtr crop_center(const TensorPtr& x, double ratio) {
    check_4d(x, "crop_center");
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw std::invalid_argument("crop_center: ratio outside (0, 1]");
    const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    const int side =
        std::max(1, static_cast<int>(std::lround(ratio * std::min(h, w))));
    const int y0 = (h - side) / 2, x0 = (w - side) / 2;
    Eigen::VectorXd v(static_cast<Eigen::Index>(n) * c * side * side);
    auto src = [&](int ni, int ci, int y, int xx) {
        return ((static_cast<Eigen::Index>(ni) * c + ci) * h + y) * w + xx;
    };
    Eigen::Index out_i = 0;
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < side; ++y)
                for (int xx = 0; xx < side; ++xx)
                    v[out_i++] = x->values[src(ni, ci, y0 + y, x0 + xx)];
    TensorPtr out = make_node({n, c, side, side}, std::move(v), {x});
    Tensor* self = out.get();
    Tensor* px = x.get();
    out->backward_fn = [self, px, n, c, h, w, side, y0, x0]() {
        Eigen::Index in_i = 0;
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < side; ++y)
                    for (int xx = 0; xx < side; ++xx)
                        px->grad[((static_cast<Eigen::Index>(ni) * c + ci) * h + y0 + y) * w +
                                 x0 + xx] += self->grad[in_i++];
    };
    return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                 int stride, int pad) {
    check_4d(x, "conv2d");
    if (weight->shape.size() != 4 || weight->dim(2) != weight->dim(3))
        throw std::invalid_argument("conv2d: weight must be (Co, Ci, k, k)");
    const int co = weight->dim(0), ci = weight->dim(1), k = weight->dim(2);
    if (x->dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (bias->shape != std::vector<int>{co})
        throw std::invalid_argument("conv2d: bias must be (Co)");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    const int n = x->dim(0), h = x->dim(2), w = x->dim(3);
    if ((h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 ||
        h + 2 * pad < k || w + 2 * pad < k)
        throw std::invalid_argument("conv2d: geometry does not tile exactly");
    const ConvGeom g{n, ci, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                     (w + 2 * pad - k) / stride + 1};

    const Eigen::MatrixXd m = im2col(x->values, g);
    const MapRowC wmat(weight->values.data(), co, g.rows());
    Eigen::MatrixXd y = wmat * m;
    y.colwise() += Eigen::VectorXd::Map(bias->values.data(), co);

    Eigen::VectorXd v(static_cast<Eigen::Index>(n) * co * g.ho * g.wo);
    const Eigen::Index spatial = static_cast<Eigen::Index>(g.ho) * g.wo;
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < co; ++c)
            for (Eigen::Index s = 0; s < spatial; ++s)
                v[(static_cast<Eigen::Index>(ni) * co + c) * spatial + s] =
                    y(c, ni * spatial + s);

    TensorPtr out = make_node({n, co, g.ho, g.wo}, std::move(v), {x, weight, bias});
    Tensor* self = out.get();
    Tensor *px = x.get(), *pw = weight.get(), *pb = bias.get();
    out->backward_fn = [self, px, pw, pb, g, n, co, spatial]() {
        Eigen::MatrixXd dy(co, g.cols());
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < co; ++c)
                for (Eigen::Index s = 0; s < spatial; ++s)
                    dy(c, ni * spatial + s) =
                        self->grad[(static_cast<Eigen::Index>(ni) * co + c) * spatial + s];
        const Eigen::MatrixXd m = im2col(px->values, g);
        MapRow dwmat(pw->grad.data(), co, g.rows());
        dwmat.noalias() += dy * m.transpose();
        Eigen::VectorXd::Map(pb->grad.data(), co) += dy.rowwise().sum();
        const MapRowC wmat(pw->values.data(), co, g.rows());
        const Eigen::MatrixXd dm = wmat.transpose() * dy;
        col2im_add(dm, g, px->grad);
    };
    return out;
}

TensorPtr tconv2d(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                  int stride, int pad) {
    check_4d(x, "tconv2d");
    if (weight->shape.size() != 4 || weight->dim(2) != weight->dim(3))
        throw std::invalid_argument("tconv2d: weight must be (Ci, Co, k, k)");
    const int ci = weight->dim(0), co = weight->dim(1), k = weight->dim(2);
    if (x->dim(1) != ci) throw std::invalid_argument("tconv2d: channel mismatch");
    if (bias->shape != std::vector<int>{co})
        throw std::invalid_argument("tconv2d: bias must be (Co)");
    if (stride < 1 || pad < 0) throw std::invalid_argument("tconv2d: bad stride/pad");
    const int n = x->dim(0), h = x->dim(2), w = x->dim(3);
    const int out_h = (h - 1) * stride - 2 * pad + k;
    const int out_w = (w - 1) * stride - 2 * pad + k;
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("tconv2d: empty output");
    // The output plays the gathered side of the shared footprint.
    const ConvGeom g{n, co, out_h, out_w, k, stride, pad, h, w};

    const Eigen::Index spatial_in = static_cast<Eigen::Index>(h) * w;
    Eigen::MatrixXd xmat(ci, g.cols());
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < ci; ++c)
            for (Eigen::Index s = 0; s < spatial_in; ++s)
                xmat(c, ni * spatial_in + s) =
                    x->values[(static_cast<Eigen::Index>(ni) * ci + c) * spatial_in + s];

    const MapRowC wmat(weight->values.data(), ci, static_cast<Eigen::Index>(co) * k * k);
    const Eigen::MatrixXd cols = wmat.transpose() * xmat;
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n) * co * out_h * out_w);
    col2im_add(cols, g, v);
    const Eigen::Index spatial_out = static_cast<Eigen::Index>(out_h) * out_w;
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < co; ++c)
            v.segment((static_cast<Eigen::Index>(ni) * co + c) * spatial_out, spatial_out)
                .array() += bias->values[c];

    TensorPtr out = make_node({n, co, out_h, out_w}, std::move(v), {x, weight, bias});
    Tensor* self = out.get();
    Tensor *px = x.get(), *pw = weight.get(), *pb = bias.get();
    out->backward_fn = [self, px, pw, pb, g, n, ci, co, spatial_in, spatial_out]() {
        const Eigen::MatrixXd mg = im2col(self->grad, g);
        const MapRowC wmat(pw->values.data(), ci, g.rows());
        const Eigen::MatrixXd dxmat = wmat * mg;
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < ci; ++c)
                for (Eigen::Index s = 0; s < spatial_in; ++s)
                    px->grad[(static_cast<Eigen::Index>(ni) * ci + c) * spatial_in + s] +=
                        dxmat(c, ni * spatial_in + s);
        Eigen::MatrixXd xmat(ci, g.cols());
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < ci; ++c)
                for (Eigen::Index s = 0; s < spatial_in; ++s)
                    xmat(c, ni * spatial_in + s) =
                        px->values[(static_cast<Eigen::Index>(ni) * ci + c) * spatial_in + s];
        MapRow dwmat(pw->grad.data(), ci, g.rows());
        dwmat.noalias() += xmat * mg.transpose();
        for (int ni = 0; ni < n; ++ni)
            for (int c = 0; c < co; ++c)
                pb->grad[c] += self->grad
                                   .segment((static_cast<Eigen::Index>(ni) * co + c) *
                                                spatial_out,
                                            spatial_out)
                                   .sum();
    };
    return out;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
    if (x->shape.size() != 2 || weight->shape.size() != 2)
        throw std::invalid_argument("linear: expected 2D tensors");
    const int n = x->dim(0), f = x->dim(1), k = weight->dim(0);
    if (weight->dim(1) != f) throw std::invalid_argument("linear: feature mismatch");
    if (bias->shape != std::vector<int>{k})
        throw std::invalid_argument("linear: bias must be (K)");

    const MapRowC xm(x->values.data(), n, f);
    const MapRowC wm(weight->values.data(), k, f);
    RowMat y = xm * wm.transpose();
    y.rowwise() += Eigen::RowVectorXd::Map(bias->values.data(), k);
    TensorPtr out =
        make_node({n, k}, Eigen::VectorXd::Map(y.data(), y.size()), {x, weight, bias});
    Tensor* self = out.get();
    Tensor *px = x.get(), *pw = weight.get(), *pb = bias.get();
    out->backward_fn = [self, px, pw, pb, n, f, k]() {
        const MapRowC dy(self->grad.data(), n, k);
        const MapRowC xm(px->values.data(), n, f);
        const MapRowC wm(pw->values.data(), k, f);
        MapRow dx(px->grad.data(), n, f);
        dx.noalias() += dy * wm;
        MapRow dw(pw->grad.data(), k, f);
        dw.noalias() += dy.transpose() * xm;
        Eigen::VectorXd::Map(pb->grad.data(), k) += dy.colwise().sum();
    };
    return out;
}

TensorPtr softmax_cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
    if (logits->shape.size() != 2)
        throw std::invalid_argument("softmax_cross_entropy: expected (N, K) logits");
    const int n = logits->dim(0), k = logits->dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= k)
            throw std::invalid_argument("softmax_cross_entropy: label out of range");

    const MapRowC lm(logits->values.data(), n, k);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double m = lm.row(i).maxCoeff();
        const double lse = m + std::log((lm.row(i).array() - m).exp().sum());
        total += lse - lm(i, labels[static_cast<std::size_t>(i)]);
    }
    Eigen::VectorXd v(1);
    v(0) = total / n;
    TensorPtr out = make_node({1}, std::move(v), {logits});
    Tensor* self = out.get();
    Tensor* pl = logits.get();
    out->backward_fn = [self, pl, labels, n, k]() {
        const MapRowC lm(pl->values.data(), n, k);
        MapRow dl(pl->grad.data(), n, k);
        const double g = self->grad(0) / n;
        for (int i = 0; i < n; ++i) {
            const double m = lm.row(i).maxCoeff();
            Eigen::RowVectorXd p = (lm.row(i).array() - m).exp();
            p /= p.sum();
            p(labels[static_cast<std::size_t>(i)]) -= 1.0;
            dl.row(i) += g * p;
        }
    };
    return out;
}

}  // namespace uvforge
