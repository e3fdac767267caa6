#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "focc/common.hpp"

namespace focc {

struct TensorImpl;
using NodePtr = std::shared_ptr<TensorImpl>;

// One node of the (per-step, discarded) reverse-mode tape.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; same size as data
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorImpl &)> backward_fn;
    uint64_t id = 0;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Graph recording is disabled inside a NoGradGuard scope (evaluation,
// frozen-encoder passes, running-stat updates).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr impl) : impl_(std::move(impl)) {}
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(const Shape &shape);
    static Tensor full(const Shape &shape, double value);
    static Tensor scalar(double value);
    static Tensor uniform(const Shape &shape, double lo, double hi, Rng &rng);
    static Tensor normal(const Shape &shape, double mean, double stddev, Rng &rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape &shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const;  // negative indices count from the back
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    double item() const;
    double at(std::initializer_list<int> idx) const;

    const std::vector<double> &data() const { return impl_->data; }
    // Direct mutation (init, optimizer updates); never tracked on the tape.
    std::vector<double> &mutable_data() { return impl_->data; }

    Tensor &set_requires_grad(bool r);
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
    const std::vector<double> &grad() const;
    std::vector<double> &mutable_grad();
    void zero_grad();

    // Reverse-mode sweep from a scalar root. Accumulates into existing grads.
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;

    NodePtr impl() const { return impl_; }

  private:
    NodePtr impl_;
};

// ---- node construction helper (used by op implementations) ----
Tensor make_node(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                 std::function<void(TensorImpl &)> backward_fn);

// ---- elementwise ops with right-aligned broadcasting ----
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor divide(const Tensor &a, const Tensor &b);
Tensor neg(const Tensor &a);
Tensor add_scalar(const Tensor &a, double s);
Tensor mul_scalar(const Tensor &a, double s);

inline Tensor operator+(const Tensor &a, const Tensor &b) { return add(a, b); }
inline Tensor operator-(const Tensor &a, const Tensor &b) { return sub(a, b); }
inline Tensor operator*(const Tensor &a, const Tensor &b) { return mul(a, b); }
inline Tensor operator/(const Tensor &a, const Tensor &b) { return divide(a, b); }
inline Tensor operator+(const Tensor &a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor &a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor &a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor &a) { return add_scalar(neg(a), s); }
inline Tensor operator*(const Tensor &a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor &a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor &a, double s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator-(const Tensor &a) { return neg(a); }

// ---- structural ops ----
Tensor reshape(const Tensor &a, const Shape &shape);
Tensor permute(const Tensor &a, const std::vector<int> &perm);
Tensor slice(const Tensor &a, int axis, int start, int len);
Tensor concat(const std::vector<Tensor> &parts, int axis);

// ---- reductions ----
Tensor sum(const Tensor &a);
Tensor sum(const Tensor &a, const std::vector<int> &axes, bool keepdim = false);
Tensor mean(const Tensor &a);
Tensor mean(const Tensor &a, const std::vector<int> &axes, bool keepdim = false);

// ---- pointwise functions ----
Tensor exp(const Tensor &a);
Tensor log(const Tensor &a);
Tensor sqrt(const Tensor &a);
Tensor relu(const Tensor &a);
Tensor softplus(const Tensor &a);
Tensor clamp(const Tensor &a, double lo, double hi);
Tensor clamp_min(const Tensor &a, double lo);

// Selects a where mask != 0, b elsewhere. The mask is treated as a constant.
Tensor where_mask(const Tensor &mask, const Tensor &a, const Tensor &b);

// ---- fused softmax family (max-subtraction stabilized) ----
Tensor softmax(const Tensor &a, int axis);
Tensor log_softmax(const Tensor &a, int axis);

// ---- contraction ----
// a: [.., m, k], b: [.., k, n]; leading extents broadcast.
Tensor matmul(const Tensor &a, const Tensor &b);

// ---- convolution family (in conv.cpp) ----
// x: [N, Ci, H, W], w: [Co, Ci, kh, kw], bias: [Co] or undefined.
Tensor conv2d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding);
// x: [N, Ci, H, W], w: [Ci, Co, kh, kw]; output spatial extent (in-1)*stride + k - 2*padding.
Tensor deconv2d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding = 0);
// x: [Ci, Z, Y, X], w: [Co, Ci, kz, ky, kx].
Tensor conv3d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding);
// conv3d over the virtual channel-concatenation of xs (never materialized).
Tensor conv3d_multi(const std::vector<Tensor> &xs, const Tensor &w, const Tensor &bias,
                    int stride, int padding);
// x: [Ci, Z, Y, X], w: [Ci, Co, kz, ky, kx].
Tensor deconv3d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding = 0);
// Half-pixel-center trilinear upsampling by an integer factor.
Tensor upsample3d_trilinear(const Tensor &x, int factor);

}  // namespace focc
