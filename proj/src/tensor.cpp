#include "focc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace focc {

namespace {

bool g_grad_enabled = true;
uint64_t g_next_id = 0;

int normalize_axis(int axis, int nd, const char *op) {
    int a = axis < 0 ? axis + nd : axis;
    if (a < 0 || a >= nd)
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(nd));
    return a;
}

std::vector<int64_t> contiguous_strides(const Shape &s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Iterates `shape` in row-major order, yielding (linear index, base + dot(idx, strides)).
// The strides need not be contiguous — this drives permute/slice/reduction mappings.
template <class F>
void strided_for_each(const Shape &shape, const std::vector<int64_t> &strides, int64_t base,
                      F &&f) {
    int nd = static_cast<int>(shape.size());
    if (shape_numel(shape) == 0) return;
    if (nd == 0) {
        f(int64_t{0}, base);
        return;
    }
    std::vector<int> idx(nd, 0);
    int64_t src = base;
    for (int64_t lin = 0;;) {
        f(lin, src);
        ++lin;
        int ax = nd - 1;
        while (ax >= 0) {
            idx[ax]++;
            src += strides[ax];
            if (idx[ax] < shape[ax]) break;
            src -= static_cast<int64_t>(idx[ax]) * strides[ax];
            idx[ax] = 0;
            --ax;
        }
        if (ax < 0) break;
    }
}

// Right-aligned broadcast of two shapes; strides are 0 along broadcast axes so a
// single odometer walk yields positions into both operands.
struct BCast2 {
    Shape out;
    std::vector<int64_t> sa, sb;
};

BCast2 make_bcast2(const Shape &a, const Shape &b, const char *op) {
    int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
    int nd = std::max(na, nb);
    BCast2 bc;
    bc.out.resize(nd);
    bc.sa.resize(nd);
    bc.sb.resize(nd);
    auto ca = contiguous_strides(a), cb = contiguous_strides(b);
    for (int i = 0; i < nd; ++i) {
        int da = i - (nd - na), db = i - (nd - nb);
        int ea = da >= 0 ? a[da] : 1;
        int eb = db >= 0 ? b[db] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b));
        bc.out[i] = std::max(ea, eb);
        bc.sa[i] = (da >= 0 && ea != 1) ? ca[da] : 0;
        bc.sb[i] = (db >= 0 && eb != 1) ? cb[db] : 0;
    }
    return bc;
}

template <class F>
void bcast2_for_each(const BCast2 &bc, F &&f) {
    int nd = static_cast<int>(bc.out.size());
    if (nd == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    if (shape_numel(bc.out) == 0) return;
    std::vector<int> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t lin = 0;;) {
        f(lin, ia, ib);
        ++lin;
        int ax = nd - 1;
        while (ax >= 0) {
            idx[ax]++;
            ia += bc.sa[ax];
            ib += bc.sb[ax];
            if (idx[ax] < bc.out[ax]) break;
            ia -= static_cast<int64_t>(idx[ax]) * bc.sa[ax];
            ib -= static_cast<int64_t>(idx[ax]) * bc.sb[ax];
            idx[ax] = 0;
            --ax;
        }
        if (ax < 0) break;
    }
}

Tensor make_leaf(Shape shape, std::vector<double> data) {
    auto node = std::make_shared<TensorImpl>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->id = ++g_next_id;
    return Tensor(node);
}

// Generic broadcast binary op. bwd fills (da, db) from (gout, a, b, out).
template <class Fwd, class Bwd>
Tensor ew_binary(const Tensor &A, const Tensor &B, const char *name, Fwd fwd, Bwd bwd) {
    NodePtr pa = A.impl(), pb = B.impl();
    BCast2 bc = make_bcast2(pa->shape, pb->shape, name);
    bool same = pa->shape == pb->shape;
    std::vector<double> out(static_cast<size_t>(shape_numel(bc.out)));
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa->data[i], pb->data[i]);
    } else {
        bcast2_for_each(bc, [&](int64_t lin, int64_t ia, int64_t ib) {
            out[lin] = fwd(pa->data[ia], pb->data[ib]);
        });
    }
    return make_node(bc.out, std::move(out), {pa, pb},
                     [pa, pb, bc, same, bwd](TensorImpl &self) {
                         bool ra = pa->requires_grad, rb = pb->requires_grad;
                         if (ra) pa->ensure_grad();
                         if (rb) pb->ensure_grad();
                         auto body = [&](int64_t lin, int64_t ia, int64_t ib) {
                             double da = 0.0, db = 0.0;
                             bwd(self.grad[lin], pa->data[ia], pb->data[ib], self.data[lin], da,
                                 db);
                             if (ra) pa->grad[ia] += da;
                             if (rb) pb->grad[ib] += db;
                         };
                         if (same) {
                             int64_t n = static_cast<int64_t>(self.data.size());
                             for (int64_t i = 0; i < n; ++i) body(i, i, i);
                         } else {
                             bcast2_for_each(bc, body);
                         }
                     });
}

// Same-shape pointwise op. bwd returns d(in) from (gout, in, out).
template <class Fwd, class Bwd>
Tensor ew_unary(const Tensor &A, Fwd fwd, Bwd bwd) {
    NodePtr pa = A.impl();
    std::vector<double> out(pa->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa->data[i]);
    return make_node(pa->shape, std::move(out), {pa}, [pa, bwd](TensorImpl &self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i)
            pa->grad[i] += bwd(self.grad[i], pa->data[i], self.data[i]);
    });
}

void lane_dims(const Shape &s, int axis, int64_t &outer, int64_t &n, int64_t &inner) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    inner = 1;
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_node(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                 std::function<void(TensorImpl &)> backward_fn) {
    auto node = std::make_shared<TensorImpl>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->id = ++g_next_id;
    if (g_grad_enabled) {
        for (const auto &p : parents) {
            if (p && p->requires_grad) {
                node->requires_grad = true;
                break;
            }
        }
        if (node->requires_grad) {
            node->parents = std::move(parents);
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(node);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    *this = make_leaf(std::move(shape), std::move(values));
}

Tensor Tensor::zeros(const Shape &shape) {
    return make_leaf(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0));
}

Tensor Tensor::full(const Shape &shape, double value) {
    return make_leaf(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return make_leaf({1}, {value}); }

Tensor Tensor::uniform(const Shape &shape, double lo, double hi, Rng &rng) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto &x : v) x = rng.uniform(lo, hi);
    return make_leaf(shape, std::move(v));
}

Tensor Tensor::normal(const Shape &shape, double mean, double stddev, Rng &rng) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto &x : v) x = rng.normal(mean, stddev);
    return make_leaf(shape, std::move(v));
}

int Tensor::dim(int i) const {
    int nd = ndim();
    int a = i < 0 ? i + nd : i;
    if (a < 0 || a >= nd)
        throw ShapeError("dim: index " + std::to_string(i) + " out of range for rank " +
                         std::to_string(nd));
    return impl_->shape[a];
}

double Tensor::item() const {
    if (impl_->data.size() != 1)
        throw ShapeError("item: tensor of shape " + shape_str(impl_->shape) + " is not a scalar");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape &s = impl_->shape;
    if (idx.size() != s.size())
        throw ShapeError("at: " + std::to_string(idx.size()) + " indices for rank " +
                         std::to_string(s.size()));
    int64_t lin = 0, stride = 1;
    int i = static_cast<int>(s.size()) - 1;
    auto it = idx.end();
    while (i >= 0) {
        --it;
        int v = *it;
        if (v < 0 || v >= s[i]) throw ShapeError("at: index out of bounds");
        lin += static_cast<int64_t>(v) * stride;
        stride *= s[i];
        --i;
    }
    return impl_->data[static_cast<size_t>(lin)];
}

Tensor &Tensor::set_requires_grad(bool r) {
    impl_->requires_grad = r;
    return *this;
}

const std::vector<double> &Tensor::grad() const {
    if (!has_grad())
        throw ContractError("grad: no gradient has been computed for this tensor");
    return impl_->grad;
}

std::vector<double> &Tensor::mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (!impl_) throw ContractError("backward: undefined tensor");
    if (impl_->data.size() != 1)
        throw ContractError("backward: root must be a scalar, got shape " +
                            shape_str(impl_->shape));
    if (!impl_->requires_grad) return;

    // Post-order DFS over parent edges; reversed post-order is a topological
    // order, so each node's backward runs after every consumer has contributed.
    std::vector<TensorImpl *> order;
    std::unordered_set<TensorImpl *> visited;
    struct Frame {
        TensorImpl *node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame &fr = stack.back();
        if (fr.next < fr.node->parents.size()) {
            TensorImpl *p = fr.node->parents[fr.next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(fr.node);
            stack.pop_back();
        }
    }
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Tensor Tensor::detach() const { return make_leaf(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
    return ew_unary(
        *this, [](double x) { return x; }, [](double g, double, double) { return g; });
}

// ---- elementwise ----

Tensor add(const Tensor &a, const Tensor &b) {
    return ew_binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, double, double &da, double &db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    return ew_binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, double, double &da, double &db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor &a, const Tensor &b) {
    return ew_binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, double, double &da, double &db) {
            da = g * y;
            db = g * x;
        });
}

Tensor divide(const Tensor &a, const Tensor &b) {
    return ew_binary(
        a, b, "divide", [](double x, double y) { return x / y; },
        [](double g, double x, double y, double, double &da, double &db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor neg(const Tensor &a) {
    return ew_unary(
        a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor add_scalar(const Tensor &a, double s) {
    return ew_unary(
        a, [s](double x) { return x + s; }, [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor &a, double s) {
    return ew_unary(
        a, [s](double x) { return x * s; }, [s](double g, double, double) { return g * s; });
}

// ---- structural ----

Tensor reshape(const Tensor &a, const Shape &shape) {
    NodePtr pa = a.impl();
    Shape s = shape;
    int64_t known = 1;
    int infer = -1;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        if (s[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
            infer = i;
        } else {
            if (s[i] <= 0) throw ShapeError("reshape: bad extent in " + shape_str(shape));
            known *= s[i];
        }
    }
    int64_t total = static_cast<int64_t>(pa->data.size());
    if (infer >= 0) {
        if (total % known != 0)
            throw ShapeError("reshape: cannot infer -1 viewing " + shape_str(pa->shape) + " as " +
                             shape_str(shape));
        s[infer] = static_cast<int>(total / known);
    } else if (known != total) {
        throw ShapeError("reshape: cannot view " + shape_str(pa->shape) + " as " +
                         shape_str(shape));
    }
    std::vector<double> out = pa->data;
    return make_node(s, std::move(out), {pa}, [pa](TensorImpl &self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

Tensor permute(const Tensor &a, const std::vector<int> &perm) {
    NodePtr pa = a.impl();
    int nd = static_cast<int>(pa->shape.size());
    if (static_cast<int>(perm.size()) != nd)
        throw ShapeError("permute: " + std::to_string(perm.size()) + " axes for rank " +
                         std::to_string(nd));
    std::vector<char> seen(nd, 0);
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) {
        int p = perm[i];
        if (p < 0 || p >= nd || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = 1;
        out_shape[i] = pa->shape[p];
    }
    auto in_strides = contiguous_strides(pa->shape);
    std::vector<int64_t> map(nd);
    for (int i = 0; i < nd; ++i) map[i] = in_strides[perm[i]];
    std::vector<double> out(pa->data.size());
    strided_for_each(out_shape, map, 0,
                     [&](int64_t lin, int64_t src) { out[lin] = pa->data[src]; });
    return make_node(out_shape, std::move(out), {pa},
                     [pa, out_shape, map](TensorImpl &self) {
                         if (!pa->requires_grad) return;
                         pa->ensure_grad();
                         strided_for_each(out_shape, map, 0, [&](int64_t lin, int64_t src) {
                             pa->grad[src] += self.grad[lin];
                         });
                     });
}

Tensor slice(const Tensor &a, int axis, int start, int len) {
    NodePtr pa = a.impl();
    int nd = static_cast<int>(pa->shape.size());
    int ax = normalize_axis(axis, nd, "slice");
    if (start < 0 || len < 0 || start + len > pa->shape[ax])
        throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") exceeds extent " + std::to_string(pa->shape[ax]) + " on axis " +
                         std::to_string(ax));
    Shape out_shape = pa->shape;
    out_shape[ax] = len;
    auto in_strides = contiguous_strides(pa->shape);
    int64_t base = static_cast<int64_t>(start) * in_strides[ax];
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    strided_for_each(out_shape, in_strides, base,
                     [&](int64_t lin, int64_t src) { out[lin] = pa->data[src]; });
    return make_node(out_shape, std::move(out), {pa},
                     [pa, out_shape, in_strides, base](TensorImpl &self) {
                         if (!pa->requires_grad) return;
                         pa->ensure_grad();
                         strided_for_each(out_shape, in_strides, base,
                                          [&](int64_t lin, int64_t src) {
                                              pa->grad[src] += self.grad[lin];
                                          });
                     });
}

Tensor concat(const std::vector<Tensor> &parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int nd = parts[0].ndim();
    int ax = normalize_axis(axis, nd, "concat");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto &p : parts) {
        if (p.ndim() != nd)
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
        for (int i = 0; i < nd; ++i)
            if (i != ax && p.shape()[i] != out_shape[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()) + " on axis " + std::to_string(i));
        total += p.shape()[ax];
    }
    out_shape[ax] = static_cast<int>(total);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[i];
    for (int i = ax + 1; i < nd; ++i) inner *= out_shape[i];
    int64_t total_inner = total * inner;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<NodePtr> ps;
    int64_t off = 0;
    for (const auto &p : parts) {
        int64_t blk = static_cast<int64_t>(p.shape()[ax]) * inner;
        const auto &src = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(src.begin() + o * blk, src.begin() + (o + 1) * blk,
                      out.begin() + o * total_inner + off);
        off += blk;
        ps.push_back(p.impl());
    }
    return make_node(out_shape, std::move(out), ps,
                     [ps, outer, inner, total_inner, ax](TensorImpl &self) {
                         int64_t off = 0;
                         for (const auto &pp : ps) {
                             int64_t blk = static_cast<int64_t>(pp->shape[ax]) * inner;
                             if (pp->requires_grad) {
                                 pp->ensure_grad();
                                 for (int64_t o = 0; o < outer; ++o) {
                                     const double *g = self.grad.data() + o * total_inner + off;
                                     double *dst = pp->grad.data() + o * blk;
                                     for (int64_t i = 0; i < blk; ++i) dst[i] += g[i];
                                 }
                             }
                             off += blk;
                         }
                     });
}

// ---- reductions ----

Tensor sum(const Tensor &a) {
    NodePtr pa = a.impl();
    double acc = 0.0;
    for (double v : pa->data) acc += v;
    return make_node({1}, {acc}, {pa}, [pa](TensorImpl &self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        double g = self.grad[0];
        for (auto &gv : pa->grad) gv += g;
    });
}

Tensor mean(const Tensor &a) {
    NodePtr pa = a.impl();
    if (pa->data.empty()) throw ShapeError("mean: empty tensor");
    double acc = 0.0;
    for (double v : pa->data) acc += v;
    double inv = 1.0 / static_cast<double>(pa->data.size());
    return make_node({1}, {acc * inv}, {pa}, [pa, inv](TensorImpl &self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        double g = self.grad[0] * inv;
        for (auto &gv : pa->grad) gv += g;
    });
}

namespace {

// Shared machinery for axis reductions: `map` sends each input position to its
// output slot (stride 0 along reduced axes).
Tensor reduce_axes(const Tensor &a, const std::vector<int> &axes, bool keepdim, double scale_pow,
                   const char *op) {
    NodePtr pa = a.impl();
    int nd = static_cast<int>(pa->shape.size());
    if (axes.empty()) throw ShapeError(std::string(op) + ": no axes given");
    std::vector<char> red(nd, 0);
    int64_t count = 1;
    for (int axis : axes) {
        int ax = normalize_axis(axis, nd, op);
        if (red[ax]) throw ShapeError(std::string(op) + ": duplicate axis");
        red[ax] = 1;
        count *= pa->shape[ax];
    }
    Shape kept = pa->shape;
    for (int i = 0; i < nd; ++i)
        if (red[i]) kept[i] = 1;
    auto kstrides = contiguous_strides(kept);
    std::vector<int64_t> map(nd);
    for (int i = 0; i < nd; ++i) map[i] = red[i] ? 0 : kstrides[i];
    double scale = scale_pow == 0.0 ? 1.0 : 1.0 / static_cast<double>(count);
    std::vector<double> out(static_cast<size_t>(shape_numel(kept)), 0.0);
    strided_for_each(pa->shape, map, 0,
                     [&](int64_t lin, int64_t dst) { out[dst] += pa->data[lin]; });
    if (scale != 1.0)
        for (auto &v : out) v *= scale;
    Shape out_shape;
    if (keepdim) {
        out_shape = kept;
    } else {
        for (int i = 0; i < nd; ++i)
            if (!red[i]) out_shape.push_back(pa->shape[i]);
        if (out_shape.empty()) out_shape.push_back(1);
    }
    Shape in_shape = pa->shape;
    return make_node(out_shape, std::move(out), {pa},
                     [pa, in_shape, map, scale](TensorImpl &self) {
                         if (!pa->requires_grad) return;
                         pa->ensure_grad();
                         strided_for_each(in_shape, map, 0, [&](int64_t lin, int64_t dst) {
                             pa->grad[lin] += self.grad[dst] * scale;
                         });
                     });
}

}  // namespace

Tensor sum(const Tensor &a, const std::vector<int> &axes, bool keepdim) {
    return reduce_axes(a, axes, keepdim, 0.0, "sum");
}

Tensor mean(const Tensor &a, const std::vector<int> &axes, bool keepdim) {
    return reduce_axes(a, axes, keepdim, 1.0, "mean");
}

// ---- pointwise ----

Tensor exp(const Tensor &a) {
    return ew_unary(
        a, [](double x) { return std::exp(x); },
        [](double g, double, double o) { return g * o; });
}

Tensor log(const Tensor &a) {
    return ew_unary(
        a, [](double x) { return std::log(x); },
        [](double g, double x, double) { return g / x; });
}

Tensor sqrt(const Tensor &a) {
    return ew_unary(
        a, [](double x) { return std::sqrt(x); },
        [](double g, double, double o) { return g * 0.5 / o; });
}

Tensor relu(const Tensor &a) {
    return ew_unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor softplus(const Tensor &a) {
    return ew_unary(
        a,
        [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double g, double x, double) {
            double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : [](double e) { return e / (1.0 + e); }(std::exp(x));
            return g * s;
        });
}

Tensor clamp(const Tensor &a, double lo, double hi) {
    if (lo > hi) throw ShapeError("clamp: lo > hi");
    return ew_unary(
        a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](double g, double x, double) { return (x >= lo && x <= hi) ? g : 0.0; });
}

Tensor clamp_min(const Tensor &a, double lo) {
    return ew_unary(
        a, [lo](double x) { return std::max(x, lo); },
        [lo](double g, double x, double) { return x >= lo ? g : 0.0; });
}

Tensor where_mask(const Tensor &mask, const Tensor &a, const Tensor &b) {
    // Broadcast the two branch tensors first, then against the mask. The mask
    // contributes no gradient.
    NodePtr pm = mask.impl(), pa = a.impl(), pb = b.impl();
    BCast2 ab = make_bcast2(pa->shape, pb->shape, "where_mask");
    BCast2 mo = make_bcast2(pm->shape, ab.out, "where_mask");
    const Shape &out_shape = mo.out;
    int nd = static_cast<int>(out_shape.size());
    // Re-derive per-axis strides for all three operands against the final shape.
    auto align = [&](const Shape &s) {
        std::vector<int64_t> st(nd, 0);
        auto cs = contiguous_strides(s);
        int ns = static_cast<int>(s.size());
        for (int i = 0; i < nd; ++i) {
            int d = i - (nd - ns);
            if (d >= 0 && s[d] != 1) {
                if (s[d] != out_shape[i])
                    throw ShapeError("where_mask: cannot broadcast " + shape_str(s) + " to " +
                                     shape_str(out_shape));
                st[i] = cs[d];
            }
        }
        return st;
    };
    std::vector<int64_t> sm = align(pm->shape), sa = align(pa->shape), sb = align(pb->shape);
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int> idx(nd, 0);
    int64_t im = 0, ia = 0, ib = 0;
    auto walk = [&](auto &&body) {
        std::fill(idx.begin(), idx.end(), 0);
        im = ia = ib = 0;
        if (nd == 0) {
            body(int64_t{0});
            return;
        }
        if (shape_numel(out_shape) == 0) return;
        for (int64_t lin = 0;;) {
            body(lin);
            ++lin;
            int ax = nd - 1;
            while (ax >= 0) {
                idx[ax]++;
                im += sm[ax];
                ia += sa[ax];
                ib += sb[ax];
                if (idx[ax] < out_shape[ax]) break;
                im -= static_cast<int64_t>(idx[ax]) * sm[ax];
                ia -= static_cast<int64_t>(idx[ax]) * sa[ax];
                ib -= static_cast<int64_t>(idx[ax]) * sb[ax];
                idx[ax] = 0;
                --ax;
            }
            if (ax < 0) break;
        }
    };
    walk([&](int64_t lin) { out[lin] = pm->data[im] != 0.0 ? pa->data[ia] : pb->data[ib]; });
    return make_node(out_shape, std::move(out), {pa, pb, pm},
                     [pm, pa, pb, out_shape, sm, sa, sb, nd](TensorImpl &self) mutable {
                         bool ra = pa->requires_grad, rb = pb->requires_grad;
                         if (!ra && !rb) return;
                         if (ra) pa->ensure_grad();
                         if (rb) pb->ensure_grad();
                         std::vector<int> idx(nd, 0);
                         int64_t im = 0, ia = 0, ib = 0;
                         if (nd == 0 || shape_numel(out_shape) > 0) {
                             for (int64_t lin = 0;;) {
                                 if (pm->data[im] != 0.0) {
                                     if (ra) pa->grad[ia] += self.grad[lin];
                                 } else {
                                     if (rb) pb->grad[ib] += self.grad[lin];
                                 }
                                 ++lin;
                                 if (nd == 0) break;
                                 int ax = nd - 1;
                                 while (ax >= 0) {
                                     idx[ax]++;
                                     im += sm[ax];
                                     ia += sa[ax];
                                     ib += sb[ax];
                                     if (idx[ax] < out_shape[ax]) break;
                                     im -= static_cast<int64_t>(idx[ax]) * sm[ax];
                                     ia -= static_cast<int64_t>(idx[ax]) * sa[ax];
                                     ib -= static_cast<int64_t>(idx[ax]) * sb[ax];
                                     idx[ax] = 0;
                                     --ax;
                                 }
                                 if (ax < 0) break;
                             }
                         }
                     });
}

// ---- softmax family ----

Tensor softmax(const Tensor &a, int axis) {
    NodePtr pa = a.impl();
    int ax = normalize_axis(axis, static_cast<int>(pa->shape.size()), "softmax");
    int64_t outer, n, inner;
    lane_dims(pa->shape, ax, outer, n, inner);
    std::vector<double> out(pa->data.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * n * inner + in;
            double m = pa->data[base];
            for (int64_t j = 1; j < n; ++j) m = std::max(m, pa->data[base + j * inner]);
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                double e = std::exp(pa->data[base + j * inner] - m);
                out[base + j * inner] = e;
                s += e;
            }
            double invs = 1.0 / s;
            for (int64_t j = 0; j < n; ++j) out[base + j * inner] *= invs;
        }
    }
    return make_node(pa->shape, std::move(out), {pa},
                     [pa, outer, n, inner](TensorImpl &self) {
                         if (!pa->requires_grad) return;
                         pa->ensure_grad();
                         for (int64_t o = 0; o < outer; ++o) {
                             for (int64_t in = 0; in < inner; ++in) {
                                 int64_t base = o * n * inner + in;
                                 double dot = 0.0;
                                 for (int64_t j = 0; j < n; ++j)
                                     dot += self.grad[base + j * inner] *
                                            self.data[base + j * inner];
                                 for (int64_t j = 0; j < n; ++j) {
                                     int64_t k = base + j * inner;
                                     pa->grad[k] += self.data[k] * (self.grad[k] - dot);
                                 }
                             }
                         }
                     });
}

Tensor log_softmax(const Tensor &a, int axis) {
    NodePtr pa = a.impl();
    int ax = normalize_axis(axis, static_cast<int>(pa->shape.size()), "log_softmax");
    int64_t outer, n, inner;
    lane_dims(pa->shape, ax, outer, n, inner);
    std::vector<double> out(pa->data.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * n * inner + in;
            double m = pa->data[base];
            for (int64_t j = 1; j < n; ++j) m = std::max(m, pa->data[base + j * inner]);
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += std::exp(pa->data[base + j * inner] - m);
            double lse = m + std::log(s);
            for (int64_t j = 0; j < n; ++j)
                out[base + j * inner] = pa->data[base + j * inner] - lse;
        }
    }
    return make_node(pa->shape, std::move(out), {pa},
                     [pa, outer, n, inner](TensorImpl &self) {
                         if (!pa->requires_grad) return;
                         pa->ensure_grad();
                         for (int64_t o = 0; o < outer; ++o) {
                             for (int64_t in = 0; in < inner; ++in) {
                                 int64_t base = o * n * inner + in;
                                 double gs = 0.0;
                                 for (int64_t j = 0; j < n; ++j)
                                     gs += self.grad[base + j * inner];
                                 for (int64_t j = 0; j < n; ++j) {
                                     int64_t k = base + j * inner;
                                     pa->grad[k] += self.grad[k] - std::exp(self.data[k]) * gs;
                                 }
                             }
                         }
                     });
}

// ---- matmul ----

Tensor matmul(const Tensor &a, const Tensor &b) {
    NodePtr pa = a.impl(), pb = b.impl();
    int na = static_cast<int>(pa->shape.size()), nb = static_cast<int>(pb->shape.size());
    if (na < 2 || nb < 2)
        throw ShapeError("matmul: needs rank >= 2, got " + shape_str(pa->shape) + " and " +
                         shape_str(pb->shape));
    int64_t m = pa->shape[na - 2], k = pa->shape[na - 1];
    int64_t k2 = pb->shape[nb - 2], n = pb->shape[nb - 1];
    if (k != k2)
        throw ShapeError("matmul: inner extents disagree, " + shape_str(pa->shape) + " x " +
                         shape_str(pb->shape));
    Shape la(pa->shape.begin(), pa->shape.end() - 2);
    Shape lb(pb->shape.begin(), pb->shape.end() - 2);
    BCast2 bc = make_bcast2(la, lb, "matmul");
    Shape out_shape = bc.out;
    out_shape.push_back(static_cast<int>(m));
    out_shape.push_back(static_cast<int>(n));
    int64_t mk = m * k, kn = k * n, mn = m * n;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)), 0.0);
    bcast2_for_each(bc, [&](int64_t lin, int64_t ba, int64_t bb) {
        const double *A = pa->data.data() + ba * mk;
        const double *B = pb->data.data() + bb * kn;
        double *O = out.data() + lin * mn;
        for (int64_t i = 0; i < m; ++i) {
            double *orow = O + i * n;
            const double *arow = A + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
                double av = arow[kk];
                const double *brow = B + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
    return make_node(out_shape, std::move(out), {pa, pb},
                     [pa, pb, bc, m, n, k, mk, kn, mn](TensorImpl &self) {
                         bool ra = pa->requires_grad, rb = pb->requires_grad;
                         if (ra) pa->ensure_grad();
                         if (rb) pb->ensure_grad();
                         bcast2_for_each(bc, [&](int64_t lin, int64_t ba, int64_t bb) {
                             const double *A = pa->data.data() + ba * mk;
                             const double *B = pb->data.data() + bb * kn;
                             const double *G = self.grad.data() + lin * mn;
                             if (ra) {
                                 double *GA = pa->grad.data() + ba * mk;
                                 for (int64_t i = 0; i < m; ++i) {
                                     const double *grow = G + i * n;
                                     double *garow = GA + i * k;
                                     for (int64_t kk = 0; kk < k; ++kk) {
                                         const double *brow = B + kk * n;
                                         double acc = 0.0;
                                         for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                         garow[kk] += acc;
                                     }
                                 }
                             }
                             if (rb) {
                                 double *GB = pb->grad.data() + bb * kn;
                                 for (int64_t i = 0; i < m; ++i) {
                                     const double *grow = G + i * n;
                                     const double *arow = A + i * k;
                                     for (int64_t kk = 0; kk < k; ++kk) {
                                         double av = arow[kk];
                                         double *gbrow = GB + kk * n;
                                         for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                                     }
                                 }
                             }
                         });
                     });
}

}  // namespace focc
