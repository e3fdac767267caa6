#include "focc/nn.hpp"

#include <cmath>
#include <cstdio>

namespace focc {

Tensor ParamRegistry::add(const std::string &name, Tensor t, bool trainable, bool buffer) {
    if (has(name)) throw ContractError("param registry: duplicate name '" + name + "'");
    if (buffer) trainable = false;
    t.set_requires_grad(trainable);
    entries_.push_back({name, t, trainable, buffer});
    return t;
}

Tensor ParamRegistry::get(const std::string &name) const {
    for (const auto &e : entries_)
        if (e.name == name) return e.tensor;
    throw ContractError("param registry: unknown name '" + name + "'");
}

bool ParamRegistry::has(const std::string &name) const {
    for (const auto &e : entries_)
        if (e.name == name) return true;
    return false;
}

std::vector<ParamEntry> ParamRegistry::trainable_with_prefix(const std::string &prefix) const {
    std::vector<ParamEntry> out;
    for (const auto &e : entries_)
        if (e.trainable && !e.buffer && e.name.rfind(prefix, 0) == 0) out.push_back(e);
    return out;
}

void ParamRegistry::set_trainable(const std::string &prefix, bool on) {
    for (auto &e : entries_) {
        if (e.buffer || e.name.rfind(prefix, 0) != 0) continue;
        e.trainable = on;
        e.tensor.set_requires_grad(on);
    }
}

uint64_t ParamRegistry::checksum(const std::string &prefix) const {
    uint64_t h = 14695981039346656037ull;
    auto mix = [&h](const void *p, size_t n) {
        const unsigned char *b = static_cast<const unsigned char *>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto &e : entries_) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        mix(e.name.data(), e.name.size());
        mix(e.tensor.data().data(), e.tensor.data().size() * sizeof(double));
    }
    return h;
}

int64_t ParamRegistry::count_values(const std::string &prefix, bool trainable_only) const {
    int64_t n = 0;
    for (const auto &e : entries_) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        if (trainable_only && (!e.trainable || e.buffer)) continue;
        n += e.tensor.numel();
    }
    return n;
}

Tensor fan_in_init(const Shape &shape, int64_t fan_in, Rng &rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    return Tensor::uniform(shape, -bound, bound, rng);
}

// ---- linear ----

LinearLayer::LinearLayer(ParamRegistry &reg, const std::string &name, int in, int out, Rng &rng) {
    weight = reg.add(name + ".weight", fan_in_init({in, out}, in, rng));
    bias = reg.add(name + ".bias", fan_in_init({out}, in, rng));
}

Tensor LinearLayer::forward(const Tensor &x) const { return matmul(x, weight) + bias; }

// ---- convolutions ----

Conv2dLayer::Conv2dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k,
                         int stride_, int padding_, Rng &rng, bool with_bias)
    : stride(stride_), padding(padding_) {
    int64_t fan_in = static_cast<int64_t>(ci) * k * k;
    weight = reg.add(name + ".weight", fan_in_init({co, ci, k, k}, fan_in, rng));
    if (with_bias) bias = reg.add(name + ".bias", fan_in_init({co}, fan_in, rng));
}

Tensor Conv2dLayer::forward(const Tensor &x) const {
    return conv2d(x, weight, bias, stride, padding);
}

Deconv2dLayer::Deconv2dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k,
                             int stride_, Rng &rng)
    : stride(stride_) {
    int64_t fan_in = static_cast<int64_t>(ci) * k * k;
    weight = reg.add(name + ".weight", fan_in_init({ci, co, k, k}, fan_in, rng));
    bias = reg.add(name + ".bias", fan_in_init({co}, fan_in, rng));
}

Tensor Deconv2dLayer::forward(const Tensor &x) const { return deconv2d(x, weight, bias, stride); }

Conv3dLayer::Conv3dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k,
                         int stride_, int padding_, Rng &rng, bool with_bias)
    : stride(stride_), padding(padding_) {
    int64_t fan_in = static_cast<int64_t>(ci) * k * k * k;
    weight = reg.add(name + ".weight", fan_in_init({co, ci, k, k, k}, fan_in, rng));
    if (with_bias) bias = reg.add(name + ".bias", fan_in_init({co}, fan_in, rng));
}

Tensor Conv3dLayer::forward(const Tensor &x) const {
    return conv3d(x, weight, bias, stride, padding);
}

Tensor Conv3dLayer::forward_multi(const std::vector<Tensor> &xs) const {
    return conv3d_multi(xs, weight, bias, stride, padding);
}

Deconv3dLayer::Deconv3dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k,
                             int stride_, Rng &rng)
    : stride(stride_) {
    int64_t fan_in = static_cast<int64_t>(ci) * k * k * k;
    weight = reg.add(name + ".weight", fan_in_init({ci, co, k, k, k}, fan_in, rng));
    bias = reg.add(name + ".bias", fan_in_init({co}, fan_in, rng));
}

Tensor Deconv3dLayer::forward(const Tensor &x) const { return deconv3d(x, weight, bias, stride); }

// ---- batch normalization ----

BatchNormLayer::BatchNormLayer(ParamRegistry &reg, const std::string &name_, int channels_,
                               int channel_axis_)
    : channels(channels_), channel_axis(channel_axis_), name(name_) {
    gamma = reg.add(name + ".gamma", Tensor::full({channels}, 1.0));
    beta = reg.add(name + ".beta", Tensor::zeros({channels}));
    running_mean = reg.add(name + ".running_mean", Tensor::zeros({channels}), false, true);
    running_var = reg.add(name + ".running_var", Tensor::full({channels}, 1.0), false, true);
    batches = reg.add(name + ".batches", Tensor::zeros({1}), false, true);
}

Tensor BatchNormLayer::forward(const Tensor &x, bool training) {
    int nd = x.ndim();
    if (channel_axis >= nd || x.shape()[channel_axis] != channels)
        throw ShapeError("batchnorm " + name + ": expected " + std::to_string(channels) +
                         " channels on axis " + std::to_string(channel_axis) + ", got " +
                         shape_str(x.shape()));
    std::vector<int> reduce_axes;
    for (int i = 0; i < nd; ++i)
        if (i != channel_axis) reduce_axes.push_back(i);
    Shape bshape(nd, 1);
    bshape[channel_axis] = channels;

    Tensor mu, var;
    if (training) {
        mu = mean(x, reduce_axes, true);
        Tensor centered = x - mu;
        var = mean(centered * centered, reduce_axes, true);
        if (!freeze_running_stats) {
            auto &rm = running_mean.mutable_data();
            auto &rv = running_var.mutable_data();
            for (int c = 0; c < channels; ++c) {
                rm[c] = (1.0 - momentum) * rm[c] + momentum * mu.data()[c];
                rv[c] = (1.0 - momentum) * rv[c] + momentum * var.data()[c];
            }
        }
        batches.mutable_data()[0] += 1.0;
        Tensor xhat = centered / sqrt(var + eps);
        return reshape(gamma, bshape) * xhat + reshape(beta, bshape);
    }
    if (batches.data()[0] == 0.0 && !warned_uninitialized_eval_) {
        std::fprintf(stderr,
                     "warning: batchnorm %s evaluated before any training batch; "
                     "using initialized statistics (mean 0, var 1)\n",
                     name.c_str());
        warned_uninitialized_eval_ = true;
    }
    Tensor rm = reshape(running_mean, bshape);
    Tensor rv = reshape(running_var, bshape);
    Tensor xhat = (x - rm) / sqrt(rv + eps);
    return reshape(gamma, bshape) * xhat + reshape(beta, bshape);
}

// ---- layer normalization ----

LayerNormLayer::LayerNormLayer(ParamRegistry &reg, const std::string &name, int dim) {
    gamma = reg.add(name + ".gamma", Tensor::full({dim}, 1.0));
    beta = reg.add(name + ".beta", Tensor::zeros({dim}));
}

Tensor LayerNormLayer::forward(const Tensor &x) const {
    Tensor mu = mean(x, {-1}, true);
    Tensor centered = x - mu;
    Tensor var = mean(centered * centered, {-1}, true);
    return gamma * (centered / sqrt(var + eps)) + beta;
}

// ---- multi-head attention ----

MultiHeadAttention::MultiHeadAttention(ParamRegistry &reg, const std::string &name, int dim_,
                                       int heads_, Rng &rng)
    : dim(dim_), heads(heads_) {
    if (heads < 1 || dim % heads != 0)
        throw ConfigError("attention " + name + ": dim " + std::to_string(dim) +
                          " not divisible by " + std::to_string(heads) + " heads");
    wq = LinearLayer(reg, name + ".wq", dim, dim, rng);
    wk = LinearLayer(reg, name + ".wk", dim, dim, rng);
    wv = LinearLayer(reg, name + ".wv", dim, dim, rng);
    wo = LinearLayer(reg, name + ".wo", dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor &q_in, const Tensor &kv_in) const {
    if (q_in.ndim() != 2 || kv_in.ndim() != 2 || q_in.dim(1) != dim || kv_in.dim(1) != dim)
        throw ShapeError("attention: expected [L, " + std::to_string(dim) + "] inputs, got " +
                         shape_str(q_in.shape()) + " and " + shape_str(kv_in.shape()));
    int lq = q_in.dim(0), lkv = kv_in.dim(0);
    int dk = dim / heads;
    // [L, C] -> [h, L, dk]
    auto split = [&](const Tensor &x, int l) {
        return permute(reshape(x, {l, heads, dk}), {1, 0, 2});
    };
    Tensor q = split(wq.forward(q_in), lq);
    Tensor k = split(wk.forward(kv_in), lkv);
    Tensor v = split(wv.forward(kv_in), lkv);
    Tensor scores = matmul(q, permute(k, {0, 2, 1})) * (1.0 / std::sqrt(double(dk)));
    Tensor attn = softmax(scores, -1);
    Tensor ctx = matmul(attn, v);  // [h, Lq, dk]
    Tensor merged = reshape(permute(ctx, {1, 0, 2}), {lq, dim});
    return wo.forward(merged);
}

}  // namespace focc
