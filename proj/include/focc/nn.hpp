#pragma once

#include <string>
#include <vector>

#include "focc/tensor.hpp"

namespace focc {

// Central name -> parameter table. Modules register their tensors here once at
// construction; the optimizer, checkpoints, and freeze logic all work off it.
struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // updated by the optimizer
    bool buffer = false;    // persistent state (running stats), never trainable
};

class ParamRegistry {
  public:
    Tensor add(const std::string &name, Tensor t, bool trainable = true, bool buffer = false);
    Tensor get(const std::string &name) const;
    bool has(const std::string &name) const;
    const std::vector<ParamEntry> &entries() const { return entries_; }
    std::vector<ParamEntry> &entries() { return entries_; }

    // Trainable (non-buffer) entries whose name starts with `prefix`.
    std::vector<ParamEntry> trainable_with_prefix(const std::string &prefix) const;
    // Flip trainability (and requires_grad) for all non-buffer params under a prefix.
    void set_trainable(const std::string &prefix, bool on);
    // FNV-1a over the raw bytes of all entries under a prefix (buffers included).
    uint64_t checksum(const std::string &prefix = "") const;
    int64_t count_values(const std::string &prefix = "", bool trainable_only = false) const;

  private:
    std::vector<ParamEntry> entries_;
};

// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))
Tensor fan_in_init(const Shape &shape, int64_t fan_in, Rng &rng);

struct LinearLayer {
    LinearLayer() = default;
    LinearLayer(ParamRegistry &reg, const std::string &name, int in, int out, Rng &rng);
    Tensor forward(const Tensor &x) const;  // x: [.., in] -> [.., out]
    Tensor weight;                          // [in, out]
    Tensor bias;                            // [out]
};

struct Conv2dLayer {
    Conv2dLayer() = default;
    Conv2dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k, int stride,
                int padding, Rng &rng, bool with_bias = true);
    Tensor forward(const Tensor &x) const;
    Tensor weight, bias;
    int stride = 1, padding = 0;
};

struct Deconv2dLayer {
    Deconv2dLayer() = default;
    Deconv2dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k, int stride,
                  Rng &rng);
    Tensor forward(const Tensor &x) const;
    Tensor weight, bias;
    int stride = 1;
};

struct Conv3dLayer {
    Conv3dLayer() = default;
    Conv3dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k, int stride,
                int padding, Rng &rng, bool with_bias = true);
    Tensor forward(const Tensor &x) const;
    // Convolves the virtual channel concatenation of `xs` without materializing it.
    Tensor forward_multi(const std::vector<Tensor> &xs) const;
    Tensor weight, bias;
    int stride = 1, padding = 0;
};

struct Deconv3dLayer {
    Deconv3dLayer() = default;
    Deconv3dLayer(ParamRegistry &reg, const std::string &name, int ci, int co, int k, int stride,
                  Rng &rng);
    Tensor forward(const Tensor &x) const;
    Tensor weight, bias;
    int stride = 1;
};

// Per-channel normalization over batch+spatial axes. channel_axis is 1 for
// [N, C, H, W] image maps and 0 for batchless [C, Z, Y, X] volumes.
struct BatchNormLayer {
    BatchNormLayer() = default;
    BatchNormLayer(ParamRegistry &reg, const std::string &name, int channels, int channel_axis);
    Tensor forward(const Tensor &x, bool training);

    Tensor gamma, beta;
    Tensor running_mean, running_var;  // buffers
    Tensor batches;  // buffer: training batches seen, so loaded stats count as trained
    int channels = 0;
    int channel_axis = 1;
    double eps = 1e-5;
    double momentum = 0.1;
    bool freeze_running_stats = false;  // batch-size-1 escape hatch
    std::string name;

  private:
    bool warned_uninitialized_eval_ = false;
};

// Normalizes the trailing feature axis (transformer-style).
struct LayerNormLayer {
    LayerNormLayer() = default;
    LayerNormLayer(ParamRegistry &reg, const std::string &name, int dim);
    Tensor forward(const Tensor &x) const;
    Tensor gamma, beta;
    double eps = 1e-5;
};

struct MultiHeadAttention {
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry &reg, const std::string &name, int dim, int heads, Rng &rng);
    // q: [Lq, C], kv: [Lkv, C] -> [Lq, C]
    Tensor forward(const Tensor &q, const Tensor &kv) const;
    LinearLayer wq, wk, wv, wo;
    int dim = 0, heads = 0;
};

}  // namespace focc
