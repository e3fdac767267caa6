#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "focc/nn.hpp"
#include "focc/tensor.hpp"

namespace focc {

// Widths for the 3D occupancy encoder and semantic head. The backbone runs
// three stages at base, 2*base, 4*base channels; the toy plan is the full
// plan divided by four.
struct OccupancyConfig {
    int in_channels = 16;    // per-frame voxel feature width
    int base_channels = 16;  // stage-1 width, doubled at each later stage
    int fpn_channels = 8;    // fused pyramid output width
    int head_channels = 16;  // semantic head conv width
    int head_hidden = 32;    // per-voxel MLP hidden units
    int num_classes = 5;

    void validate() const;
};

OccupancyConfig toy_occupancy_config();
OccupancyConfig full_scale_occupancy_config();

// 1x1x1 reduce -> 3x3x3 (carries the stride) -> 1x1x1 expand, each with
// batchnorm, the first two with ReLU. The expand batchnorm's scale starts at
// zero, so a fresh block is exactly the (projected) identity and the residual
// branch fades in during training.
struct Bottleneck3D {
    Bottleneck3D() = default;
    Bottleneck3D(ParamRegistry &reg, const std::string &name, int in_ch, int out_ch, int stride,
                 Rng &rng);

    Tensor forward(const Tensor &x, bool training);

    Conv3dLayer reduce, conv, expand, project;
    BatchNormLayer bn_reduce, bn_conv, bn_expand, bn_project;
    int stride = 1;
    bool has_projection = false;
};

struct OccupancyEncoder {
    OccupancyEncoder() = default;
    OccupancyEncoder(ParamRegistry &reg, const std::string &prefix, const OccupancyConfig &config,
                     Rng &rng);

    // One shared bottleneck per input (so equal inputs give equal halves),
    // then channel concatenation: [2*base, Z, Y, X].
    Tensor fuse_temporal(const Tensor &frame, const Tensor &reference, bool training);

    // Stage outputs at full, 1/2 and 1/4 resolution; extents must divide by 4.
    std::array<Tensor, 3> backbone(const Tensor &fused, bool training);

    // Trilinear upsample of the coarse stages to full resolution, channel
    // concat, 3x3x3 conv + BN + ReLU.
    Tensor fpn(const std::array<Tensor, 3> &stages, bool training);

    Tensor encode(const Tensor &frame, const Tensor &reference, bool training);

    const OccupancyConfig &config() const { return config_; }

  private:
    OccupancyConfig config_;
    Bottleneck3D fuse_block_;
    Bottleneck3D stage1_, stage2a_, stage2b_, stage3a_, stage3b_;
    Conv3dLayer fpn_conv_;
    BatchNormLayer fpn_bn_;
};

// 3x3x3 conv block followed by a per-voxel MLP (1x1x1 convs) with a softplus
// hidden activation, producing class logits [C_cls, Z, Y, X].
struct SemanticHead {
    SemanticHead() = default;
    SemanticHead(ParamRegistry &reg, const std::string &prefix, const OccupancyConfig &config,
                 Rng &rng);

    Tensor forward(const Tensor &f, bool training);
    // The per-voxel part alone; exposed so locality is testable.
    Tensor mlp(const Tensor &f) const;

  private:
    Conv3dLayer conv_;
    BatchNormLayer bn_;
    Conv3dLayer mlp_hidden_, mlp_out_;
};

// Sum over grids of the per-grid mean voxel cross-entropy. Logits are
// [C_cls, Z, Y, X]; each target grid stores one class id per voxel in
// z-major order. Out-of-range labels and list-size mismatches are contract
// errors.
Tensor task_loss(const std::vector<Tensor> &logits,
                 const std::vector<std::vector<uint8_t>> &targets);

// Per-voxel argmax class of one logits volume, z-major, for .occ export.
std::vector<uint8_t> argmax_grid(const Tensor &logits);

// Raw logits exchange format: "FOLGT1\n", u32 C/Z/Y/X little-endian, then
// f32 values in [C, Z, Y, X] order.
void write_logits(const std::string &path, const Tensor &logits);
Tensor read_logits(const std::string &path);

}  // namespace focc
