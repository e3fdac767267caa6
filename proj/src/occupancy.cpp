#include "focc/occupancy.hpp"

#include <algorithm>
#include <string>

#include "focc/common.hpp"

namespace focc {

namespace {

std::string shape_text(const Shape &s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

}  // namespace

void OccupancyConfig::validate() const {
    if (in_channels < 1 || base_channels < 1 || fpn_channels < 1 || head_channels < 1 ||
        head_hidden < 1)
        throw ConfigError("occupancy: all channel widths must be positive");
    if (base_channels % 4 != 0)
        throw ConfigError("occupancy: base_channels must divide by 4 for bottleneck reduction");
    if (num_classes < 2) throw ConfigError("occupancy: need at least free space plus one class");
}

OccupancyConfig toy_occupancy_config() { return OccupancyConfig{}; }

OccupancyConfig full_scale_occupancy_config() {
    OccupancyConfig c;
    c.in_channels = 64;
    c.base_channels = 64;
    c.fpn_channels = 32;
    c.head_channels = 64;
    c.head_hidden = 128;
    c.num_classes = 17;
    return c;
}

Bottleneck3D::Bottleneck3D(ParamRegistry &reg, const std::string &name, int in_ch, int out_ch,
                           int stride_, Rng &rng)
    : stride(stride_) {
    int mid = std::max(1, out_ch / 4);
    reduce = Conv3dLayer(reg, name + ".reduce", in_ch, mid, 1, 1, 0, rng);
    bn_reduce = BatchNormLayer(reg, name + ".bn_reduce", mid, 0);
    conv = Conv3dLayer(reg, name + ".conv", mid, mid, 3, stride, 1, rng);
    bn_conv = BatchNormLayer(reg, name + ".bn_conv", mid, 0);
    expand = Conv3dLayer(reg, name + ".expand", mid, out_ch, 1, 1, 0, rng);
    bn_expand = BatchNormLayer(reg, name + ".bn_expand", out_ch, 0);
    // the block starts as the identity: its residual branch is scaled by zero
    std::fill(bn_expand.gamma.mutable_data().begin(), bn_expand.gamma.mutable_data().end(), 0.0);
    has_projection = in_ch != out_ch || stride != 1;
    if (has_projection) {
        project = Conv3dLayer(reg, name + ".project", in_ch, out_ch, 1, stride, 0, rng);
        bn_project = BatchNormLayer(reg, name + ".bn_project", out_ch, 0);
    }
}

Tensor Bottleneck3D::forward(const Tensor &x, bool training) {
    Tensor h = relu(bn_reduce.forward(reduce.forward(x), training));
    h = relu(bn_conv.forward(conv.forward(h), training));
    h = bn_expand.forward(expand.forward(h), training);
    Tensor skip = has_projection ? bn_project.forward(project.forward(x), training) : x;
    return skip + h;
}

OccupancyEncoder::OccupancyEncoder(ParamRegistry &reg, const std::string &prefix,
                                   const OccupancyConfig &config, Rng &rng)
    : config_(config) {
    config.validate();
    int b = config.base_channels;
    fuse_block_ = Bottleneck3D(reg, prefix + "fuse", config.in_channels, b, 1, rng);
    stage1_ = Bottleneck3D(reg, prefix + "stage1.a", 2 * b, b, 1, rng);
    stage2a_ = Bottleneck3D(reg, prefix + "stage2.a", b, 2 * b, 2, rng);
    stage2b_ = Bottleneck3D(reg, prefix + "stage2.b", 2 * b, 2 * b, 1, rng);
    stage3a_ = Bottleneck3D(reg, prefix + "stage3.a", 2 * b, 4 * b, 2, rng);
    stage3b_ = Bottleneck3D(reg, prefix + "stage3.b", 4 * b, 4 * b, 1, rng);
    fpn_conv_ = Conv3dLayer(reg, prefix + "fpn.conv", 7 * b, config.fpn_channels, 3, 1, 1, rng);
    fpn_bn_ = BatchNormLayer(reg, prefix + "fpn.bn", config.fpn_channels, 0);
}

Tensor OccupancyEncoder::fuse_temporal(const Tensor &frame, const Tensor &reference,
                                       bool training) {
    if (frame.shape() != reference.shape())
        throw ContractError("fuse_temporal: volumes disagree, " + shape_text(frame.shape()) +
                            " vs " + shape_text(reference.shape()));
    Tensor a = fuse_block_.forward(frame, training);
    Tensor b = fuse_block_.forward(reference, training);
    return concat({a, b}, 0);
}

std::array<Tensor, 3> OccupancyEncoder::backbone(const Tensor &fused, bool training) {
    if (fused.ndim() != 4 || fused.dim(0) != 2 * config_.base_channels)
        throw ContractError("occ_backbone: expected [" + std::to_string(2 * config_.base_channels) +
                            ", Z, Y, X], got " + shape_text(fused.shape()));
    if (fused.dim(1) % 4 != 0 || fused.dim(2) % 4 != 0 || fused.dim(3) % 4 != 0)
        throw ConfigError("occ_backbone: grid extents must divide by 4, got " +
                          shape_text(fused.shape()));
    Tensor s1 = stage1_.forward(fused, training);
    Tensor s2 = stage2b_.forward(stage2a_.forward(s1, training), training);
    Tensor s3 = stage3b_.forward(stage3a_.forward(s2, training), training);
    return {s1, s2, s3};
}

Tensor OccupancyEncoder::fpn(const std::array<Tensor, 3> &stages, bool training) {
    Tensor up2 = upsample3d_trilinear(stages[1], 2);
    Tensor up4 = upsample3d_trilinear(stages[2], 4);
    Tensor fused = fpn_conv_.forward_multi({stages[0], up2, up4});
    return relu(fpn_bn_.forward(fused, training));
}

Tensor OccupancyEncoder::encode(const Tensor &frame, const Tensor &reference, bool training) {
    return fpn(backbone(fuse_temporal(frame, reference, training), training), training);
}

SemanticHead::SemanticHead(ParamRegistry &reg, const std::string &prefix,
                           const OccupancyConfig &config, Rng &rng) {
    conv_ = Conv3dLayer(reg, prefix + "conv", config.fpn_channels, config.head_channels, 3, 1, 1,
                        rng);
    bn_ = BatchNormLayer(reg, prefix + "bn", config.head_channels, 0);
    mlp_hidden_ = Conv3dLayer(reg, prefix + "mlp1", config.head_channels, config.head_hidden, 1,
                              1, 0, rng);
    mlp_out_ = Conv3dLayer(reg, prefix + "mlp2", config.head_hidden, config.num_classes, 1, 1, 0,
                           rng);
}

Tensor SemanticHead::mlp(const Tensor &f) const {
    return mlp_out_.forward(softplus(mlp_hidden_.forward(f)));
}

Tensor SemanticHead::forward(const Tensor &f, bool training) {
    return mlp(relu(bn_.forward(conv_.forward(f), training)));
}

Tensor task_loss(const std::vector<Tensor> &logits,
                 const std::vector<std::vector<uint8_t>> &targets) {
    if (logits.empty()) throw ContractError("task_loss: no grids");
    if (logits.size() != targets.size())
        throw ContractError("task_loss: " + std::to_string(logits.size()) + " logit grids vs " +
                            std::to_string(targets.size()) + " target grids");
    Tensor total;
    for (size_t g = 0; g < logits.size(); ++g) {
        const Tensor &lg = logits[g];
        if (lg.ndim() != 4)
            throw ContractError("task_loss: logits must be [C, Z, Y, X], got " +
                                shape_text(lg.shape()));
        int classes = lg.dim(0);
        int64_t voxels = lg.numel() / classes;
        if (static_cast<int64_t>(targets[g].size()) != voxels)
            throw ContractError("task_loss: grid " + std::to_string(g) + " has " +
                                std::to_string(targets[g].size()) + " labels for " +
                                std::to_string(voxels) + " voxels");
        std::vector<double> onehot(lg.numel(), 0.0);
        for (int64_t v = 0; v < voxels; ++v) {
            uint8_t label = targets[g][v];
            if (label >= classes)
                throw ContractError("task_loss: label " + std::to_string(int(label)) +
                                    " out of range for " + std::to_string(classes) + " classes");
            onehot[static_cast<int64_t>(label) * voxels + v] = 1.0;
        }
        Tensor pick(lg.shape(), std::move(onehot));
        Tensor ce = -sum(log_softmax(lg, 0) * pick) / static_cast<double>(voxels);
        total = total.defined() ? total + ce : ce;
    }
    return total;
}

std::vector<uint8_t> argmax_grid(const Tensor &logits) {
    if (logits.ndim() != 4)
        throw ContractError("argmax_grid: logits must be [C, Z, Y, X], got " +
                            shape_text(logits.shape()));
    int classes = logits.dim(0);
    int64_t voxels = logits.numel() / classes;
    const std::vector<double> &d = logits.data();
    std::vector<uint8_t> out(voxels);
    for (int64_t v = 0; v < voxels; ++v) {
        int best = 0;
        double best_val = d[v];
        for (int c = 1; c < classes; ++c)
            if (d[c * voxels + v] > best_val) {
                best_val = d[c * voxels + v];
                best = c;
            }
        out[v] = static_cast<uint8_t>(best);
    }
    return out;
}

}  // namespace focc
