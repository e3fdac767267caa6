#include "focc/encoder.hpp"

namespace focc {

EncoderConfig toy_encoder_config() { return {}; }

EncoderConfig full_scale_encoder_config() {
    EncoderConfig c;
    c.backbone_widths = {32, 48, 136, 384};
    c.neck_widths = {16, 24, 64, 152};
    return c;
}

ImageEncoder::ImageEncoder(ParamRegistry &reg, const std::string &prefix,
                           const EncoderConfig &config, Rng &rng)
    : config_(config) {
    int prev = config.in_channels;
    for (int i = 0; i < 4; ++i) {
        int w = config.backbone_widths[i];
        std::string base = prefix + "backbone" + std::to_string(i);
        // first stage jumps straight to 1/4, later stages halve
        if (i == 0)
            stages_[i].down = Conv2dLayer(reg, base + ".down", prev, w, 4, 4, 0, rng);
        else
            stages_[i].down = Conv2dLayer(reg, base + ".down", prev, w, 3, 2, 1, rng);
        stages_[i].bn_down = BatchNormLayer(reg, base + ".bn_down", w, 1);
        stages_[i].refine = Conv2dLayer(reg, base + ".refine", w, w, 3, 1, 1, rng);
        stages_[i].bn_refine = BatchNormLayer(reg, base + ".bn_refine", w, 1);
        prev = w;
    }
    const auto &bw = config.backbone_widths;
    const auto &nw = config.neck_widths;
    neck_down4_ = Conv2dLayer(reg, prefix + "neck0.conv", bw[0], nw[0], 4, 4, 0, rng);
    neck_down2_ = Conv2dLayer(reg, prefix + "neck1.conv", bw[1], nw[1], 2, 2, 0, rng);
    neck_keep_ = Conv2dLayer(reg, prefix + "neck2.conv", bw[2], nw[2], 1, 1, 0, rng);
    neck_up2_ = Deconv2dLayer(reg, prefix + "neck3.deconv", bw[3], nw[3], 2, 2, rng);
    for (int i = 0; i < 4; ++i)
        neck_bn_[i] = BatchNormLayer(reg, prefix + "neck" + std::to_string(i) + ".bn",
                                     nw[i], 1);
}

std::vector<Tensor> ImageEncoder::backbone(const Tensor &images, bool training) {
    if (images.ndim() != 4 || images.dim(1) != config_.in_channels)
        throw ShapeError("backbone: expected [M," + std::to_string(config_.in_channels) +
                         ",H,W], got " + shape_str(images.shape()));
    if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
        throw ConfigError("backbone: image extents must be multiples of 32, got " +
                          std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)));
    std::vector<Tensor> scales;
    Tensor x = images;
    for (auto &stage : stages_) {
        x = relu(stage.bn_down.forward(stage.down.forward(x), training));
        x = relu(stage.bn_refine.forward(stage.refine.forward(x), training));
        scales.push_back(x);
    }
    return scales;
}

Tensor ImageEncoder::fpn_fuse(const std::vector<Tensor> &scales, bool training) {
    if (scales.size() != 4)
        throw ShapeError("fpn_fuse: expected 4 scales, got " +
                         std::to_string(scales.size()));
    // align everything to the 1/16 grid, then concatenate channels
    Tensor b0 = relu(neck_bn_[0].forward(neck_down4_.forward(scales[0]), training));
    Tensor b1 = relu(neck_bn_[1].forward(neck_down2_.forward(scales[1]), training));
    Tensor b2 = relu(neck_bn_[2].forward(neck_keep_.forward(scales[2]), training));
    Tensor b3 = relu(neck_bn_[3].forward(neck_up2_.forward(scales[3]), training));
    return concat({b0, b1, b2, b3}, 1);
}

Tensor ImageEncoder::encode(const Tensor &images, bool training) {
    return fpn_fuse(backbone(images, training), training);
}

Tensor ImageEncoder::encode_frozen(const Tensor &images) {
    if (!pretrained_)
        throw ConfigError(
            "encode_frozen: encoder weights were never loaded from a pretraining "
            "checkpoint; refusing to run frozen with random initialization");
    NoGradGuard guard;
    return encode(images, /*training=*/false);
}

}  // namespace focc
