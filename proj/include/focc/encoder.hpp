#pragma once

#include <array>

#include "focc/nn.hpp"

namespace focc {

// Per-scale channel widths for the 4-stage backbone and its fusing neck.
// The fused feature width is the sum of the neck widths.
struct EncoderConfig {
    int in_channels = 3;
    std::array<int, 4> backbone_widths = {8, 12, 34, 96};
    std::array<int, 4> neck_widths = {4, 6, 16, 38};

    int fused_channels() const {
        return neck_widths[0] + neck_widths[1] + neck_widths[2] + neck_widths[3];
    }
};

EncoderConfig toy_encoder_config();        // fused C = 64
EncoderConfig full_scale_encoder_config(); // fused C = 256

// Multi-camera image encoder: a strided conv backbone producing maps at
// 1/4, 1/8, 1/16 and 1/32 of the input, and a neck that resamples every
// scale to 1/16 and concatenates the channels.
class ImageEncoder {
  public:
    ImageEncoder() = default;
    ImageEncoder(ParamRegistry &reg, const std::string &prefix,
                 const EncoderConfig &config, Rng &rng);

    // images [M,3,H,W] with H,W multiples of 32 -> four maps [M,c_i,H/s,W/s]
    std::vector<Tensor> backbone(const Tensor &images, bool training);
    // four backbone maps -> fused [M,C,H/16,W/16]
    Tensor fpn_fuse(const std::vector<Tensor> &scales, bool training);
    Tensor encode(const Tensor &images, bool training);

    // Inference-style pass for the forecast stage: gradients disabled and
    // batch stats frozen.  Refuses to run before pretrained weights were
    // loaded -- a randomly initialized frozen encoder is never intended.
    Tensor encode_frozen(const Tensor &images);

    int fused_channels() const { return config_.fused_channels(); }
    const EncoderConfig &config() const { return config_; }
    void mark_pretrained() { pretrained_ = true; }
    bool pretrained() const { return pretrained_; }

  private:
    struct Stage {
        Conv2dLayer down;  // strided resampler
        BatchNormLayer bn_down;
        Conv2dLayer refine; // 3x3, keeps resolution
        BatchNormLayer bn_refine;
    };

    EncoderConfig config_;
    std::array<Stage, 4> stages_;
    Conv2dLayer neck_down4_, neck_down2_, neck_keep_;
    Deconv2dLayer neck_up2_;
    std::array<BatchNormLayer, 4> neck_bn_;
    bool pretrained_ = false;
};

}  // namespace focc
