#pragma once

#include <vector>

#include "focc/nn.hpp"
#include "focc/scene.hpp"

namespace focc {

struct ViewTransformConfig {
    int in_channels = 64;  // fused feature width
    int ctx_channels = 16; // lifted feature width (64 at full scale)
    int depth_bins = 16;   // D (88 at full scale)

    void validate() const;
};

// Weighted point cloud produced by lifting: one point per (camera, depth
// bin, feature cell).  Positions are pure geometry (calibration x bin
// centers); the differentiable state lives in the two tensors.
struct LiftedPoints {
    std::vector<Vec3> positions; // frame of the voxel grid; ((m*D+d)*h+y)*w+x
    Tensor context;              // [M, C_ctx, h, w]
    Tensor depth_probs;          // [M, D, h, w]
    int cams = 0, bins = 0, h = 0, w = 0;
};

// Unprojects every feature cell along every depth bin through the camera
// calibration.  Cell (y,x) uses the ray through the center of its 16x16
// pixel footprint.  `grid_from_ego` lets callers re-express the points in a
// different ego pose's grid (ground-truth future ego compensation); it
// defaults to the identity, i.e. the capture pose's own grid.
LiftedPoints lift(const Tensor &ctx, const Tensor &depth_probs,
                  const std::vector<CameraRig> &cameras,
                  const std::vector<double> &bin_centers, int image_h, int image_w,
                  const Rigid &grid_from_ego = Rigid{});

// Sums every point's depth-weighted feature into the voxel containing it;
// out-of-bounds points are dropped.  Accumulation runs in voxel-index order
// so results are bit-reproducible.  Differentiable w.r.t. both context
// features and depth probabilities.
Tensor voxel_pool(const LiftedPoints &points, const SceneConfig &grid);

// Binary cross-entropy between a predicted depth distribution [M,D,h,w] and
// a one-hot target, averaged over bins then over unmasked cells.  mask is
// [M,h,w] with 1 = supervised; an all-masked batch yields exactly 0 with no
// gradient.
Tensor depth_loss(const Tensor &pred, const Tensor &target, const Tensor &mask);

// 1 where the one-hot target column is nonempty (cells whose patch had a
// valid depth inside the bin range).
Tensor depth_target_mask(const Tensor &target);

// Context + depth heads and the lift-splat wiring for one feature map.
class ViewTransformer {
  public:
    ViewTransformer() = default;
    ViewTransformer(ParamRegistry &reg, const std::string &prefix,
                    const ViewTransformConfig &config, Rng &rng);

    Tensor context_net(const Tensor &f, bool training);     // [M,C_ctx,h,w]
    Tensor depth_net(const Tensor &f, bool training);       // softmaxed [M,D,h,w]

    // full transform: features -> voxel volume [C_ctx, Z, Y, X] in the grid
    // anchored at `grid_from_ego` (identity = this frame's own ego pose).
    // Also exposes the predicted depth distribution for supervision.
    Tensor transform(const Tensor &f, const SceneConfig &scene,
                     const std::vector<double> &bin_centers, bool training,
                     Tensor *depth_out = nullptr, const Rigid &grid_from_ego = Rigid{});

    const ViewTransformConfig &config() const { return config_; }

  private:
    ViewTransformConfig config_;
    Conv2dLayer ctx_conv1_, ctx_conv2_;
    BatchNormLayer ctx_bn_;
    Conv2dLayer depth_conv1_, depth_conv2_;
    BatchNormLayer depth_bn_;
};

}  // namespace focc
