#include "focc/view_transform.hpp"

#include <algorithm>
#include <cmath>

namespace focc {

void ViewTransformConfig::validate() const {
    if (in_channels <= 0 || ctx_channels <= 0 || depth_bins <= 0)
        throw ConfigError("view transform config: channel/bin counts must be positive");
}

ViewTransformer::ViewTransformer(ParamRegistry &reg, const std::string &prefix,
                                 const ViewTransformConfig &config, Rng &rng)
    : config_(config) {
    config.validate();
    ctx_conv1_ = Conv2dLayer(reg, prefix + "ctx.conv1", config.in_channels,
                             config.ctx_channels, 3, 1, 1, rng);
    ctx_bn_ = BatchNormLayer(reg, prefix + "ctx.bn", config.ctx_channels, 1);
    ctx_conv2_ = Conv2dLayer(reg, prefix + "ctx.conv2", config.ctx_channels,
                             config.ctx_channels, 1, 1, 0, rng);
    depth_conv1_ = Conv2dLayer(reg, prefix + "depth.conv1", config.in_channels,
                               config.depth_bins, 3, 1, 1, rng);
    depth_bn_ = BatchNormLayer(reg, prefix + "depth.bn", config.depth_bins, 1);
    depth_conv2_ = Conv2dLayer(reg, prefix + "depth.conv2", config.depth_bins,
                               config.depth_bins, 1, 1, 0, rng);
}

Tensor ViewTransformer::context_net(const Tensor &f, bool training) {
    return ctx_conv2_.forward(relu(ctx_bn_.forward(ctx_conv1_.forward(f), training)));
}

Tensor ViewTransformer::depth_net(const Tensor &f, bool training) {
    Tensor logits =
        depth_conv2_.forward(relu(depth_bn_.forward(depth_conv1_.forward(f), training)));
    return softmax(logits, 1);
}

LiftedPoints lift(const Tensor &ctx, const Tensor &depth_probs,
                  const std::vector<CameraRig> &cameras,
                  const std::vector<double> &bin_centers, int image_h, int image_w,
                  const Rigid &grid_from_ego) {
    if (ctx.ndim() != 4 || depth_probs.ndim() != 4)
        throw ShapeError("lift: expected [M,C,h,w] context and [M,D,h,w] depth");
    int m = ctx.dim(0), h = ctx.dim(2), w = ctx.dim(3);
    int d = depth_probs.dim(1);
    if (depth_probs.dim(0) != m || depth_probs.dim(2) != h || depth_probs.dim(3) != w)
        throw ShapeError("lift: context " + shape_str(ctx.shape()) +
                         " and depth " + shape_str(depth_probs.shape()) + " disagree");
    if (static_cast<int>(cameras.size()) != m)
        throw ShapeError("lift: got " + std::to_string(cameras.size()) + " cameras for " +
                         std::to_string(m) + " feature maps");
    if (static_cast<int>(bin_centers.size()) != d)
        throw ShapeError("lift: " + std::to_string(bin_centers.size()) +
                         " bin centers for " + std::to_string(d) + " depth bins");
    for (const auto &cam : cameras)
        if (cam.fx == 0 || cam.fy == 0)
            throw ConfigError("lift: singular intrinsics (zero focal length)");
    // feature cells are 16x16 pixel patches of the full-resolution image
    if (image_h != h * 16 || image_w != w * 16)
        throw ShapeError("lift: feature grid " + std::to_string(h) + "x" +
                         std::to_string(w) + " is not 1/16 of " + std::to_string(image_h) +
                         "x" + std::to_string(image_w));

    LiftedPoints out;
    out.cams = m;
    out.bins = d;
    out.h = h;
    out.w = w;
    out.context = ctx;
    out.depth_probs = depth_probs;
    out.positions.resize(static_cast<size_t>(m) * d * h * w);
    size_t i = 0;
    for (int mi = 0; mi < m; ++mi) {
        const CameraRig &cam = cameras[mi];
        Rigid grid_from_cam = grid_from_ego.compose(cam.cam_to_ego);
        for (int di = 0; di < d; ++di) {
            double depth = bin_centers[di];
            for (int y = 0; y < h; ++y) {
                double v = (y + 0.5) * 16.0;
                for (int x = 0; x < w; ++x, ++i) {
                    double u = (x + 0.5) * 16.0;
                    Vec3 p_cam = {(u - cam.cx) / cam.fx * depth,
                                  (v - cam.cy) / cam.fy * depth, depth};
                    out.positions[i] = grid_from_cam.apply(p_cam);
                }
            }
        }
    }
    return out;
}

Tensor voxel_pool(const LiftedPoints &points, const SceneConfig &grid) {
    int gz = grid.grid_z, gy = grid.grid_y, gx = grid.grid_x;
    if (gz <= 0 || gy <= 0 || gx <= 0 || grid.voxel_size <= 0)
        throw ConfigError("voxel_pool: grid extents must be positive");
    int c_ctx = points.context.dim(1);
    int h = points.h, w = points.w;
    double x0 = -grid.grid_extent_x() / 2, y0 = -grid.grid_extent_y() / 2;
    double z0 = grid.grid_z0, inv_vox = 1.0 / grid.voxel_size;

    // (voxel, point) pairs for in-bounds points, sorted by voxel index so the
    // floating-point accumulation order never depends on anything else
    std::vector<std::pair<int64_t, int32_t>> hits;
    hits.reserve(points.positions.size());
    for (size_t i = 0; i < points.positions.size(); ++i) {
        const Vec3 &p = points.positions[i];
        int ix = static_cast<int>(std::floor((p.x - x0) * inv_vox));
        int iy = static_cast<int>(std::floor((p.y - y0) * inv_vox));
        int iz = static_cast<int>(std::floor((p.z - z0) * inv_vox));
        if (ix < 0 || ix >= gx || iy < 0 || iy >= gy || iz < 0 || iz >= gz) continue;
        hits.emplace_back((static_cast<int64_t>(iz) * gy + iy) * gx + ix,
                          static_cast<int32_t>(i));
    }
    std::stable_sort(hits.begin(), hits.end(),
                     [](const auto &a, const auto &b) { return a.first < b.first; });

    NodePtr pc = points.context.impl();
    NodePtr pd = points.depth_probs.impl();
    int64_t cells = static_cast<int64_t>(h) * w;
    int64_t voxels = static_cast<int64_t>(gz) * gy * gx;
    std::vector<double> out(static_cast<size_t>(c_ctx) * voxels, 0.0);
    for (const auto &[vox, pt] : hits) {
        // point index decomposes as ((m*D + d)*h + y)*w + x
        int64_t cell = pt % cells;                  // y*w + x
        int64_t mi = pt / (cells * points.bins);    // camera
        double prob = pd->data[pt];
        const double *ctx_row = pc->data.data() + (mi * c_ctx) * cells + cell;
        for (int c = 0; c < c_ctx; ++c)
            out[static_cast<size_t>(c) * voxels + vox] += ctx_row[c * cells] * prob;
    }

    auto bins = points.bins;
    return make_node(
        {c_ctx, gz, gy, gx}, std::move(out), {pc, pd},
        [pc, pd, hits, c_ctx, cells, voxels, bins](TensorImpl &self) {
            bool need_c = pc->requires_grad, need_d = pd->requires_grad;
            if (need_c) pc->ensure_grad();
            if (need_d) pd->ensure_grad();
            for (const auto &[vox, pt] : hits) {
                int64_t cell = pt % cells;
                int64_t mi = pt / (cells * bins);
                double prob = pd->data[pt];
                const double *g_col = self.grad.data() + vox;
                const double *ctx_row = pc->data.data() + (mi * c_ctx) * cells + cell;
                double *gctx_row = need_c ? pc->grad.data() + (mi * c_ctx) * cells + cell
                                          : nullptr;
                double gp = 0.0;
                for (int c = 0; c < c_ctx; ++c) {
                    double g = g_col[static_cast<int64_t>(c) * voxels];
                    if (need_c) gctx_row[static_cast<int64_t>(c) * cells] += g * prob;
                    gp += g * ctx_row[static_cast<int64_t>(c) * cells];
                }
                if (need_d) pd->grad[pt] += gp;
            }
        });
}

Tensor depth_target_mask(const Tensor &target) {
    if (target.ndim() != 4)
        throw ShapeError("depth_target_mask: expected [M,D,h,w], got " +
                         shape_str(target.shape()));
    int m = target.dim(0), d = target.dim(1), h = target.dim(2), w = target.dim(3);
    std::vector<double> mask(static_cast<size_t>(m) * h * w, 0.0);
    const auto &t = target.data();
    int64_t cells = static_cast<int64_t>(h) * w;
    for (int mi = 0; mi < m; ++mi)
        for (int64_t cell = 0; cell < cells; ++cell) {
            double s = 0;
            for (int di = 0; di < d; ++di) s += t[(mi * d + di) * cells + cell];
            if (s > 0) mask[mi * cells + cell] = 1.0;
        }
    return Tensor({m, h, w}, std::move(mask));
}

Tensor depth_loss(const Tensor &pred, const Tensor &target, const Tensor &mask) {
    if (pred.shape() != target.shape())
        throw ContractError("depth_loss: prediction " + shape_str(pred.shape()) +
                            " and target " + shape_str(target.shape()) + " differ");
    if (mask.ndim() != 3 || mask.dim(0) != pred.dim(0) || mask.dim(1) != pred.dim(2) ||
        mask.dim(2) != pred.dim(3))
        throw ContractError("depth_loss: mask must be [M,h,w] matching the cells, got " +
                            shape_str(mask.shape()));
    double supervised = 0;
    for (double v : mask.data()) supervised += v;
    if (supervised == 0) return Tensor::zeros({1}); // nothing to supervise, no gradient

    constexpr double kEps = 1e-7;
    Tensor p = clamp(pred, kEps, 1.0 - kEps);
    Tensor tgt = target.detach();
    Tensor one = Tensor::full(tgt.shape(), 1.0);
    Tensor bce = neg(add(mul(tgt, log(p)), mul(sub(one, tgt), log(sub(one, p)))));
    Tensor per_cell = mean(bce, {1}, false); // average over the D bins -> [M,h,w]
    return mul_scalar(sum(mul(per_cell, mask)), 1.0 / supervised);
}

Tensor ViewTransformer::transform(const Tensor &f, const SceneConfig &scene,
                                  const std::vector<double> &bin_centers, bool training,
                                  Tensor *depth_out, const Rigid &grid_from_ego) {
    Tensor ctx = context_net(f, training);
    Tensor depth = depth_net(f, training);
    if (depth_out) *depth_out = depth;
    LiftedPoints points = lift(ctx, depth, scene.cameras, bin_centers, scene.image_h,
                               scene.image_w, grid_from_ego);
    return voxel_pool(points, scene);
}

}  // namespace focc
