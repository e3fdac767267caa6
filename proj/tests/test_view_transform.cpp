#include <doctest.h>

#include <cmath>

#include "focc/gradcheck.hpp"
#include "focc/view_transform.hpp"

using namespace focc;

namespace {

std::vector<double> centers_of(const std::vector<double> &edges) {
    std::vector<double> c(edges.size() - 1);
    for (size_t i = 0; i + 1 < edges.size(); ++i) c[i] = 0.5 * (edges[i] + edges[i + 1]);
    return c;
}

// hand-built point cloud, bypassing camera geometry
LiftedPoints manual_points(std::vector<Vec3> pos, const Tensor &ctx,
                           const Tensor &probs) {
    LiftedPoints p;
    p.positions = std::move(pos);
    p.context = ctx;
    p.depth_probs = probs;
    p.cams = ctx.dim(0);
    p.bins = probs.dim(1);
    p.h = ctx.dim(2);
    p.w = ctx.dim(3);
    return p;
}

}  // namespace

TEST_CASE("context and depth heads keep the cell grid and normalize depth") {
    ParamRegistry reg;
    Rng rng(1);
    ViewTransformConfig cfg; // toy: 64 -> 16 ctx channels, 16 bins
    ViewTransformer vt(reg, "view.", cfg, rng);
    Tensor f = Tensor::uniform({2, 64, 4, 4}, -1.0, 1.0, rng);

    Tensor ctx = vt.context_net(f, true);
    CHECK(ctx.shape() == Shape{2, 16, 4, 4});

    Tensor depth = vt.depth_net(f, true);
    REQUIRE(depth.shape() == Shape{2, 16, 4, 4});
    for (int m = 0; m < 2; ++m)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                double s = 0;
                for (int d = 0; d < 16; ++d) s += depth.at({m, d, y, x});
                CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
            }

    // zero weights -> uniform logits -> every bin gets exactly 1/D
    for (auto &e : reg.entries())
        if (e.name.rfind("view.depth.", 0) == 0 && !e.buffer)
            std::fill(e.tensor.mutable_data().begin(), e.tensor.mutable_data().end(), 0.0);
    Tensor uniform = vt.depth_net(f, false);
    for (int d = 0; d < 16; ++d)
        CHECK(uniform.at({0, d, 1, 2}) == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("lift puts the principal-point ray on the optical axis") {
    // identity mount: camera frame == grid frame, principal point at the
    // center of feature cell (0,0) of a 32x32 image
    CameraRig cam;
    cam.fx = cam.fy = 20.0;
    cam.cx = 8.0;
    cam.cy = 8.0;
    Tensor ctx = Tensor::full({1, 3, 2, 2}, 1.0);
    Tensor probs = Tensor::full({1, 4, 2, 2}, 0.25);
    std::vector<double> centers = {1.0, 2.0, 3.0, 4.0};
    LiftedPoints pts = lift(ctx, probs, {cam}, centers, 32, 32);

    REQUIRE(pts.positions.size() == 4 * 4);
    for (int d = 0; d < 4; ++d) {
        const Vec3 &p = pts.positions[d * 4 + 0]; // cell (0,0)
        CHECK(p.x == doctest::Approx(0.0));
        CHECK(p.y == doctest::Approx(0.0));
        CHECK(p.z == doctest::Approx(centers[d]));
    }

    CameraRig bad = cam;
    bad.fx = 0;
    CHECK_THROWS_AS(lift(ctx, probs, {bad}, centers, 32, 32), ConfigError);
    CHECK_THROWS_AS(lift(ctx, probs, {cam}, centers, 64, 64), ShapeError);
    CHECK_THROWS_AS(lift(ctx, probs, {cam}, {1.0, 2.0}, 32, 32), ShapeError);
}

TEST_CASE("lift positions match an independent unprojection oracle") {
    SceneConfig scene = toy_scene_config();
    Rng rng(2);
    Tensor ctx = Tensor::uniform({2, 16, 4, 4}, -1.0, 1.0, rng);
    Tensor probs = softmax(Tensor::uniform({2, 16, 4, 4}, -1.0, 1.0, rng), 1);
    auto centers = centers_of(make_depth_bin_edges(scene, 16));
    LiftedPoints pts = lift(ctx, probs, scene.cameras, centers, 64, 64);

    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        int m = rng.uniform_int(0, 1), d = rng.uniform_int(0, 15);
        int y = rng.uniform_int(0, 3), x = rng.uniform_int(0, 3);
        // oracle: raw pinhole algebra on the calibration numbers
        const CameraRig &cam = scene.cameras[m];
        double u = (x + 0.5) * 16, v = (y + 0.5) * 16, dep = centers[d];
        double pc[3] = {(u - cam.cx) / cam.fx * dep, (v - cam.cy) / cam.fy * dep, dep};
        const double *r = cam.cam_to_ego.R.m;
        double expX = r[0] * pc[0] + r[1] * pc[1] + r[2] * pc[2] + cam.cam_to_ego.t.x;
        double expY = r[3] * pc[0] + r[4] * pc[1] + r[5] * pc[2] + cam.cam_to_ego.t.y;
        double expZ = r[6] * pc[0] + r[7] * pc[1] + r[8] * pc[2] + cam.cam_to_ego.t.z;
        const Vec3 &got = pts.positions[((m * 16 + d) * 4 + y) * 4 + x];
        worst = std::max({worst, std::abs(got.x - expX), std::abs(got.y - expY),
                          std::abs(got.z - expZ)});
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("voxel pooling adds features of points sharing a voxel") {
    SceneConfig grid = toy_scene_config();
    Tensor ctx({1, 2, 1, 2}, {1.0, 3.0, 10.0, 30.0}); // two cells, C=2
    Tensor probs = Tensor::full({1, 1, 1, 2}, 1.0);
    Vec3 same = {2.1, 0.1, 1.1};
    LiftedPoints pts = manual_points({same, same}, ctx, probs);

    Tensor vol = voxel_pool(pts, grid);
    REQUIRE(vol.shape() == Shape{2, 8, 32, 32});
    int ix = 20, iy = 16, iz = 3; // floor((2.1+8)/.5), floor((.1+8)/.5), floor((1.1+.5)/.5)
    CHECK(vol.at({0, iz, iy, ix}) == doctest::Approx(1.0 + 3.0));
    CHECK(vol.at({1, iz, iy, ix}) == doctest::Approx(10.0 + 30.0));
    double total = sum(vol).item();
    CHECK(total == doctest::Approx(44.0).epsilon(1e-12));
}

TEST_CASE("pooling matches a brute-force scatter oracle bit-for-bit scale") {
    SceneConfig grid = toy_scene_config();
    grid.grid_x = 8;
    grid.grid_y = 8;
    grid.grid_z = 4;
    Rng rng(3);
    int m = 2, d = 5, h = 3, w = 3, c = 4;
    Tensor ctx = Tensor::uniform({m, c, h, w}, -1.0, 1.0, rng);
    Tensor probs = softmax(Tensor::uniform({m, d, h, w}, -1.0, 1.0, rng), 1);
    std::vector<Vec3> pos(m * d * h * w);
    for (auto &p : pos) // roughly half the points fall outside the 4x4x2m grid
        p = {rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0), rng.uniform(-1.0, 3.0)};
    LiftedPoints pts = manual_points(pos, ctx, probs);
    Tensor vol = voxel_pool(pts, grid);

    // oracle: naive scatter in point order
    std::vector<double> expect(static_cast<size_t>(c) * 4 * 8 * 8, 0.0);
    int64_t cells = h * w, voxels = 4 * 8 * 8;
    double in_bounds_mass = 0;
    for (size_t i = 0; i < pos.size(); ++i) {
        int ix = static_cast<int>(std::floor((pos[i].x + 2.0) / 0.5));
        int iy = static_cast<int>(std::floor((pos[i].y + 2.0) / 0.5));
        int iz = static_cast<int>(std::floor((pos[i].z + 0.5) / 0.5));
        if (ix < 0 || ix >= 8 || iy < 0 || iy >= 8 || iz < 0 || iz >= 4) continue;
        int64_t vox = (static_cast<int64_t>(iz) * 8 + iy) * 8 + ix;
        int64_t cell = static_cast<int64_t>(i) % cells;
        int64_t mi = static_cast<int64_t>(i) / (cells * d);
        double p = probs.data()[i];
        for (int ci = 0; ci < c; ++ci) {
            double f = ctx.data()[(mi * c + ci) * cells + cell] * p;
            expect[ci * voxels + vox] += f;
            in_bounds_mass += f;
        }
    }
    double worst = 0;
    for (size_t i = 0; i < expect.size(); ++i)
        worst = std::max(worst, std::abs(vol.data()[i] - expect[i]));
    CHECK(worst < 1e-12);

    // conservation: pooled mass equals the in-bounds point mass
    CHECK(sum(vol).item() == doctest::Approx(in_bounds_mass).epsilon(1e-9));

    // out-of-bounds-only cloud pools to nothing
    for (auto &p : pos) p.z = 100.0;
    Tensor empty = voxel_pool(manual_points(pos, ctx, probs), grid);
    CHECK(sum(empty).item() == 0.0);
}

TEST_CASE("pooling is differentiable w.r.t. context and depth probabilities") {
    SceneConfig grid = toy_scene_config();
    grid.grid_x = grid.grid_y = 8;
    grid.grid_z = 4;
    Rng rng(4);
    int m = 1, d = 4, h = 2, w = 2, c = 3;
    std::vector<Vec3> pos(m * d * h * w);
    for (auto &p : pos)
        p = {rng.uniform(-1.9, 1.9), rng.uniform(-1.9, 1.9), rng.uniform(-0.4, 1.4)};
    Tensor weights = Tensor::uniform({c, 4, 8, 8}, -1.0, 1.0, rng);

    Tensor ctx = Tensor::uniform({m, c, h, w}, -1.0, 1.0, rng);
    Tensor probs = Tensor::uniform({m, d, h, w}, 0.05, 1.0, rng);
    ctx.set_requires_grad(true);
    probs.set_requires_grad(true);

    auto wrt_probs = [&](const Tensor &x) {
        return sum(mul(voxel_pool(manual_points(pos, ctx, x), grid), weights));
    };
    CHECK(finite_diff_check(wrt_probs, probs) < 1e-4);

    auto wrt_ctx = [&](const Tensor &x) {
        return sum(mul(voxel_pool(manual_points(pos, x, probs), grid), weights));
    };
    CHECK(finite_diff_check(wrt_ctx, ctx) < 1e-4);
}

TEST_CASE("depth loss: closed-form values, clamping, and full masking") {
    // uniform prediction over 4 bins vs one-hot: -(ln .25 + 3 ln .75)/4
    Tensor pred = Tensor::full({1, 4, 1, 1}, 0.25);
    Tensor target({1, 4, 1, 1}, {0, 1, 0, 0});
    Tensor mask = Tensor::full({1, 1, 1}, 1.0);
    double expect = -(std::log(0.25) + 3 * std::log(0.75)) / 4;
    CHECK(depth_loss(pred, target, mask).item() ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.5623351446188083).epsilon(1e-15));

    // a perfect (clamped) prediction costs nearly nothing
    CHECK(depth_loss(target, target, mask).item() < 1e-5);

    // fully masked: exact zero, and no gradient reaches the prediction
    Tensor p2 = Tensor::full({1, 4, 1, 1}, 0.25);
    p2.set_requires_grad(true);
    Tensor zero_mask = Tensor::zeros({1, 1, 1});
    Tensor loss = depth_loss(p2, target, zero_mask);
    CHECK(loss.item() == 0.0);
    loss.backward();
    CHECK(!p2.has_grad());

    CHECK_THROWS_AS(depth_loss(pred, Tensor::zeros({1, 5, 1, 1}), mask), ContractError);
    CHECK_THROWS_AS(depth_loss(pred, target, Tensor::zeros({1, 2, 2})), ContractError);

    // the mask helper marks exactly the nonempty one-hot columns
    Tensor t2 = Tensor::zeros({1, 4, 1, 2});
    t2.mutable_data()[2] = 1.0; // bin 1, cell (0,0)
    Tensor m2 = depth_target_mask(t2);
    CHECK(m2.at({0, 0, 0}) == 1.0);
    CHECK(m2.at({0, 0, 1}) == 0.0);
}

TEST_CASE("full transform produces the voxel volume and exposes the depth") {
    SceneConfig scene = toy_scene_config();
    ParamRegistry reg;
    Rng rng(5);
    ViewTransformer vt(reg, "view.", ViewTransformConfig{}, rng);
    auto centers = centers_of(make_depth_bin_edges(scene, 16));

    Tensor f = Tensor::uniform({2, 64, 4, 4}, -1.0, 1.0, rng);
    Tensor depth;
    Tensor vol = vt.transform(f, scene, centers, true, &depth);
    CHECK(vol.shape() == Shape{16, 8, 32, 32});
    CHECK(depth.shape() == Shape{2, 16, 4, 4});
    for (double v : vol.data()) REQUIRE(std::isfinite(v));

    // deterministic: same weights and input, same volume
    Tensor vol2 = vt.transform(f, scene, centers, true);
    bool identical = true;
    for (int i = 0; i < vol.numel(); ++i)
        identical = identical && vol.data()[i] == vol2.data()[i];
    CHECK(identical);
}

TEST_CASE("lifting ground-truth depth lands mass on the scene geometry") {
    SceneConfig scene = toy_scene_config();
    scene.seed = 5;
    SceneSequence seq = generate_scene(scene);
    int t = scene.n_context - 1;
    RenderedViews views = render_views(seq, t);
    auto grid = rasterize_occupancy(seq, t, GridFrame::EgoAtCurrent);

    // fine bins (one voxel wide) so bin quantization stays within a voxel
    auto edges = make_depth_bin_edges(scene, 44);
    Tensor target = depth_to_bins(views.depths, edges);
    Tensor ones = Tensor::full({2, 1, 4, 4}, 1.0);
    LiftedPoints pts = lift(ones, target, scene.cameras, centers_of(edges), 64, 64);
    Tensor vol = voxel_pool(pts, scene);

    // every cell with mass must sit within 2 voxels of labeled geometry
    // (patch-min depth uses the cell-center ray, so up to half a cell of
    // lateral quantization is expected)
    int massy = 0, near_geometry = 0;
    for (int iz = 0; iz < 8; ++iz)
        for (int iy = 0; iy < 32; ++iy)
            for (int ix = 0; ix < 32; ++ix) {
                if (vol.at({0, iz, iy, ix}) <= 0) continue;
                ++massy;
                bool found = false;
                for (int dz = -2; dz <= 2 && !found; ++dz)
                    for (int dy = -2; dy <= 2 && !found; ++dy)
                        for (int dx = -2; dx <= 2 && !found; ++dx) {
                            int z = iz + dz, y = iy + dy, x = ix + dx;
                            if (z < 0 || z >= 8 || y < 0 || y >= 32 || x < 0 || x >= 32)
                                continue;
                            if (grid[(z * 32 + y) * 32 + x] != 0) found = true;
                        }
                if (found) ++near_geometry;
            }
    REQUIRE(massy > 0);
    CHECK(near_geometry == massy);
}
