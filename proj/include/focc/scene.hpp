#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "focc/geometry.hpp"
#include "focc/tensor.hpp"

namespace focc {

// A pinhole camera rigidly mounted on the ego body.  Camera frame is
// z-forward / x-right / y-down; ego frame is x-forward / y-left / z-up.
struct CameraRig {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Rigid cam_to_ego;
};

// Everything needed to generate, render and label one miniature scene.
// The voxel grid is axis-aligned in the ego frame, centered on the ego in
// x/y, and starts at grid_z0 in z.
struct SceneConfig {
    int grid_x = 32, grid_y = 32, grid_z = 8;
    double voxel_size = 0.5;
    double grid_z0 = -0.5;
    int num_classes = 5;  // class 0 = free space, 1 = ground, >=2 objects
    int image_h = 64, image_w = 64;
    std::vector<CameraRig> cameras;

    int n_context = 4;                        // observed frames (past + current)
    std::vector<double> horizons = {1, 2, 3}; // future offsets in seconds
    double frame_interval = 1.0;              // seconds between observed frames

    int min_objects = 2, max_objects = 5;
    double max_speed = 1.0;        // |v_x|,|v_y| bound for moving boxes, m/s
    double dynamic_fraction = 0.5; // probability that a box moves
    bool ego_motion = false;       // ego stays at the world origin by default
    double ego_speed = 1.0;        // forward m/s when ego_motion is on

    uint64_t seed = 1;

    int num_cameras() const { return static_cast<int>(cameras.size()); }
    int num_ticks() const { return n_context + static_cast<int>(horizons.size()); }
    double grid_extent_x() const { return grid_x * voxel_size; }
    double grid_extent_y() const { return grid_y * voxel_size; }
    double grid_extent_z() const { return grid_z * voxel_size; }
    // Throws ConfigError when a field is out of its documented range.
    void validate() const;
};

// Small desk-scale setup: 2 forward cameras, 64x64 images, 16m x 16m x 4m
// grid at 0.5m voxels, 5 classes.
SceneConfig toy_scene_config();
// Full-scale shape stand-in: 6 surround cameras, 256x704 images, 200x200x16
// grid at 0.4m voxels, 17 classes.  Meant for shape checks, not training.
SceneConfig paper_shape_scene_config();

// One axis-aligned box with constant velocity.  center_at_t0 is the center
// at the *current* frame (time offset 0); position at offset dt is
// center_at_t0 + velocity*dt.
struct SceneObject {
    int class_id = 2;
    Vec3 half_extent;
    Vec3 center_at_t0;
    Vec3 velocity;

    Vec3 center_at(double dt) const { return center_at_t0 + velocity * dt; }
};

// One sampled time instant of a sequence.
struct SceneTick {
    double time_offset = 0; // seconds relative to the current frame
    bool is_future = false;
    Rigid world_from_ego;
};

struct SceneSequence {
    SceneConfig config;
    std::vector<SceneObject> objects;
    std::vector<SceneTick> ticks; // chronological: n_context observed, then horizons
};

// Deterministically samples boxes for the given config/seed.  Throws
// ConfigError if a non-overlapping placement cannot be found.
SceneSequence generate_scene(const SceneConfig &config);

// Rendered output for all cameras at one tick.
struct RenderedViews {
    Tensor images; // [M,3,H,W], values in [0,1]
    Tensor depths; // [M,H,W], metric distance along the optical axis, -1 = sky
};

// Analytic raycast of the boxes + infinite ground plane.
RenderedViews render_views(const SceneSequence &seq, int tick);

// Which ego pose the voxel grid is anchored to.
enum class GridFrame { EgoAtCurrent, EgoAtTick };

// Labels every voxel center: 0 free, 1 ground slab, otherwise the highest
// class id among boxes containing it.  Returns [grid_z*grid_y*grid_x] ids,
// z-major row-major.
std::vector<uint8_t> rasterize_occupancy(const SceneSequence &seq, int tick,
                                         GridFrame frame);

// D+1 strictly increasing metric bin edges spanning [1m, grid diagonal].
std::vector<double> make_depth_bin_edges(const SceneConfig &config, int num_bins);

// Converts dense depth [M,H,W] to one-hot bin targets [M,D,h/16,w/16] by
// taking the min valid depth in each 16x16 patch.  Patches with no valid
// depth, or whose depth falls outside the edge range, get an all-zero
// column.  A depth exactly on an edge goes to the lower bin.
Tensor depth_to_bins(const Tensor &depth, const std::vector<double> &edges);

// ---- dataset files -------------------------------------------------------

// Binary PPM (P6) round-trip; values are quantized to 8 bits on write.
void write_ppm(const std::string &path, const Tensor &image); // [3,H,W]
Tensor read_ppm(const std::string &path);

// Raw little-endian float32, row-major.
void write_depth_f32(const std::string &path, const Tensor &depth); // [H,W]
Tensor read_depth_f32(const std::string &path, int h, int w);

// Occupancy grid: "FOOCC1\n", then u32 Z,Y,X, then Z*Y*X class id bytes.
void write_occ(const std::string &path, const std::vector<uint8_t> &grid,
               int z, int y, int x);
std::vector<uint8_t> read_occ(const std::string &path, int &z, int &y, int &x);

// One tick of a scene as stored on disk.
struct SceneFrameData {
    double time_offset = 0;
    bool is_future = false;
    Tensor images;                // [M,3,H,W]
    Tensor depths;                // [M,H,W]
    std::vector<uint8_t> occ;     // grid in the ego-at-current frame
};

struct SceneData {
    uint64_t seed = 0;
    std::vector<SceneFrameData> frames; // chronological
};

// Renders + rasterizes every tick of `seq` into dir/scene_<seed>/ and
// appends the scene to dir/dataset.json (config echo + scene list).
void write_scene_dataset(const std::string &dir, const SceneSequence &seq);

// Creates dir/dataset.json with the config echo and an empty scene list, or
// checks an existing manifest against the config.
void init_dataset_dir(const std::string &dir, const SceneConfig &config);

// Loads dataset.json and all scene directories under `dir`.
struct Dataset {
    SceneConfig config;
    std::vector<SceneData> scenes;
};
Dataset load_dataset(const std::string &dir);

}  // namespace focc
