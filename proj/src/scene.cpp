#include "focc/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace focc {

namespace {

constexpr double kRayEps = 1e-9;

// Distance shading keeps far geometry visibly dimmer so depth is learnable
// from color alone; face factors make the three box orientations distinct.
constexpr double kShadeFloor = 0.35;
constexpr double kShadeFalloff = 20.0; // meters
constexpr double kFaceBrightness[3] = {0.9, 0.75, 1.0};

const Vec3 kSkyColor = {0.55, 0.70, 0.92};

Vec3 hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(h, 1.0) * 6.0;
    int i = static_cast<int>(h);
    double f = h - i;
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (i % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

Vec3 class_base_color(int class_id) {
    static const Vec3 table[] = {
        {0.00, 0.00, 0.00}, // 0: free space, never rendered
        {0.28, 0.26, 0.24}, // 1: ground
        {0.85, 0.20, 0.15}, {0.15, 0.65, 0.25}, {0.95, 0.75, 0.10},
        {0.25, 0.35, 0.90}, {0.80, 0.30, 0.75},
    };
    if (class_id >= 0 && class_id < 7) return table[class_id];
    // golden-angle hue walk: distinct-enough colors for any class count
    double hue = 0.08 + 0.618033988749895 * (class_id - 7);
    return hsv_to_rgb(hue, 0.7, 0.85);
}

struct RayHit {
    double t = std::numeric_limits<double>::infinity();
    int class_id = 0;
    int face_axis = 2;
    bool hit = false;
};

// Slab test against [lo,hi].  `t_entry` is the ray parameter of the first
// face crossed and `entry_axis` that face's normal axis.  Rays starting
// inside the box report no hit (cameras never sit inside scene boxes).
bool intersect_aabb(const Vec3 &o, const Vec3 &d, const Vec3 &lo, const Vec3 &hi,
                    double &t_entry, int &entry_axis) {
    double tmin = kRayEps, tmax = std::numeric_limits<double>::infinity();
    int axis = -1;
    for (int i = 0; i < 3; ++i) {
        double oi = o[i], di = d[i];
        if (std::abs(di) < 1e-300) {
            if (oi < lo[i] || oi > hi[i]) return false;
            continue;
        }
        double t1 = (lo[i] - oi) / di, t2 = (hi[i] - oi) / di;
        if (t1 > t2) std::swap(t1, t2);
        if (t1 > tmin) {
            tmin = t1;
            axis = i;
        }
        tmax = std::min(tmax, t2);
        if (tmin > tmax) return false;
    }
    if (axis < 0) return false;
    t_entry = tmin;
    entry_axis = axis;
    return true;
}

void shade_pixel(double *r, double *g, double *b, const RayHit &hit) {
    if (!hit.hit) {
        *r = kSkyColor.x;
        *g = kSkyColor.y;
        *b = kSkyColor.z;
        return;
    }
    Vec3 base = class_base_color(hit.class_id);
    double shade = kFaceBrightness[hit.face_axis] *
                   (kShadeFloor + (1 - kShadeFloor) * std::exp(-hit.t / kShadeFalloff));
    *r = base.x * shade;
    *g = base.y * shade;
    *b = base.z * shade;
}

bool aabb_overlap(const Vec3 &c0, const Vec3 &h0, const Vec3 &c1, const Vec3 &h1) {
    return std::abs(c0.x - c1.x) < h0.x + h1.x &&
           std::abs(c0.y - c1.y) < h0.y + h1.y &&
           std::abs(c0.z - c1.z) < h0.z + h1.z;
}

}  // namespace

void SceneConfig::validate() const {
    if (grid_x <= 0 || grid_y <= 0 || grid_z <= 0)
        throw ConfigError("scene config: grid extents must be positive");
    if (voxel_size <= 0) throw ConfigError("scene config: voxel_size must be positive");
    if (num_classes < 2)
        throw ConfigError("scene config: need at least free + one occupied class, got " +
                          std::to_string(num_classes));
    if (image_h <= 0 || image_w <= 0 || image_h % 32 != 0 || image_w % 32 != 0)
        throw ConfigError("scene config: image dims must be positive multiples of 32, got " +
                          std::to_string(image_h) + "x" + std::to_string(image_w));
    if (cameras.empty()) throw ConfigError("scene config: need at least one camera");
    for (const auto &cam : cameras)
        if (cam.fx == 0 || cam.fy == 0)
            throw ConfigError("scene config: camera focal lengths must be nonzero");
    if (n_context < 1) throw ConfigError("scene config: n_context must be >= 1");
    if (frame_interval <= 0)
        throw ConfigError("scene config: frame_interval must be positive");
    if (horizons.empty()) throw ConfigError("scene config: need at least one horizon");
    for (size_t i = 0; i < horizons.size(); ++i) {
        if (horizons[i] <= 0)
            throw ConfigError("scene config: horizons must be positive");
        if (i > 0 && horizons[i] <= horizons[i - 1])
            throw ConfigError("scene config: horizons must be strictly increasing");
    }
    if (min_objects < 0 || max_objects < min_objects)
        throw ConfigError("scene config: bad object count range");
    if (max_speed < 0) throw ConfigError("scene config: max_speed must be >= 0");
    if (dynamic_fraction < 0 || dynamic_fraction > 1)
        throw ConfigError("scene config: dynamic_fraction must be in [0,1]");
}

namespace {

// Horizontal pinhole camera at `pos` with yaw `psi` (0 = ego forward).
// Columns of cam_to_ego's rotation are the camera's right / down / forward
// axes expressed in the ego frame.
CameraRig make_level_camera(const Vec3 &pos, double psi, double fx, double cx,
                            double cy) {
    Vec3 forward = {std::cos(psi), std::sin(psi), 0};
    Vec3 right = {std::sin(psi), -std::cos(psi), 0};
    Vec3 down = {0, 0, -1};
    CameraRig cam;
    cam.fx = fx;
    cam.fy = fx;
    cam.cx = cx;
    cam.cy = cy;
    cam.cam_to_ego = {Mat3::from_columns(right, down, forward), pos};
    return cam;
}

}  // namespace

SceneConfig toy_scene_config() {
    SceneConfig c;
    c.grid_x = 32;
    c.grid_y = 32;
    c.grid_z = 8;
    c.voxel_size = 0.5;
    c.grid_z0 = -0.5;
    c.num_classes = 5;
    c.image_h = 64;
    c.image_w = 64;
    // two forward cameras toed out by 25 degrees, ~90 degree FOV each
    double fx = c.image_w / 2.0;
    double yaw = 25.0 * M_PI / 180.0;
    c.cameras.push_back(make_level_camera({0.5, 0.4, 1.6}, yaw, fx,
                                          c.image_w / 2.0, c.image_h / 2.0));
    c.cameras.push_back(make_level_camera({0.5, -0.4, 1.6}, -yaw, fx,
                                          c.image_w / 2.0, c.image_h / 2.0));
    c.n_context = 4;
    c.horizons = {1, 2, 3};
    c.frame_interval = 1.0;
    c.min_objects = 2;
    c.max_objects = 5;
    c.max_speed = 1.0;
    c.dynamic_fraction = 0.5;
    return c;
}

SceneConfig paper_shape_scene_config() {
    SceneConfig c;
    c.grid_x = 200;
    c.grid_y = 200;
    c.grid_z = 16;
    c.voxel_size = 0.4;
    c.grid_z0 = -2.0;
    c.num_classes = 17;
    c.image_h = 256;
    c.image_w = 704;
    double fx = c.image_w / 2.0;
    for (int i = 0; i < 6; ++i) {
        double yaw = i * M_PI / 3.0;
        c.cameras.push_back(make_level_camera(
            {0.8 * std::cos(yaw), 0.8 * std::sin(yaw), 1.6}, yaw, fx,
            c.image_w / 2.0, c.image_h / 2.0));
    }
    c.n_context = 4;
    c.horizons = {1, 2, 3};
    c.frame_interval = 1.0;
    c.min_objects = 6;
    c.max_objects = 12;
    return c;
}

SceneSequence generate_scene(const SceneConfig &config) {
    config.validate();
    SceneSequence seq;
    seq.config = config;

    // chronological ticks: observed frames end at offset 0, then the horizons
    for (int i = 0; i < config.n_context; ++i) {
        SceneTick tick;
        tick.time_offset = (i - (config.n_context - 1)) * config.frame_interval;
        tick.is_future = false;
        seq.ticks.push_back(tick);
    }
    for (double h : config.horizons) {
        SceneTick tick;
        tick.time_offset = h;
        tick.is_future = true;
        seq.ticks.push_back(tick);
    }
    for (auto &tick : seq.ticks) {
        tick.world_from_ego = Rigid{};
        if (config.ego_motion)
            tick.world_from_ego.t = {config.ego_speed * tick.time_offset, 0, 0};
    }

    Rng rng(config.seed);
    int count = rng.uniform_int(config.min_objects, config.max_objects);
    // keep boxes in the forward wedge the cameras actually see, with a
    // margin to the grid boundary at the current frame
    double x_lo = 1.5, x_hi = config.grid_extent_x() / 2 - 1.0;
    double y_max = std::min(4.0, config.grid_extent_y() / 2 - 1.0);
    for (int i = 0; i < count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            SceneObject obj;
            obj.class_id = rng.uniform_int(2, config.num_classes - 1);
            obj.half_extent = {rng.uniform(0.25, 0.9), rng.uniform(0.25, 0.9),
                               rng.uniform(0.25, 0.9)};
            obj.center_at_t0 = {rng.uniform(x_lo, x_hi), rng.uniform(-y_max, y_max),
                                obj.half_extent.z}; // resting on the ground
            if (rng.uniform(0, 1) < config.dynamic_fraction)
                obj.velocity = {rng.uniform(-config.max_speed, config.max_speed),
                                rng.uniform(-config.max_speed, config.max_speed), 0};
            bool ok = true;
            for (const auto &other : seq.objects)
                if (aabb_overlap(obj.center_at_t0, obj.half_extent,
                                 other.center_at_t0, other.half_extent)) {
                    ok = false;
                    break;
                }
            if (ok) {
                seq.objects.push_back(obj);
                placed = true;
            }
        }
        if (!placed)
            throw ConfigError("generate_scene: could not place object " +
                              std::to_string(i) + " without overlap after 200 attempts");
    }
    return seq;
}

RenderedViews render_views(const SceneSequence &seq, int tick) {
    const SceneConfig &c = seq.config;
    if (tick < 0 || tick >= static_cast<int>(seq.ticks.size()))
        throw ContractError("render_views: tick index out of range");
    const SceneTick &tk = seq.ticks[tick];

    int m_cams = c.num_cameras(), h = c.image_h, w = c.image_w;
    Tensor images = Tensor::zeros({m_cams, 3, h, w});
    Tensor depths = Tensor::zeros({m_cams, h, w});
    double *img = images.mutable_data().data();
    double *dep = depths.mutable_data().data();

    // boxes at this tick
    std::vector<Vec3> lo(seq.objects.size()), hi(seq.objects.size());
    for (size_t i = 0; i < seq.objects.size(); ++i) {
        Vec3 ctr = seq.objects[i].center_at(tk.time_offset);
        lo[i] = ctr - seq.objects[i].half_extent;
        hi[i] = ctr + seq.objects[i].half_extent;
    }

    for (int m = 0; m < m_cams; ++m) {
        const CameraRig &cam = c.cameras[m];
        Rigid world_from_cam = tk.world_from_ego.compose(cam.cam_to_ego);
        Vec3 origin = world_from_cam.t;
        for (int v = 0; v < h; ++v) {
            for (int u = 0; u < w; ++u) {
                // camera-frame direction with unit forward component, so the
                // ray parameter t is exactly the optical-axis depth
                Vec3 dir_cam = {(u + 0.5 - cam.cx) / cam.fx,
                                (v + 0.5 - cam.cy) / cam.fy, 1.0};
                Vec3 d = world_from_cam.rotate(dir_cam);

                RayHit best;
                for (size_t i = 0; i < seq.objects.size(); ++i) {
                    double t;
                    int axis;
                    if (intersect_aabb(origin, d, lo[i], hi[i], t, axis) && t < best.t) {
                        best = {t, seq.objects[i].class_id, axis, true};
                    }
                }
                // infinite ground plane z = 0
                if (std::abs(d.z) > 1e-300) {
                    double t = -origin.z / d.z;
                    if (t > kRayEps && t < best.t) best = {t, 1, 2, true};
                }

                double r, g, b;
                shade_pixel(&r, &g, &b, best);
                size_t px = static_cast<size_t>(v) * w + u;
                size_t plane = static_cast<size_t>(h) * w;
                img[(static_cast<size_t>(m) * 3 + 0) * plane + px] = r;
                img[(static_cast<size_t>(m) * 3 + 1) * plane + px] = g;
                img[(static_cast<size_t>(m) * 3 + 2) * plane + px] = b;
                dep[static_cast<size_t>(m) * plane + px] = best.hit ? best.t : -1.0;
            }
        }
    }
    return {images, depths};
}

std::vector<uint8_t> rasterize_occupancy(const SceneSequence &seq, int tick,
                                         GridFrame frame) {
    const SceneConfig &c = seq.config;
    if (tick < 0 || tick >= static_cast<int>(seq.ticks.size()))
        throw ContractError("rasterize_occupancy: tick index out of range");
    const SceneTick &tk = seq.ticks[tick];
    const Rigid &world_from_ego = frame == GridFrame::EgoAtCurrent
                                      ? seq.ticks[c.n_context - 1].world_from_ego
                                      : tk.world_from_ego;

    std::vector<Vec3> lo(seq.objects.size()), hi(seq.objects.size());
    for (size_t i = 0; i < seq.objects.size(); ++i) {
        Vec3 ctr = seq.objects[i].center_at(tk.time_offset);
        lo[i] = ctr - seq.objects[i].half_extent;
        hi[i] = ctr + seq.objects[i].half_extent;
    }

    std::vector<uint8_t> grid(static_cast<size_t>(c.grid_z) * c.grid_y * c.grid_x, 0);
    double x0 = -c.grid_extent_x() / 2, y0 = -c.grid_extent_y() / 2;
    size_t idx = 0;
    for (int iz = 0; iz < c.grid_z; ++iz) {
        double z = c.grid_z0 + (iz + 0.5) * c.voxel_size;
        for (int iy = 0; iy < c.grid_y; ++iy) {
            double y = y0 + (iy + 0.5) * c.voxel_size;
            for (int ix = 0; ix < c.grid_x; ++ix, ++idx) {
                Vec3 p = world_from_ego.apply({x0 + (ix + 0.5) * c.voxel_size, y, z});
                int label = p.z < 0 ? 1 : 0; // ground slab below the plane
                for (size_t i = 0; i < seq.objects.size(); ++i) {
                    // half-open on the high side so adjacent boxes can't
                    // both claim a voxel center sitting on a shared face
                    if (p.x >= lo[i].x && p.x < hi[i].x && p.y >= lo[i].y &&
                        p.y < hi[i].y && p.z >= lo[i].z && p.z < hi[i].z)
                        label = std::max(label, seq.objects[i].class_id);
                }
                grid[idx] = static_cast<uint8_t>(label);
            }
        }
    }
    return grid;
}

std::vector<double> make_depth_bin_edges(const SceneConfig &config, int num_bins) {
    if (num_bins < 1) throw ConfigError("make_depth_bin_edges: need at least one bin");
    double ex = config.grid_extent_x(), ey = config.grid_extent_y(),
           ez = config.grid_extent_z();
    double diag = std::sqrt(ex * ex + ey * ey + ez * ez);
    std::vector<double> edges(num_bins + 1);
    for (int i = 0; i <= num_bins; ++i)
        edges[i] = 1.0 + i * (diag - 1.0) / num_bins;
    return edges;
}

Tensor depth_to_bins(const Tensor &depth, const std::vector<double> &edges) {
    if (depth.ndim() != 3)
        throw ShapeError("depth_to_bins: expected [M,H,W], got " + shape_str(depth.shape()));
    if (edges.size() < 2)
        throw ConfigError("depth_to_bins: need at least two bin edges");
    for (size_t i = 1; i < edges.size(); ++i)
        if (edges[i] <= edges[i - 1])
            throw ConfigError("depth_to_bins: bin edges must be strictly increasing");
    int m = depth.dim(0), h = depth.dim(1), w = depth.dim(2);
    if (h % 16 != 0 || w % 16 != 0)
        throw ShapeError("depth_to_bins: image dims must be multiples of 16, got " +
                         shape_str(depth.shape()));
    int d_bins = static_cast<int>(edges.size()) - 1;
    int oh = h / 16, ow = w / 16;

    Tensor out = Tensor::zeros({m, d_bins, oh, ow});
    double *o = out.mutable_data().data();
    const double *src = depth.data().data();
    for (int mi = 0; mi < m; ++mi) {
        for (int py = 0; py < oh; ++py) {
            for (int px = 0; px < ow; ++px) {
                // representative depth: nearest valid surface in the patch
                double best = std::numeric_limits<double>::infinity();
                for (int dy = 0; dy < 16; ++dy)
                    for (int dx = 0; dx < 16; ++dx) {
                        double v = src[(static_cast<size_t>(mi) * h + py * 16 + dy) * w +
                                       px * 16 + dx];
                        if (v > 0 && v < best) best = v;
                    }
                if (!std::isfinite(best)) continue; // no valid depth: zero target
                // bins are (e[d], e[d+1]]; an exact edge hit goes to the lower bin
                auto it = std::lower_bound(edges.begin(), edges.end(), best);
                long bin = (it - edges.begin()) - 1;
                if (best > edges.back() || bin < 0) continue; // outside range
                o[((static_cast<size_t>(mi) * d_bins + bin) * oh + py) * ow + px] = 1.0;
            }
        }
    }
    return out;
}

}  // namespace focc
