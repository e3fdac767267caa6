#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "focc/occupancy.hpp"
#include "focc/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace focc {

namespace {

constexpr char kOccMagic[] = "FOOCC1\n";

std::ofstream open_out(const std::string &path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open for reading: " + path);
    return f;
}

void write_u32(std::ostream &f, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<const char *>(b), 4);
}

uint32_t read_u32(std::istream &f, const std::string &path) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char *>(b), 4))
        throw ContractError("truncated file: " + path);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

// PPM header token reader: skips whitespace and '#' comments.
int read_ppm_int(std::istream &f, const std::string &path) {
    int c = f.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = f.get();
        c = f.get();
    }
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = f.get();
    }
    if (!any) throw ContractError("malformed ppm header: " + path);
    return value;
}

json rigid_to_json(const Rigid &r) {
    json j;
    j["R"] = std::vector<double>(r.R.m, r.R.m + 9);
    j["t"] = {r.t.x, r.t.y, r.t.z};
    return j;
}

Rigid rigid_from_json(const json &j) {
    Rigid r;
    auto rm = j.at("R").get<std::vector<double>>();
    if (rm.size() != 9) throw ContractError("manifest: rotation must have 9 entries");
    std::copy(rm.begin(), rm.end(), r.R.m);
    auto t = j.at("t").get<std::vector<double>>();
    if (t.size() != 3) throw ContractError("manifest: translation must have 3 entries");
    r.t = {t[0], t[1], t[2]};
    return r;
}

json config_to_json(const SceneConfig &c) {
    json j;
    j["grid_x"] = c.grid_x;
    j["grid_y"] = c.grid_y;
    j["grid_z"] = c.grid_z;
    j["voxel_size"] = c.voxel_size;
    j["grid_z0"] = c.grid_z0;
    j["num_classes"] = c.num_classes;
    j["image_h"] = c.image_h;
    j["image_w"] = c.image_w;
    j["n_context"] = c.n_context;
    j["horizons"] = c.horizons;
    j["frame_interval"] = c.frame_interval;
    j["min_objects"] = c.min_objects;
    j["max_objects"] = c.max_objects;
    j["max_speed"] = c.max_speed;
    j["dynamic_fraction"] = c.dynamic_fraction;
    j["ego_motion"] = c.ego_motion;
    j["ego_speed"] = c.ego_speed;
    json cams = json::array();
    for (const auto &cam : c.cameras) {
        json cj;
        cj["fx"] = cam.fx;
        cj["fy"] = cam.fy;
        cj["cx"] = cam.cx;
        cj["cy"] = cam.cy;
        cj["cam_to_ego"] = rigid_to_json(cam.cam_to_ego);
        cams.push_back(cj);
    }
    j["cameras"] = cams;
    return j;
}

SceneConfig config_from_json(const json &j) {
    SceneConfig c;
    c.grid_x = j.at("grid_x").get<int>();
    c.grid_y = j.at("grid_y").get<int>();
    c.grid_z = j.at("grid_z").get<int>();
    c.voxel_size = j.at("voxel_size").get<double>();
    c.grid_z0 = j.at("grid_z0").get<double>();
    c.num_classes = j.at("num_classes").get<int>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.n_context = j.at("n_context").get<int>();
    c.horizons = j.at("horizons").get<std::vector<double>>();
    c.frame_interval = j.at("frame_interval").get<double>();
    c.min_objects = j.at("min_objects").get<int>();
    c.max_objects = j.at("max_objects").get<int>();
    c.max_speed = j.at("max_speed").get<double>();
    c.dynamic_fraction = j.at("dynamic_fraction").get<double>();
    c.ego_motion = j.at("ego_motion").get<bool>();
    c.ego_speed = j.at("ego_speed").get<double>();
    for (const auto &cj : j.at("cameras")) {
        CameraRig cam;
        cam.fx = cj.at("fx").get<double>();
        cam.fy = cj.at("fy").get<double>();
        cam.cx = cj.at("cx").get<double>();
        cam.cy = cj.at("cy").get<double>();
        cam.cam_to_ego = rigid_from_json(cj.at("cam_to_ego"));
        c.cameras.push_back(cam);
    }
    return c;
}

}  // namespace

void write_ppm(const std::string &path, const Tensor &image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
    int h = image.dim(1), w = image.dim(2);
    auto f = open_out(path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const double *src = image.data().data();
    size_t plane = static_cast<size_t>(h) * w;
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u)
            for (int ch = 0; ch < 3; ++ch) {
                double val = src[ch * plane + static_cast<size_t>(v) * w + u];
                val = std::clamp(val, 0.0, 1.0);
                row[static_cast<size_t>(u) * 3 + ch] =
                    static_cast<unsigned char>(std::lround(val * 255.0));
            }
        f.write(reinterpret_cast<const char *>(row.data()), row.size());
    }
    if (!f) throw ContractError("write_ppm: write failed: " + path);
}

Tensor read_ppm(const std::string &path) {
    auto f = open_in(path);
    char magic[2];
    if (!f.read(magic, 2) || magic[0] != 'P' || magic[1] != '6')
        throw ContractError("read_ppm: not a binary ppm: " + path);
    int w = read_ppm_int(f, path);
    int h = read_ppm_int(f, path);
    int maxval = read_ppm_int(f, path);
    if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 || maxval != 255)
        throw ContractError("read_ppm: unsupported header in " + path);
    // the int reader consumed the single separator after maxval, so the
    // stream now sits exactly on the first pixel byte
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    if (!f.read(reinterpret_cast<char *>(raw.data()), raw.size()))
        throw ContractError("read_ppm: truncated pixel data: " + path);
    Tensor image = Tensor::zeros({3, h, w});
    double *dst = image.mutable_data().data();
    size_t plane = static_cast<size_t>(h) * w;
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u)
            for (int ch = 0; ch < 3; ++ch)
                dst[ch * plane + static_cast<size_t>(v) * w + u] =
                    raw[(static_cast<size_t>(v) * w + u) * 3 + ch] / 255.0;
    return image;
}

void write_depth_f32(const std::string &path, const Tensor &depth) {
    if (depth.ndim() != 2)
        throw ShapeError("write_depth_f32: expected [H,W], got " + shape_str(depth.shape()));
    auto f = open_out(path);
    const double *src = depth.data().data();
    std::vector<float> buf(depth.numel());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
    f.write(reinterpret_cast<const char *>(buf.data()), buf.size() * sizeof(float));
    if (!f) throw ContractError("write_depth_f32: write failed: " + path);
}

Tensor read_depth_f32(const std::string &path, int h, int w) {
    auto f = open_in(path);
    std::vector<float> buf(static_cast<size_t>(h) * w);
    if (!f.read(reinterpret_cast<char *>(buf.data()), buf.size() * sizeof(float)))
        throw ContractError("read_depth_f32: truncated file: " + path);
    Tensor depth = Tensor::zeros({h, w});
    double *dst = depth.mutable_data().data();
    for (size_t i = 0; i < buf.size(); ++i) dst[i] = buf[i];
    return depth;
}

void write_occ(const std::string &path, const std::vector<uint8_t> &grid, int z,
               int y, int x) {
    if (grid.size() != static_cast<size_t>(z) * y * x)
        throw ShapeError("write_occ: grid size does not match dims");
    auto f = open_out(path);
    f.write(kOccMagic, 7);
    write_u32(f, static_cast<uint32_t>(z));
    write_u32(f, static_cast<uint32_t>(y));
    write_u32(f, static_cast<uint32_t>(x));
    f.write(reinterpret_cast<const char *>(grid.data()), grid.size());
    if (!f) throw ContractError("write_occ: write failed: " + path);
}

std::vector<uint8_t> read_occ(const std::string &path, int &z, int &y, int &x) {
    auto f = open_in(path);
    char magic[7];
    if (!f.read(magic, 7) || std::memcmp(magic, kOccMagic, 7) != 0)
        throw ContractError("read_occ: bad magic in " + path);
    uint32_t uz = read_u32(f, path), uy = read_u32(f, path), ux = read_u32(f, path);
    if (uz == 0 || uy == 0 || ux == 0 ||
        static_cast<uint64_t>(uz) * uy * ux > (1ull << 31))
        throw ContractError("read_occ: implausible grid dims in " + path);
    std::vector<uint8_t> grid(static_cast<size_t>(uz) * uy * ux);
    if (!f.read(reinterpret_cast<char *>(grid.data()), grid.size()))
        throw ContractError("read_occ: truncated grid data: " + path);
    z = static_cast<int>(uz);
    y = static_cast<int>(uy);
    x = static_cast<int>(ux);
    return grid;
}

void write_scene_dataset(const std::string &dir, const SceneSequence &seq) {
    const SceneConfig &c = seq.config;
    std::string scene_name = "scene_" + std::to_string(c.seed);
    fs::path scene_dir = fs::path(dir) / scene_name;
    fs::create_directories(scene_dir);

    json scene_meta;
    scene_meta["seed"] = c.seed;
    json ticks = json::array();
    for (size_t t = 0; t < seq.ticks.size(); ++t) {
        fs::path tick_dir = scene_dir / ("t" + std::to_string(t));
        fs::create_directories(tick_dir);

        RenderedViews views = render_views(seq, static_cast<int>(t));
        for (int m = 0; m < c.num_cameras(); ++m) {
            Tensor img = reshape(slice(views.images, 0, m, 1), {3, c.image_h, c.image_w});
            write_ppm((tick_dir / ("cam" + std::to_string(m) + ".ppm")).string(), img);
            Tensor dep = reshape(slice(views.depths, 0, m, 1), {c.image_h, c.image_w});
            write_depth_f32((tick_dir / ("depth" + std::to_string(m) + ".f32")).string(),
                            dep);
        }
        auto occ = rasterize_occupancy(seq, static_cast<int>(t), GridFrame::EgoAtCurrent);
        write_occ((tick_dir / "occ_egoT.occ").string(), occ, c.grid_z, c.grid_y, c.grid_x);
        if (c.ego_motion) {
            auto occ_t = rasterize_occupancy(seq, static_cast<int>(t), GridFrame::EgoAtTick);
            write_occ((tick_dir / "occ_egot.occ").string(), occ_t, c.grid_z, c.grid_y,
                      c.grid_x);
        }

        json tj;
        tj["index"] = t;
        tj["time_offset"] = seq.ticks[t].time_offset;
        tj["is_future"] = seq.ticks[t].is_future;
        ticks.push_back(tj);
    }
    scene_meta["ticks"] = ticks;
    open_out((scene_dir / "scene.json").string()) << scene_meta.dump(2) << "\n";

    // dataset-level manifest: config echo (seed zeroed, it's per-scene) + scene list
    SceneConfig echo = c;
    echo.seed = 0;
    fs::path manifest_path = fs::path(dir) / "dataset.json";
    json manifest;
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        try {
            in >> manifest;
        } catch (const json::exception &e) {
            throw ContractError("dataset.json is not valid json: " + std::string(e.what()));
        }
        if (manifest.at("config") != config_to_json(echo))
            throw ConfigError("write_scene_dataset: " + dir +
                              " already holds a dataset with a different config");
    } else {
        manifest["config"] = config_to_json(echo);
        manifest["scenes"] = json::array();
    }
    auto &scenes = manifest["scenes"];
    if (std::find(scenes.begin(), scenes.end(), json(scene_name)) == scenes.end())
        scenes.push_back(scene_name);
    open_out(manifest_path.string()) << manifest.dump(2) << "\n";
}

void init_dataset_dir(const std::string &dir, const SceneConfig &config) {
    SceneConfig echo = config;
    echo.seed = 0;
    fs::path manifest_path = fs::path(dir) / "dataset.json";
    if (fs::exists(manifest_path)) {
        json manifest;
        std::ifstream in(manifest_path);
        try {
            in >> manifest;
        } catch (const json::exception &e) {
            throw ContractError("dataset.json is not valid json: " + std::string(e.what()));
        }
        if (manifest.at("config") != config_to_json(echo))
            throw ConfigError("init_dataset_dir: " + dir +
                              " already holds a dataset with a different config");
        return;
    }
    fs::create_directories(dir);
    json manifest;
    manifest["config"] = config_to_json(echo);
    manifest["scenes"] = json::array();
    open_out(manifest_path.string()) << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string &dir) {
    fs::path manifest_path = fs::path(dir) / "dataset.json";
    if (!fs::exists(manifest_path))
        throw ConfigError("load_dataset: no dataset.json under " + dir);
    json manifest;
    try {
        std::ifstream in(manifest_path);
        in >> manifest;
    } catch (const json::exception &e) {
        throw ContractError("load_dataset: bad dataset.json: " + std::string(e.what()));
    }

    Dataset ds;
    try {
        ds.config = config_from_json(manifest.at("config"));
        ds.config.validate();

        for (const auto &name : manifest.at("scenes")) {
            fs::path scene_dir = fs::path(dir) / name.get<std::string>();
            json scene_meta;
            open_in((scene_dir / "scene.json").string()) >> scene_meta;

            SceneData scene;
            scene.seed = scene_meta.at("seed").get<uint64_t>();
            for (const auto &tj : scene_meta.at("ticks")) {
                int t = tj.at("index").get<int>();
                fs::path tick_dir = scene_dir / ("t" + std::to_string(t));

                SceneFrameData frame;
                frame.time_offset = tj.at("time_offset").get<double>();
                frame.is_future = tj.at("is_future").get<bool>();

                int mc = ds.config.num_cameras(), h = ds.config.image_h,
                    w = ds.config.image_w;
                frame.images = Tensor::zeros({mc, 3, h, w});
                frame.depths = Tensor::zeros({mc, h, w});
                size_t plane = static_cast<size_t>(h) * w;
                for (int m = 0; m < mc; ++m) {
                    Tensor img =
                        read_ppm((tick_dir / ("cam" + std::to_string(m) + ".ppm")).string());
                    if (img.dim(1) != h || img.dim(2) != w)
                        throw ContractError("load_dataset: image dims disagree with config");
                    std::copy(img.data().begin(), img.data().end(),
                              frame.images.mutable_data().begin() +
                                  static_cast<size_t>(m) * 3 * plane);
                    Tensor dep = read_depth_f32(
                        (tick_dir / ("depth" + std::to_string(m) + ".f32")).string(), h, w);
                    std::copy(dep.data().begin(), dep.data().end(),
                              frame.depths.mutable_data().begin() +
                                  static_cast<size_t>(m) * plane);
                }
                int gz, gy, gx;
                frame.occ = read_occ((tick_dir / "occ_egoT.occ").string(), gz, gy, gx);
                if (gz != ds.config.grid_z || gy != ds.config.grid_y ||
                    gx != ds.config.grid_x)
                    throw ContractError("load_dataset: occupancy dims disagree with config");
                scene.frames.push_back(std::move(frame));
            }
            ds.scenes.push_back(std::move(scene));
        }
    } catch (const json::exception &e) {
        throw ContractError("load_dataset: malformed manifest: " + std::string(e.what()));
    }
    return ds;
}


constexpr char kLogitsMagic[] = "FOLGT1\n";

void write_logits(const std::string &path, const Tensor &logits) {
    if (logits.ndim() != 4)
        throw ShapeError("write_logits: expected [C,Z,Y,X], got " + shape_str(logits.shape()));
    auto f = open_out(path);
    f.write(kLogitsMagic, 7);
    for (int axis = 0; axis < 4; ++axis) write_u32(f, static_cast<uint32_t>(logits.dim(axis)));
    const double *src = logits.data().data();
    std::vector<float> buf(logits.numel());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
    f.write(reinterpret_cast<const char *>(buf.data()), buf.size() * sizeof(float));
    if (!f) throw ContractError("write_logits: write failed: " + path);
}

Tensor read_logits(const std::string &path) {
    auto f = open_in(path);
    char magic[7];
    if (!f.read(magic, 7) || std::memcmp(magic, kLogitsMagic, 7) != 0)
        throw ContractError("read_logits: bad magic in " + path);
    Shape dims(4);
    for (int axis = 0; axis < 4; ++axis) {
        dims[axis] = read_u32(f, path);
        if (dims[axis] < 1 || dims[axis] > (1 << 16))
            throw ContractError("read_logits: absurd extent in " + path);
    }
    Tensor out = Tensor::zeros(dims);
    std::vector<float> buf(out.numel());
    if (!f.read(reinterpret_cast<char *>(buf.data()), buf.size() * sizeof(float)))
        throw ContractError("read_logits: truncated file: " + path);
    double *dst = out.mutable_data().data();
    for (size_t i = 0; i < buf.size(); ++i) dst[i] = buf[i];
    return out;
}

}  // namespace focc
