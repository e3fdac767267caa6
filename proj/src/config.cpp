#include "focc/config.hpp"

#include <fstream>
#include <sstream>

#include "focc/common.hpp"

namespace focc {

namespace {

std::string trim(const std::string &s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string &key, const std::string &value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

double parse_double(const std::string &key, const std::string &value) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception &) {
        pos = 0;
    }
    if (pos != value.size())
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    return v;
}

int parse_int(const std::string &key, const std::string &value) {
    size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(value, &pos);
    } catch (const std::exception &) {
        pos = 0;
    }
    if (pos != value.size())
        throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
    return static_cast<int>(v);
}

uint64_t parse_u64(const std::string &key, const std::string &value) {
    size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception &) {
        pos = 0;
    }
    if (pos != value.size() || value.find('-') != std::string::npos)
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" +
                          value + "'");
    return v;
}

void apply_key(RunConfig &c, const std::string &key, const std::string &value) {
    if (key == "run.preset") {
        if (value == "toy")
            c.preset = Preset::Toy;
        else if (value == "paper-shape")
            c.preset = Preset::PaperShape;
        else
            throw ConfigError("config key 'run.preset': expected toy or paper-shape, got '" +
                              value + "'");
    } else if (key == "run.forecaster") {
        if (value == "forecastocc")
            c.forecaster = ForecasterKind::ForecastOcc;
        else if (value == "naive")
            c.forecaster = ForecasterKind::Naive;
        else
            throw ConfigError("config key 'run.forecaster': expected forecastocc or naive, got '" +
                              value + "'");
    } else if (key == "run.seed") {
        c.seed = parse_u64(key, value);
    } else if (key == "run.out") {
        c.out_dir = value;
    } else if (key == "run.data") {
        c.data_dir = value;
    } else if (key == "loss.task") {
        c.use_task_loss = parse_bool(key, value);
    } else if (key == "loss.fsa") {
        c.use_fsa_loss = parse_bool(key, value);
    } else if (key == "loss.huber") {
        c.fsa_huber = parse_bool(key, value);
    } else if (key == "loss.cosine") {
        c.fsa_cosine = parse_bool(key, value);
    } else if (key == "loss.alpha") {
        c.alpha = parse_double(key, value);
    } else if (key == "loss.delta") {
        c.delta = parse_double(key, value);
    } else if (key == "model.query_init") {
        if (value == "current-frame")
            c.query_mode = QueryMode::CurrentFrame;
        else if (value == "learned")
            c.query_mode = QueryMode::Learned;
        else
            throw ConfigError(
                "config key 'model.query_init': expected current-frame or learned, got '" + value +
                "'");
    } else if (key == "model.scale_embedding") {
        c.use_scale_emb = parse_bool(key, value);
    } else if (key == "model.camera_embedding") {
        c.use_cam_emb = parse_bool(key, value);
    } else if (key == "model.time_embedding") {
        c.use_time_emb = parse_bool(key, value);
    } else if (key == "model.layers") {
        c.layers = parse_int(key, value);
    } else if (key == "model.frames") {
        c.frames = parse_int(key, value);
    } else if (key == "train.pretrain_epochs") {
        c.pretrain_epochs = parse_int(key, value);
    } else if (key == "train.epochs") {
        c.epochs = parse_int(key, value);
    } else if (key == "train.batch") {
        c.batch = parse_int(key, value);
    } else if (key == "train.lr_forecast") {
        c.lr_forecast = parse_double(key, value);
    } else if (key == "train.lr_rest") {
        c.lr_rest = parse_double(key, value);
    } else if (key == "train.pretrain_lr") {
        c.pretrain_lr = parse_double(key, value);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

}  // namespace

RunConfig parse_run_config(const std::string &text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": unterminated section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(line_no) + ": empty section");
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value', got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                              "' outside any [section]");
        apply_key(config, section + "." + key, value);
    }
    return config;
}

RunConfig load_run_config(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

void RunConfig::validate() const {
    if (alpha < 0) throw ConfigError("loss.alpha must be >= 0, got " + std::to_string(alpha));
    if (delta <= 0) throw ConfigError("loss.delta must be > 0, got " + std::to_string(delta));
    if (layers < 1) throw ConfigError("model.layers must be >= 1, got " + std::to_string(layers));
    // temporal fusion pairs the current frame with its predecessor, so a
    // single observed frame is never enough
    if (frames < 2) throw ConfigError("model.frames must be >= 2, got " + std::to_string(frames));
    if (resolved_batch() < 1)
        throw ConfigError("train.batch must be >= 1, got " + std::to_string(batch));
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1, got " + std::to_string(epochs));
    if (pretrain_epochs < 1)
        throw ConfigError("train.pretrain_epochs must be >= 1, got " +
                          std::to_string(pretrain_epochs));
    if (lr_forecast <= 0 || lr_rest <= 0 || pretrain_lr <= 0)
        throw ConfigError("learning rates must be > 0");
    if (!use_task_loss && !use_fsa_loss)
        throw ConfigError("at least one of loss.task and loss.fsa must be enabled");
    if (use_fsa_loss && !fsa_huber && !fsa_cosine)
        throw ConfigError("loss.fsa needs at least one of loss.huber and loss.cosine");
}

const char *to_string(Preset p) { return p == Preset::Toy ? "toy" : "paper-shape"; }

const char *to_string(ForecasterKind f) {
    return f == ForecasterKind::ForecastOcc ? "forecastocc" : "naive";
}

const char *to_string(QueryMode m) {
    return m == QueryMode::CurrentFrame ? "current-frame" : "learned";
}

std::string serialize_run_config(const RunConfig &c) {
    std::ostringstream out;
    out << "[run]\n";
    out << "preset = " << to_string(c.preset) << "\n";
    out << "forecaster = " << to_string(c.forecaster) << "\n";
    out << "seed = " << c.seed << "\n";
    out << "out = " << c.out_dir << "\n";
    out << "data = " << c.data_dir << "\n";
    out << "\n[loss]\n";
    out << "task = " << (c.use_task_loss ? "true" : "false") << "\n";
    out << "fsa = " << (c.use_fsa_loss ? "true" : "false") << "\n";
    out << "huber = " << (c.fsa_huber ? "true" : "false") << "\n";
    out << "cosine = " << (c.fsa_cosine ? "true" : "false") << "\n";
    out << "alpha = " << c.alpha << "\n";
    out << "delta = " << c.delta << "\n";
    out << "\n[model]\n";
    out << "query_init = " << to_string(c.query_mode) << "\n";
    out << "scale_embedding = " << (c.use_scale_emb ? "true" : "false") << "\n";
    out << "camera_embedding = " << (c.use_cam_emb ? "true" : "false") << "\n";
    out << "time_embedding = " << (c.use_time_emb ? "true" : "false") << "\n";
    out << "layers = " << c.layers << "\n";
    out << "frames = " << c.frames << "\n";
    out << "\n[train]\n";
    out << "pretrain_epochs = " << c.pretrain_epochs << "\n";
    out << "epochs = " << c.epochs << "\n";
    out << "batch = " << c.batch << "\n";
    out << "lr_forecast = " << c.lr_forecast << "\n";
    out << "lr_rest = " << c.lr_rest << "\n";
    out << "pretrain_lr = " << c.pretrain_lr << "\n";
    return out.str();
}

SceneConfig RunConfig::scene_config() const {
    SceneConfig sc = preset == Preset::Toy ? toy_scene_config() : paper_shape_scene_config();
    sc.seed = seed;
    sc.n_context = frames;
    return sc;
}

EncoderConfig RunConfig::encoder_config() const {
    return preset == Preset::Toy ? toy_encoder_config() : full_scale_encoder_config();
}

ForecastConfig RunConfig::forecast_config() const {
    SceneConfig sc = scene_config();
    EncoderConfig ec = encoder_config();
    ForecastConfig fc;
    fc.channels = ec.fused_channels();
    if (preset == Preset::PaperShape) {
        fc.heads = 16;
        fc.ffn_hidden = 1024;
    }
    fc.layers = layers;
    fc.n_frames = frames;
    fc.num_horizons = static_cast<int>(sc.horizons.size());
    fc.num_cameras = sc.num_cameras();
    fc.spatial_h = sc.image_h / 16;
    fc.spatial_w = sc.image_w / 16;
    fc.scale_slice_widths = ec.neck_widths;
    fc.use_scale_emb = use_scale_emb;
    fc.use_cam_emb = use_cam_emb;
    fc.use_time_emb = use_time_emb;
    fc.query_mode = query_mode;
    return fc;
}

ViewTransformConfig RunConfig::view_config() const {
    ViewTransformConfig vc;
    if (preset == Preset::PaperShape) {
        vc.in_channels = 256;
        vc.ctx_channels = 64;
        vc.depth_bins = 88;
    }
    return vc;
}

OccupancyConfig RunConfig::occupancy_config() const {
    return preset == Preset::Toy ? toy_occupancy_config() : full_scale_occupancy_config();
}

}  // namespace focc
