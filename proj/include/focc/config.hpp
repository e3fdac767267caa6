#pragma once

#include <cstdint>
#include <string>

#include "focc/encoder.hpp"
#include "focc/forecast.hpp"
#include "focc/occupancy.hpp"
#include "focc/scene.hpp"
#include "focc/view_transform.hpp"

namespace focc {

enum class Preset { Toy, PaperShape };
enum class ForecasterKind { ForecastOcc, Naive };

// Everything a run needs, parsed from a line-based `key = value` file with
// [section] headers. Unset keys keep the defaults below; see
// serialize_run_config for the canonical file layout.
struct RunConfig {
    // [run]
    Preset preset = Preset::Toy;
    ForecasterKind forecaster = ForecasterKind::ForecastOcc;
    uint64_t seed = 1;
    std::string out_dir = "out";
    std::string data_dir = "data";

    // [loss]
    bool use_task_loss = true;
    bool use_fsa_loss = true;
    bool fsa_huber = true;
    bool fsa_cosine = true;
    double alpha = 30.0;  // FSA weight in the total loss
    double delta = 2.0;   // Huber threshold

    // [model]
    QueryMode query_mode = QueryMode::CurrentFrame;
    bool use_scale_emb = true;
    bool use_cam_emb = true;
    bool use_time_emb = true;
    int layers = 3;  // interaction layers L
    int frames = 4;  // observed context length N

    // [train]
    int pretrain_epochs = 20;
    int epochs = 40;
    int batch = 0;  // 0 = preset default (2 toy, 4 paper-shape)
    double lr_forecast = 1e-3;
    double lr_rest = 1e-5;
    double pretrain_lr = 1e-3;

    int resolved_batch() const { return batch != 0 ? batch : (preset == Preset::Toy ? 2 : 4); }

    // Throws ConfigError when a field is out of its documented range.
    void validate() const;

    // Module configs assembled for the chosen preset.
    SceneConfig scene_config() const;
    EncoderConfig encoder_config() const;
    ForecastConfig forecast_config() const;
    ViewTransformConfig view_config() const;
    OccupancyConfig occupancy_config() const;
};

// Parses config text; unknown keys, malformed lines and unparsable values
// all throw ConfigError naming the offender.
RunConfig parse_run_config(const std::string &text);
RunConfig load_run_config(const std::string &path);

// Canonical echo of every field, parseable by parse_run_config.
std::string serialize_run_config(const RunConfig &config);

const char *to_string(Preset p);
const char *to_string(ForecasterKind f);
const char *to_string(QueryMode m);

}  // namespace focc
