#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "focc/baseline.hpp"
#include "focc/config.hpp"
#include "focc/encoder.hpp"
#include "focc/forecast.hpp"
#include "focc/metrics.hpp"
#include "focc/occupancy.hpp"
#include "focc/scene.hpp"
#include "focc/view_transform.hpp"

namespace focc {

// One optimizer-step record; serialized as one CSV row.
struct TrainStep {
    int64_t step = 0;
    int epoch = 0;
    double total = 0, task = 0, fsa_huber = 0, fsa_cosine = 0, depth = 0;
    double lr_forecast = 0, lr_rest = 0;
    double wall_s = 0;  // excluded from determinism comparisons
};

struct TrainLog {
    std::vector<TrainStep> steps;
    std::vector<std::string> events;  // schedule changes, epoch summaries

    void append(const TrainStep &s);  // step index must strictly increase
    // header, one row per step (losses and rates as %.17g, wall clock last),
    // then events as trailing '#' comment lines
    std::string to_csv() const;
    void write(const std::string &path) const;
};

// The full network for one run config: multi-camera image encoder, feature
// forecaster, lift-splat view transformer, 3D occupancy encoder and semantic
// head. All parameters live in one registry under the prefixes "encoder.",
// "forecast.", "view.", "occ." and "head.".
class Pipeline {
  public:
    explicit Pipeline(const RunConfig &config);

    ParamRegistry &params() { return reg_; }
    const RunConfig &run_config() const { return cfg_; }
    const SceneConfig &scene_config() const { return scene_; }
    ImageEncoder &encoder() { return encoder_; }
    Forecaster &forecaster() { return *forecaster_; }
    NaiveForecaster *naive_forecaster() { return naive_.get(); }
    CrossAttentionForecaster *attention_forecaster() { return attn_.get(); }
    ViewTransformer &view() { return view_; }
    const std::vector<double> &bin_edges() const { return bin_edges_; }
    const std::vector<double> &bin_centers() const { return bin_centers_; }

    // feature map [M,C,h,w] -> voxel volume [C_ctx,Z,Y,X]; optionally exposes
    // the softmaxed depth distribution for supervision
    Tensor feature_volume(const Tensor &fmap, bool training, Tensor *depth_out = nullptr);
    // frame volume + its temporal reference -> per-voxel class logits
    Tensor logits_from_volumes(const Tensor &vol, const Tensor &ref, bool training);

    // phase 1: current-frame task loss plus depth supervision for one scene
    struct PretrainLosses {
        Tensor total;
        double task = 0, depth = 0;
    };
    PretrainLosses pretrain_losses(const SceneData &scene, bool training);

    // frozen-encoder features of every tick of a scene (context + futures);
    // requires the encoder to have been marked pretrained
    std::vector<Tensor> frozen_features(const SceneData &scene);

    // phase 2: forecast losses for one scene. context/observed are the frozen
    // per-tick features split at the current frame; the task branch and the
    // alignment terms follow the run config's loss toggles.
    struct ForecastLosses {
        Tensor total;
        double task = 0, fsa_huber = 0, fsa_cosine = 0;
    };
    ForecastLosses forecast_losses(const std::vector<Tensor> &context,
                                   const std::vector<Tensor> &observed_futures,
                                   const SceneData &scene, bool training);

    // inference over one scene: per-horizon logits / argmax grids, and the
    // current-frame logits for phase-1 evaluation
    std::vector<Tensor> predict_logits(const SceneData &scene);
    std::vector<std::vector<uint8_t>> predict_grids(const SceneData &scene);
    Tensor predict_current_logits(const SceneData &scene);

    void set_forecaster_training(bool training);

  private:
    RunConfig cfg_;
    SceneConfig scene_;
    ParamRegistry reg_;
    ImageEncoder encoder_;
    std::unique_ptr<CrossAttentionForecaster> attn_;
    std::unique_ptr<NaiveForecaster> naive_;
    Forecaster *forecaster_ = nullptr;
    ViewTransformer view_;
    OccupancyEncoder occ_;
    SemanticHead head_;
    std::vector<double> bin_edges_, bin_centers_;
};

// ---- command-level operations ---------------------------------------------

// Every checkpoint is stamped with "meta.preset" / "meta.forecaster" buffers.
// Inspects them (without loading) and throws ConfigError when the file was
// produced under a different preset or forecaster than `config` asks for.
void verify_checkpoint_compatibility(const std::string &checkpoint, const RunConfig &config);

// Generates `count` scenes with seeds config.seed, config.seed+1, ... into
// config.data_dir (manifest included; count 0 writes just the manifest).
void run_gen_data(const RunConfig &config, int count);

struct TrainResult {
    TrainLog log;
    std::string checkpoint;
};

// Phase 1: trains encoder + view transformer + occupancy encoder + head on
// current-frame occupancy and depth. Writes <out>/pretrain.ckpt (forecaster
// excluded), <out>/pretrain_log.csv, <out>/config.cfg, <out>/model_summary.txt.
// Throws NumericError with a step diagnostic if the loss goes non-finite.
TrainResult run_pretrain(const RunConfig &config);

// Phase 2: loads the pretrain checkpoint, freezes the encoder, and trains the
// forecaster (lr_forecast) against the remaining trainable layers (lr_rest),
// dropping the forecaster group's rate by 10x at the epoch midpoint. Writes
// <out>/model.ckpt and <out>/train_log.csv.
TrainResult run_train_forecast(const RunConfig &config, const std::string &pretrained);

// Inference over every scene in config.data_dir: writes <out>/report.csv,
// <out>/report.txt and per-scene predicted grids, and returns the report.
HorizonReport run_eval(const RunConfig &config, const std::string &checkpoint);

// Detailed artifacts for one scene: per-horizon class grids, raw logits and
// a per-class voxel-count summary.
void run_export(const RunConfig &config, const std::string &checkpoint, size_t scene_index);

// One forward pass at the configured preset, recording the shape of every
// published stage output. Names: fused_2d, depth_dist, context, queries,
// voxel_features, logits.
std::vector<std::pair<std::string, Shape>> run_shape_check(const RunConfig &config);

// Finite-difference check of the full phase-2 loss (task + weighted
// alignment) through forecaster, lift, pool, occupancy encoder and head at
// micro scale, differentiated w.r.t. the current frame's features. Returns
// the worst relative error.
double end_to_end_gradient_error(uint64_t seed);

}  // namespace focc
