#include "focc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>

#include "focc/checkpoint.hpp"
#include "focc/fsa.hpp"
#include "focc/gradcheck.hpp"
#include "focc/optim.hpp"

namespace fs = std::filesystem;

namespace focc {

namespace {

// %.17g survives a parse round-trip, so equal doubles give equal log text
std::string g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double mono_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void write_text(const std::string &path, const std::string &content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open for writing: " + path);
    out << content;
    if (!out) throw ContractError("write failed: " + path);
}

}  // namespace

void TrainLog::append(const TrainStep &s) {
    if (!steps.empty() && s.step <= steps.back().step)
        throw ContractError("TrainLog: step indices must strictly increase");
    steps.push_back(s);
}

std::string TrainLog::to_csv() const {
    std::ostringstream out;
    out << "step,epoch,total,task,fsa_huber,fsa_cosine,depth,lr_forecast,lr_rest,wall_s\n";
    for (const TrainStep &s : steps) {
        out << s.step << ',' << s.epoch << ',' << g17(s.total) << ',' << g17(s.task) << ','
            << g17(s.fsa_huber) << ',' << g17(s.fsa_cosine) << ',' << g17(s.depth) << ','
            << g17(s.lr_forecast) << ',' << g17(s.lr_rest) << ',' << g17(s.wall_s) << '\n';
    }
    for (const std::string &e : events) out << "# " << e << '\n';
    return out.str();
}

void TrainLog::write(const std::string &path) const { write_text(path, to_csv()); }

Pipeline::Pipeline(const RunConfig &config) : cfg_(config) {
    cfg_.validate();
    scene_ = cfg_.scene_config();
    Rng rng(cfg_.seed);
    encoder_ = ImageEncoder(reg_, "encoder.", cfg_.encoder_config(), rng);
    ForecastConfig fc = cfg_.forecast_config();
    if (cfg_.forecaster == ForecasterKind::ForecastOcc) {
        attn_ = std::make_unique<CrossAttentionForecaster>(reg_, "forecast.", fc, rng);
        forecaster_ = attn_.get();
    } else {
        naive_ = std::make_unique<NaiveForecaster>(reg_, "forecast.", fc, rng);
        forecaster_ = naive_.get();
    }
    view_ = ViewTransformer(reg_, "view.", cfg_.view_config(), rng);
    occ_ = OccupancyEncoder(reg_, "occ.", cfg_.occupancy_config(), rng);
    head_ = SemanticHead(reg_, "head.", cfg_.occupancy_config(), rng);

    // stamped into every checkpoint so a load under the wrong preset or
    // forecaster fails with a config message instead of a shape mismatch
    reg_.add("meta.preset",
             Tensor::full({1}, static_cast<double>(static_cast<int>(cfg_.preset))), false, true);
    reg_.add("meta.forecaster",
             Tensor::full({1}, static_cast<double>(static_cast<int>(cfg_.forecaster))), false,
             true);

    bin_edges_ = make_depth_bin_edges(scene_, cfg_.view_config().depth_bins);
    bin_centers_.resize(bin_edges_.size() - 1);
    for (size_t i = 0; i < bin_centers_.size(); ++i)
        bin_centers_[i] = 0.5 * (bin_edges_[i] + bin_edges_[i + 1]);
}

Tensor Pipeline::feature_volume(const Tensor &fmap, bool training, Tensor *depth_out) {
    return view_.transform(fmap, scene_, bin_centers_, training, depth_out);
}

Tensor Pipeline::logits_from_volumes(const Tensor &vol, const Tensor &ref, bool training) {
    return head_.forward(occ_.encode(vol, ref, training), training);
}

Pipeline::PretrainLosses Pipeline::pretrain_losses(const SceneData &scene, bool training) {
    int n_ctx = scene_.n_context;
    if (static_cast<int>(scene.frames.size()) < n_ctx)
        throw ContractError("pretrain_losses: scene " + std::to_string(scene.seed) + " has " +
                            std::to_string(scene.frames.size()) + " frames, context needs " +
                            std::to_string(n_ctx));
    std::optional<NoGradGuard> guard;
    if (!training) guard.emplace();

    const SceneFrameData &cur = scene.frames[n_ctx - 1];
    const SceneFrameData &prev = scene.frames[n_ctx - 2];
    Tensor f_cur = encoder_.encode(cur.images, training);
    Tensor f_prev = encoder_.encode(prev.images, training);
    Tensor depth_pred;
    Tensor vol_cur = feature_volume(f_cur, training, &depth_pred);
    Tensor vol_prev = feature_volume(f_prev, training);
    Tensor logits = logits_from_volumes(vol_cur, vol_prev, training);

    Tensor task = task_loss({logits}, {cur.occ});
    Tensor target = depth_to_bins(cur.depths, bin_edges_);
    Tensor depth = depth_loss(depth_pred, target, depth_target_mask(target));

    PretrainLosses out;
    out.total = task + depth;
    out.task = task.item();
    out.depth = depth.item();
    return out;
}

std::vector<Tensor> Pipeline::frozen_features(const SceneData &scene) {
    std::vector<Tensor> feats;
    feats.reserve(scene.frames.size());
    for (const SceneFrameData &frame : scene.frames)
        feats.push_back(encoder_.encode_frozen(frame.images));
    return feats;
}

Pipeline::ForecastLosses Pipeline::forecast_losses(const std::vector<Tensor> &context,
                                                   const std::vector<Tensor> &observed_futures,
                                                   const SceneData &scene, bool training) {
    int n_ctx = scene_.n_context;
    int n_h = static_cast<int>(scene_.horizons.size());
    if (static_cast<int>(context.size()) != n_ctx)
        throw ContractError("forecast_losses: got " + std::to_string(context.size()) +
                            " context maps, config says " + std::to_string(n_ctx));
    if (static_cast<int>(observed_futures.size()) != n_h)
        throw ContractError("forecast_losses: got " + std::to_string(observed_futures.size()) +
                            " observed future maps, config says " + std::to_string(n_h));
    if (static_cast<int>(scene.frames.size()) != n_ctx + n_h)
        throw ContractError("forecast_losses: scene " + std::to_string(scene.seed) +
                            " has the wrong tick count");

    std::optional<NoGradGuard> guard;
    if (!training) guard.emplace();
    set_forecaster_training(training);
    std::vector<Tensor> preds = forecaster_->forecast(context);

    ForecastLosses out;
    Tensor fsa;
    if (cfg_.use_fsa_loss) {
        if (cfg_.fsa_huber) {
            Tensor h = huber_alignment(preds, observed_futures, cfg_.delta);
            out.fsa_huber = h.item();
            fsa = h;
        }
        if (cfg_.fsa_cosine) {
            Tensor c = cosine_alignment(preds, observed_futures);
            out.fsa_cosine = c.item();
            fsa = fsa.defined() ? fsa + c : c;
        }
    }
    Tensor task;
    if (cfg_.use_task_loss) {
        Tensor vol_cur = feature_volume(context.back(), training);
        Tensor vol_prev = feature_volume(context[n_ctx - 2], training);
        std::vector<Tensor> logits;
        std::vector<std::vector<uint8_t>> targets;
        logits.push_back(logits_from_volumes(vol_cur, vol_prev, training));
        targets.push_back(scene.frames[n_ctx - 1].occ);
        for (int k = 0; k < n_h; ++k) {
            Tensor vol_k = feature_volume(preds[k], training);
            logits.push_back(logits_from_volumes(vol_k, vol_cur, training));
            targets.push_back(scene.frames[n_ctx + k].occ);
        }
        task = task_loss(logits, targets);
        out.task = task.item();
    }
    if (task.defined() && fsa.defined())
        out.total = task + fsa * cfg_.alpha;
    else if (task.defined())
        out.total = task;
    else
        out.total = fsa * cfg_.alpha;  // validate() guarantees one term is on
    return out;
}

std::vector<Tensor> Pipeline::predict_logits(const SceneData &scene) {
    NoGradGuard guard;
    int n_ctx = scene_.n_context;
    if (static_cast<int>(scene.frames.size()) < n_ctx)
        throw ContractError("predict_logits: scene " + std::to_string(scene.seed) +
                            " has fewer frames than the configured context");
    set_forecaster_training(false);
    std::vector<Tensor> context;
    context.reserve(n_ctx);
    for (int t = 0; t < n_ctx; ++t)
        context.push_back(encoder_.encode(scene.frames[t].images, false));
    std::vector<Tensor> preds = forecaster_->forecast(context);
    Tensor vol_cur = feature_volume(context.back(), false);
    std::vector<Tensor> logits;
    logits.reserve(preds.size());
    for (const Tensor &pred : preds)
        logits.push_back(logits_from_volumes(feature_volume(pred, false), vol_cur, false));
    return logits;
}

std::vector<std::vector<uint8_t>> Pipeline::predict_grids(const SceneData &scene) {
    std::vector<std::vector<uint8_t>> grids;
    for (const Tensor &logits : predict_logits(scene)) grids.push_back(argmax_grid(logits));
    return grids;
}

Tensor Pipeline::predict_current_logits(const SceneData &scene) {
    NoGradGuard guard;
    int n_ctx = scene_.n_context;
    if (static_cast<int>(scene.frames.size()) < n_ctx)
        throw ContractError("predict_current_logits: scene " + std::to_string(scene.seed) +
                            " has fewer frames than the configured context");
    Tensor f_cur = encoder_.encode(scene.frames[n_ctx - 1].images, false);
    Tensor f_prev = encoder_.encode(scene.frames[n_ctx - 2].images, false);
    return logits_from_volumes(feature_volume(f_cur, false), feature_volume(f_prev, false),
                               false);
}

void Pipeline::set_forecaster_training(bool training) {
    if (naive_) naive_->set_training(training);
}

// ---- command-level operations ---------------------------------------------

namespace {

std::string preset_name(int idx) {
    if (idx == static_cast<int>(Preset::Toy)) return to_string(Preset::Toy);
    if (idx == static_cast<int>(Preset::PaperShape)) return to_string(Preset::PaperShape);
    return "unknown(" + std::to_string(idx) + ")";
}

std::string forecaster_name(int idx) {
    if (idx == static_cast<int>(ForecasterKind::ForecastOcc))
        return to_string(ForecasterKind::ForecastOcc);
    if (idx == static_cast<int>(ForecasterKind::Naive)) return to_string(ForecasterKind::Naive);
    return "unknown(" + std::to_string(idx) + ")";
}

// grid/camera/timing fields that decide tensor shapes must agree between a
// stored dataset and the run's scene layout; seed is per-scene and free
void require_dataset_config(const SceneConfig &got, const SceneConfig &want,
                            const std::string &dir) {
    bool ok = got.grid_x == want.grid_x && got.grid_y == want.grid_y &&
              got.grid_z == want.grid_z && got.voxel_size == want.voxel_size &&
              got.grid_z0 == want.grid_z0 && got.num_classes == want.num_classes &&
              got.image_h == want.image_h && got.image_w == want.image_w &&
              got.num_cameras() == want.num_cameras() && got.n_context == want.n_context &&
              got.horizons == want.horizons && got.frame_interval == want.frame_interval;
    if (!ok)
        throw ConfigError("dataset under " + dir +
                          " does not match the run config's scene layout "
                          "(check run.preset and model.frames)");
}

Dataset load_run_dataset(const RunConfig &config) {
    Dataset ds = load_dataset(config.data_dir);
    require_dataset_config(ds.config, config.scene_config(), config.data_dir);
    if (ds.scenes.empty())
        throw ConfigError("no scenes under " + config.data_dir + "; run gen-data first");
    return ds;
}

std::vector<size_t> shuffled_indices(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng r(seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(epoch) + 1);
    for (size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(r.uniform_int(0, static_cast<int>(i) - 1))]);
    return idx;
}

ParamGroup group_for_prefixes(const ParamRegistry &reg,
                              std::initializer_list<const char *> prefixes, double lr,
                              double weight_decay) {
    ParamGroup g;
    g.lr = lr;
    g.weight_decay = weight_decay;
    for (const char *p : prefixes) {
        for (const ParamEntry &e : reg.trainable_with_prefix(p)) {
            g.params.push_back(e.tensor);
            g.names.push_back(e.name);
        }
    }
    return g;
}

void write_model_summary(const std::string &path, const ParamRegistry &reg) {
    std::ostringstream out;
    for (const char *p : {"encoder.", "forecast.", "view.", "occ.", "head."})
        out << p << " " << reg.count_values(p) << " values (" << reg.count_values(p, true)
            << " trainable)\n";
    out << "total " << reg.count_values() << " values (" << reg.count_values("", true)
        << " trainable)\n";
    write_text(path, out.str());
}

}  // namespace

void verify_checkpoint_compatibility(const std::string &checkpoint, const RunConfig &config) {
    const Tensor *preset = nullptr, *forecaster = nullptr;
    auto entries = read_checkpoint_entries(checkpoint);
    for (const auto &[name, t] : entries) {
        if (name == "meta.preset") preset = &t;
        if (name == "meta.forecaster") forecaster = &t;
    }
    if (!preset)
        throw ConfigError("checkpoint " + checkpoint +
                          " carries no meta.preset stamp; not a pipeline checkpoint");
    int got = static_cast<int>(std::llround(preset->data()[0]));
    if (got != static_cast<int>(config.preset))
        throw ConfigError("checkpoint " + checkpoint + " was written at preset '" +
                          preset_name(got) + "' but the run config asks for '" +
                          to_string(config.preset) + "'");
    // trunk-only (pretrain) checkpoints carry no forecaster stamp on purpose:
    // one pretrain serves every forecaster variant
    if (forecaster) {
        int got_f = static_cast<int>(std::llround(forecaster->data()[0]));
        if (got_f != static_cast<int>(config.forecaster))
            throw ConfigError("checkpoint " + checkpoint + " was written with forecaster '" +
                              forecaster_name(got_f) + "' but the run config asks for '" +
                              to_string(config.forecaster) + "'");
    }
}

void run_gen_data(const RunConfig &config, int count) {
    config.validate();
    if (count < 0) throw ConfigError("gen-data: scene count must be >= 0");
    SceneConfig base = config.scene_config();
    init_dataset_dir(config.data_dir, base);
    for (int i = 0; i < count; ++i) {
        SceneConfig sc = base;
        sc.seed = config.seed + static_cast<uint64_t>(i);
        write_scene_dataset(config.data_dir, generate_scene(sc));
    }
}

TrainResult run_pretrain(const RunConfig &config) {
    config.validate();
    Dataset ds = load_run_dataset(config);
    Pipeline pipe(config);
    fs::create_directories(config.out_dir);

    AdamW opt({group_for_prefixes(pipe.params(), {"encoder.", "view.", "occ.", "head."},
                                  config.pretrain_lr, 0.01)});

    TrainLog log;
    int64_t step = 0;
    int batch = config.resolved_batch();
    double t0 = mono_seconds();
    for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
        std::vector<size_t> order = shuffled_indices(ds.scenes.size(), config.seed, epoch);
        double epoch_total = 0;
        int epoch_batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += batch) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(batch));
            int actual = static_cast<int>(b1 - b0);
            opt.zero_grad();
            TrainStep s;
            for (size_t i = b0; i < b1; ++i) {
                const SceneData &scene = ds.scenes[order[i]];
                Pipeline::PretrainLosses losses = pipe.pretrain_losses(scene, true);
                double v = losses.total.item();
                if (!std::isfinite(v))
                    throw NumericError("pretrain: non-finite loss at step " +
                                       std::to_string(step + 1) + " (epoch " +
                                       std::to_string(epoch) + ", scene " +
                                       std::to_string(scene.seed) + ")");
                (losses.total * (1.0 / actual)).backward();
                s.total += v / actual;
                s.task += losses.task / actual;
                s.depth += losses.depth / actual;
            }
            opt.step();
            s.step = ++step;
            s.epoch = epoch;
            s.lr_rest = opt.lr(0);
            s.wall_s = mono_seconds() - t0;
            log.append(s);
            epoch_total += s.total;
            ++epoch_batches;
        }
        log.events.push_back("epoch " + std::to_string(epoch) + " mean total " +
                             g17(epoch_total / epoch_batches));
    }

    // the forecaster never trained here; save only the shared trunk (plus the
    // preset stamp) so one pretrain serves every forecaster variant
    ParamRegistry trunk;
    for (const ParamEntry &e : pipe.params().entries()) {
        if (e.name.rfind("forecast.", 0) == 0 || e.name == "meta.forecaster") continue;
        trunk.add(e.name, e.tensor, e.trainable, e.buffer);
    }
    std::string ckpt = (fs::path(config.out_dir) / "pretrain.ckpt").string();
    save_checkpoint(ckpt, trunk);
    log.write((fs::path(config.out_dir) / "pretrain_log.csv").string());
    write_text((fs::path(config.out_dir) / "config.cfg").string(), serialize_run_config(config));
    write_model_summary((fs::path(config.out_dir) / "model_summary.txt").string(), pipe.params());
    return {std::move(log), ckpt};
}

TrainResult run_train_forecast(const RunConfig &config, const std::string &pretrained) {
    config.validate();
    Dataset ds = load_run_dataset(config);
    Pipeline pipe(config);
    verify_checkpoint_compatibility(pretrained, config);
    load_checkpoint(pretrained, pipe.params(), /*allow_missing_params=*/true);
    pipe.encoder().mark_pretrained();

    ParamRegistry &reg = pipe.params();
    reg.set_trainable("encoder.", false);
    if (!config.use_task_loss) {
        // alignment-only training never touches the grid branch
        reg.set_trainable("view.", false);
        reg.set_trainable("occ.", false);
        reg.set_trainable("head.", false);
    }
    uint64_t frozen_sum = reg.checksum("encoder.");

    std::vector<ParamGroup> groups;
    groups.push_back(group_for_prefixes(reg, {"forecast."}, config.lr_forecast, 0.0));
    ParamGroup rest = group_for_prefixes(reg, {"view.", "occ.", "head."}, config.lr_rest, 0.0);
    bool has_rest = !rest.params.empty();
    if (has_rest) groups.push_back(std::move(rest));
    AdamW opt(std::move(groups));

    // frozen encoder => per-scene features never change; encode each scene once
    int n_ctx = pipe.scene_config().n_context;
    std::vector<std::vector<Tensor>> context(ds.scenes.size()), futures(ds.scenes.size());
    for (size_t i = 0; i < ds.scenes.size(); ++i) {
        std::vector<Tensor> feats = pipe.frozen_features(ds.scenes[i]);
        context[i].assign(feats.begin(), feats.begin() + n_ctx);
        futures[i].assign(feats.begin() + n_ctx, feats.end());
    }

    TrainLog log;
    int64_t step = 0;
    int batch = config.resolved_batch();
    double t0 = mono_seconds();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.epochs >= 2 && epoch == config.epochs / 2) {
            opt.set_lr(0, config.lr_forecast / 10.0);
            log.events.push_back("epoch " + std::to_string(epoch) + " forecast lr -> " +
                                 g17(opt.lr(0)));
        }
        std::vector<size_t> order = shuffled_indices(ds.scenes.size(), config.seed, epoch);
        double epoch_total = 0;
        int epoch_batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += batch) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(batch));
            int actual = static_cast<int>(b1 - b0);
            opt.zero_grad();
            TrainStep s;
            for (size_t i = b0; i < b1; ++i) {
                size_t si = order[i];
                Pipeline::ForecastLosses losses =
                    pipe.forecast_losses(context[si], futures[si], ds.scenes[si], true);
                double v = losses.total.item();
                if (!std::isfinite(v))
                    throw NumericError("train-forecast: non-finite loss at step " +
                                       std::to_string(step + 1) + " (epoch " +
                                       std::to_string(epoch) + ", scene " +
                                       std::to_string(ds.scenes[si].seed) + ")");
                (losses.total * (1.0 / actual)).backward();
                s.total += v / actual;
                s.task += losses.task / actual;
                s.fsa_huber += losses.fsa_huber / actual;
                s.fsa_cosine += losses.fsa_cosine / actual;
            }
            opt.step();
            s.step = ++step;
            s.epoch = epoch;
            s.lr_forecast = opt.lr(0);
            s.lr_rest = has_rest ? opt.lr(1) : 0.0;
            s.wall_s = mono_seconds() - t0;
            log.append(s);
            epoch_total += s.total;
            ++epoch_batches;
        }
        log.events.push_back("epoch " + std::to_string(epoch) + " mean total " +
                             g17(epoch_total / epoch_batches));
    }
    if (reg.checksum("encoder.") != frozen_sum)
        throw ContractError("train-forecast: frozen encoder weights changed during training");

    fs::create_directories(config.out_dir);
    std::string ckpt = (fs::path(config.out_dir) / "model.ckpt").string();
    save_checkpoint(ckpt, reg);
    log.write((fs::path(config.out_dir) / "train_log.csv").string());
    return {std::move(log), ckpt};
}

HorizonReport run_eval(const RunConfig &config, const std::string &checkpoint) {
    config.validate();
    Dataset ds = load_run_dataset(config);
    Pipeline pipe(config);
    verify_checkpoint_compatibility(checkpoint, config);
    load_checkpoint(checkpoint, pipe.params());
    pipe.encoder().mark_pretrained();

    const SceneConfig &sc = pipe.scene_config();
    std::vector<int> horizons_s;
    for (double h : sc.horizons) horizons_s.push_back(static_cast<int>(std::llround(h)));

    fs::create_directories(config.out_dir);
    std::vector<SceneForecast> results;
    for (const SceneData &scene : ds.scenes) {
        SceneForecast r;
        r.scene = "scene_" + std::to_string(scene.seed);
        r.horizons_s = horizons_s;
        r.preds = pipe.predict_grids(scene);
        for (size_t k = 0; k < horizons_s.size(); ++k) {
            r.gts.push_back(scene.frames[sc.n_context + k].occ);
            write_occ((fs::path(config.out_dir) /
                       ("pred_" + r.scene + "_h" + std::to_string(horizons_s[k]) + "s.occ"))
                          .string(),
                      r.preds[k], sc.grid_z, sc.grid_y, sc.grid_x);
        }
        results.push_back(std::move(r));
    }
    HorizonReport report = horizon_report(results, sc.num_classes);
    write_text((fs::path(config.out_dir) / "report.csv").string(), report.to_csv());
    write_text((fs::path(config.out_dir) / "report.txt").string(), report.to_table());
    return report;
}

void run_export(const RunConfig &config, const std::string &checkpoint, size_t scene_index) {
    config.validate();
    Dataset ds = load_run_dataset(config);
    if (scene_index >= ds.scenes.size())
        throw ConfigError("export: scene index " + std::to_string(scene_index) +
                          " out of range, dataset has " + std::to_string(ds.scenes.size()) +
                          " scenes");
    Pipeline pipe(config);
    verify_checkpoint_compatibility(checkpoint, config);
    load_checkpoint(checkpoint, pipe.params());
    pipe.encoder().mark_pretrained();

    const SceneData &scene = ds.scenes[scene_index];
    const SceneConfig &sc = pipe.scene_config();
    std::vector<Tensor> logits = pipe.predict_logits(scene);

    fs::create_directories(config.out_dir);
    std::string base = "export_scene_" + std::to_string(scene.seed);
    std::ostringstream summary;
    summary << "scene_" << scene.seed << ": predicted / labelled voxels per class\n";
    for (size_t k = 0; k < logits.size(); ++k) {
        std::string hs = std::to_string(static_cast<int>(std::llround(sc.horizons[k])));
        write_logits((fs::path(config.out_dir) / (base + "_h" + hs + "s.logits")).string(),
                     logits[k]);
        std::vector<uint8_t> grid = argmax_grid(logits[k]);
        write_occ((fs::path(config.out_dir) / (base + "_h" + hs + "s.occ")).string(), grid,
                  sc.grid_z, sc.grid_y, sc.grid_x);

        const std::vector<uint8_t> &gt = scene.frames[sc.n_context + k].occ;
        std::vector<int64_t> pred_n(sc.num_classes, 0), gt_n(sc.num_classes, 0);
        for (uint8_t v : grid) ++pred_n[v];
        for (uint8_t v : gt) ++gt_n[v];
        summary << "horizon " << hs << "s\n";
        for (int c = 0; c < sc.num_classes; ++c)
            summary << "  class " << c << ": pred " << pred_n[c] << ", label " << gt_n[c] << "\n";
    }
    write_text((fs::path(config.out_dir) / (base + "_summary.txt")).string(), summary.str());
}

std::vector<std::pair<std::string, Shape>> run_shape_check(const RunConfig &config) {
    config.validate();
    if (config.forecaster != ForecasterKind::ForecastOcc)
        throw ConfigError("shape-check traces the attention pipeline; "
                          "set run.forecaster = forecastocc");
    Pipeline pipe(config);
    NoGradGuard guard;
    const SceneConfig &sc = pipe.scene_config();
    Rng rng(config.seed);
    Tensor images = Tensor::uniform({sc.num_cameras(), 3, sc.image_h, sc.image_w}, 0.0, 1.0, rng);

    std::vector<std::pair<std::string, Shape>> out;
    Tensor fused = pipe.encoder().encode(images, false);
    out.emplace_back("fused_2d", fused.shape());
    out.emplace_back("depth_dist", pipe.view().depth_net(fused, false).shape());
    out.emplace_back("context", pipe.view().context_net(fused, false).shape());
    CrossAttentionForecaster *attn = pipe.attention_forecaster();
    Tensor embedded = attn->add_contextual_embeddings(fused, config.frames - 1);
    out.emplace_back("queries", attn->init_queries(embedded, 0).shape());
    Tensor vol = pipe.feature_volume(fused, false);
    out.emplace_back("voxel_features", vol.shape());
    // a frame is its own temporal reference here; shapes don't care
    out.emplace_back("logits", pipe.logits_from_volumes(vol, vol, false).shape());
    return out;
}

double end_to_end_gradient_error(uint64_t seed) {
    // Miniature wiring of the full phase-2 graph: every stage's real math at
    // widths small enough for central differences end to end.
    SceneConfig sc = toy_scene_config();
    sc.grid_x = 8;
    sc.grid_y = 8;
    sc.grid_z = 4;
    sc.num_classes = 3;
    sc.image_h = 32;
    sc.image_w = 32;
    sc.cameras.resize(1);
    sc.n_context = 3;
    sc.horizons = {1, 2};
    sc.seed = seed;
    sc.validate();

    const int channels = 8, cams = 1, fh = 2, fw = 2, depth_bins = 4;
    const int n_ctx = sc.n_context, n_h = static_cast<int>(sc.horizons.size());

    Rng rng(seed);
    ParamRegistry reg;
    ForecastConfig fc;
    fc.channels = channels;
    fc.heads = 2;
    fc.ffn_hidden = 16;
    fc.layers = 2;
    fc.n_frames = n_ctx;
    fc.num_horizons = n_h;
    fc.num_cameras = cams;
    fc.spatial_h = fh;
    fc.spatial_w = fw;
    fc.scale_slice_widths = {2, 2, 2, 2};
    CrossAttentionForecaster fore(reg, "forecast.", fc, rng);
    ViewTransformConfig vc{channels, 4, depth_bins};
    ViewTransformer vt(reg, "view.", vc, rng);
    OccupancyConfig oc{4, 4, 4, 4, 8, 3};
    OccupancyEncoder occ(reg, "occ.", oc, rng);
    SemanticHead head(reg, "head.", oc, rng);

    std::vector<double> edges = make_depth_bin_edges(sc, depth_bins);
    std::vector<double> centers(depth_bins);
    for (int i = 0; i < depth_bins; ++i) centers[i] = 0.5 * (edges[i] + edges[i + 1]);

    std::vector<Tensor> frames;
    for (int t = 0; t < n_ctx; ++t)
        frames.push_back(Tensor::uniform({cams, channels, fh, fw}, -1.0, 1.0, rng));
    std::vector<Tensor> observed;
    for (int k = 0; k < n_h; ++k)
        observed.push_back(Tensor::uniform({cams, channels, fh, fw}, -1.0, 1.0, rng));
    std::vector<std::vector<uint8_t>> targets(n_h + 1);
    for (std::vector<uint8_t> &grid : targets) {
        grid.resize(static_cast<size_t>(sc.grid_z) * sc.grid_y * sc.grid_x);
        for (uint8_t &v : grid) v = static_cast<uint8_t>(rng.uniform_int(0, oc.num_classes - 1));
    }

    // full phase-2 loss as a function of the current frame's features (the
    // input every stage sees: queries, alignment, and both task references)
    auto loss = [&](const Tensor &x) {
        std::vector<Tensor> ctx(frames.begin(), frames.end() - 1);
        ctx.push_back(x);
        std::vector<Tensor> preds = fore.forecast(ctx);
        Tensor vol_cur = vt.transform(x, sc, centers, true);
        Tensor vol_prev = vt.transform(ctx[n_ctx - 2], sc, centers, true);
        std::vector<Tensor> logits;
        logits.push_back(head.forward(occ.encode(vol_cur, vol_prev, true), true));
        for (int k = 0; k < n_h; ++k) {
            Tensor vol_k = vt.transform(preds[k], sc, centers, true);
            logits.push_back(head.forward(occ.encode(vol_k, vol_cur, true), true));
        }
        return task_loss(logits, targets) + fsa_loss(preds, observed, 2.0) * 30.0;
    };

    Tensor x = frames.back();
    x.set_requires_grad(true);
    // the graph is ~30 layers deep; the floor sits above accumulated roundoff
    return finite_diff_check(loss, x, 1e-5, 1e-4);
}

}  // namespace focc
