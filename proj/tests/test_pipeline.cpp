#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "focc/checkpoint.hpp"
#include "focc/pipeline.hpp"

using namespace focc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char *tag) {
        path = fs::temp_directory_path() / (std::string("focc_pipe_") + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// in-memory equivalent of one generated + rendered dataset scene
SceneData synth_scene(const SceneConfig &config) {
    SceneSequence seq = generate_scene(config);
    SceneData data;
    data.seed = config.seed;
    for (size_t t = 0; t < seq.ticks.size(); ++t) {
        RenderedViews views = render_views(seq, static_cast<int>(t));
        SceneFrameData f;
        f.time_offset = seq.ticks[t].time_offset;
        f.is_future = seq.ticks[t].is_future;
        f.images = views.images;
        f.depths = views.depths;
        f.occ = rasterize_occupancy(seq, static_cast<int>(t), GridFrame::EgoAtCurrent);
        data.frames.push_back(std::move(f));
    }
    return data;
}

bool any_grad_under(const ParamRegistry &reg, const std::string &prefix) {
    for (const ParamEntry &e : reg.entries())
        if (!e.buffer && e.name.rfind(prefix, 0) == 0 && e.tensor.has_grad()) return true;
    return false;
}

// loss columns only: rows without the trailing wall-clock field
std::string strip_wall_column(const std::string &csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '#') line.erase(line.rfind(','));
        out << line << '\n';
    }
    return out.str();
}

}  // namespace

TEST_CASE("construction registers every stage under its prefix and stamps the run meta") {
    RunConfig cfg;
    Pipeline pipe(cfg);

    for (const char *p : {"encoder.", "forecast.", "view.", "occ.", "head."})
        CHECK_MESSAGE(pipe.params().count_values(p) > 0, p);
    CHECK(pipe.params().get("meta.preset").item() == 0.0);
    CHECK(pipe.params().get("meta.forecaster").item() == 0.0);
    CHECK(pipe.attention_forecaster() != nullptr);
    CHECK(pipe.naive_forecaster() == nullptr);

    // depth bins: centers sit strictly inside consecutive edges
    const auto &edges = pipe.bin_edges();
    const auto &centers = pipe.bin_centers();
    REQUIRE(edges.size() == centers.size() + 1);
    CHECK(static_cast<int>(centers.size()) == cfg.view_config().depth_bins);
    for (size_t i = 0; i < centers.size(); ++i) {
        CHECK(centers[i] > edges[i]);
        CHECK(centers[i] < edges[i + 1]);
    }

    RunConfig naive_cfg;
    naive_cfg.forecaster = ForecasterKind::Naive;
    Pipeline naive_pipe(naive_cfg);
    CHECK(naive_pipe.naive_forecaster() != nullptr);
    CHECK(naive_pipe.attention_forecaster() == nullptr);
    CHECK(naive_pipe.params().get("meta.forecaster").item() == 1.0);
    CHECK(naive_pipe.params().count_values("forecast.") > 0);
}

TEST_CASE("pretrain losses are finite and reach the whole trunk but not the forecaster") {
    RunConfig cfg;
    cfg.seed = 11;
    Pipeline pipe(cfg);
    SceneConfig sc = pipe.scene_config();
    sc.seed = 11;
    SceneData scene = synth_scene(sc);

    Pipeline::PretrainLosses losses = pipe.pretrain_losses(scene, true);
    CHECK(std::isfinite(losses.task));
    CHECK(std::isfinite(losses.depth));
    CHECK(losses.task > 0);   // random init cannot fit 5-way labels exactly
    CHECK(losses.depth > 0);
    CHECK(losses.total.item() == doctest::Approx(losses.task + losses.depth).epsilon(1e-12));

    losses.total.backward();
    CHECK(any_grad_under(pipe.params(), "encoder."));
    CHECK(any_grad_under(pipe.params(), "view."));
    CHECK(any_grad_under(pipe.params(), "occ."));
    CHECK(any_grad_under(pipe.params(), "head."));
    CHECK(!any_grad_under(pipe.params(), "forecast."));

    // evaluation mode carries no graph but reports the same kind of numbers
    Pipeline::PretrainLosses eval = pipe.pretrain_losses(scene, false);
    CHECK(std::isfinite(eval.total.item()));
    CHECK(!eval.total.has_grad());

    SceneData truncated = scene;
    truncated.frames.resize(1);
    CHECK_THROWS_AS(pipe.pretrain_losses(truncated, true), ContractError);
}

TEST_CASE("forecast loss toggles select the terms and the trained branches") {
    SceneConfig base_sc;
    auto features = [](Pipeline &pipe, const SceneData &scene) {
        pipe.encoder().mark_pretrained();
        return pipe.frozen_features(scene);
    };

    RunConfig cfg;
    cfg.seed = 21;
    Pipeline pipe(cfg);
    SceneConfig sc = pipe.scene_config();
    sc.seed = 21;
    SceneData scene = synth_scene(sc);
    std::vector<Tensor> feats = features(pipe, scene);
    int n_ctx = pipe.scene_config().n_context;
    std::vector<Tensor> ctx(feats.begin(), feats.begin() + n_ctx);
    std::vector<Tensor> fut(feats.begin() + n_ctx, feats.end());

    SUBCASE("both losses: total = task + alpha * (huber + cosine)") {
        Pipeline::ForecastLosses l = pipe.forecast_losses(ctx, fut, scene, true);
        CHECK(l.task > 0);
        CHECK(l.fsa_huber > 0);
        CHECK(l.fsa_cosine > 0);
        CHECK(l.total.item() ==
              doctest::Approx(l.task + cfg.alpha * (l.fsa_huber + l.fsa_cosine)).epsilon(1e-12));
        l.total.backward();
        CHECK(any_grad_under(pipe.params(), "forecast."));
        CHECK(any_grad_under(pipe.params(), "occ."));
    }

    SUBCASE("task only: alignment terms stay zero") {
        RunConfig task_cfg = cfg;
        task_cfg.use_fsa_loss = false;
        Pipeline tp(task_cfg);
        std::vector<Tensor> tf = features(tp, scene);
        std::vector<Tensor> tctx(tf.begin(), tf.begin() + n_ctx);
        std::vector<Tensor> tfut(tf.begin() + n_ctx, tf.end());
        Pipeline::ForecastLosses l = tp.forecast_losses(tctx, tfut, scene, true);
        CHECK(l.fsa_huber == 0);
        CHECK(l.fsa_cosine == 0);
        CHECK(l.total.item() == doctest::Approx(l.task).epsilon(1e-12));
    }

    SUBCASE("alignment only: the grid branch is never touched") {
        RunConfig fsa_cfg = cfg;
        fsa_cfg.use_task_loss = false;
        Pipeline fp(fsa_cfg);
        std::vector<Tensor> ff = features(fp, scene);
        std::vector<Tensor> fctx(ff.begin(), ff.begin() + n_ctx);
        std::vector<Tensor> ffut(ff.begin() + n_ctx, ff.end());
        Pipeline::ForecastLosses l = fp.forecast_losses(fctx, ffut, scene, true);
        CHECK(l.task == 0);
        CHECK(l.total.item() ==
              doctest::Approx(fsa_cfg.alpha * (l.fsa_huber + l.fsa_cosine)).epsilon(1e-12));
        l.total.backward();
        CHECK(any_grad_under(fp.params(), "forecast."));
        CHECK(!any_grad_under(fp.params(), "view."));
        CHECK(!any_grad_under(fp.params(), "occ."));
        CHECK(!any_grad_under(fp.params(), "head."));
    }

    SUBCASE("window size is checked") {
        std::vector<Tensor> short_ctx(ctx.begin(), ctx.end() - 1);
        CHECK_THROWS_AS(pipe.forecast_losses(short_ctx, fut, scene, true), ContractError);
    }
    (void)base_sc;
}

TEST_CASE("frozen features match an inference-mode encode") {
    RunConfig cfg;
    cfg.seed = 31;
    Pipeline pipe(cfg);
    SceneConfig sc = pipe.scene_config();
    sc.seed = 31;
    SceneData scene = synth_scene(sc);

    CHECK_THROWS_AS(pipe.frozen_features(scene), ConfigError);  // not marked pretrained yet
    pipe.encoder().mark_pretrained();
    std::vector<Tensor> feats = pipe.frozen_features(scene);
    REQUIRE(feats.size() == scene.frames.size());

    NoGradGuard guard;
    Tensor direct = pipe.encoder().encode(scene.frames[2].images, false);
    CHECK(feats[2].shape() == direct.shape());
    CHECK(feats[2].data() == direct.data());
    CHECK(!feats[2].has_grad());
}

TEST_CASE("checkpoint stamps reject preset and forecaster mismatches before loading") {
    TempDir tmp("meta");
    RunConfig cfg;
    Pipeline pipe(cfg);
    std::string full = (tmp.path / "full.ckpt").string();
    save_checkpoint(full, pipe.params());

    CHECK_NOTHROW(verify_checkpoint_compatibility(full, cfg));

    RunConfig paper = cfg;
    paper.preset = Preset::PaperShape;
    CHECK_THROWS_AS(verify_checkpoint_compatibility(full, paper), ConfigError);

    RunConfig naive = cfg;
    naive.forecaster = ForecasterKind::Naive;
    CHECK_THROWS_AS(verify_checkpoint_compatibility(full, naive), ConfigError);

    // trunk checkpoints omit the forecaster stamp: any forecaster may load one
    ParamRegistry trunk;
    for (const ParamEntry &e : pipe.params().entries())
        if (e.name.rfind("forecast.", 0) != 0 && e.name != "meta.forecaster")
            trunk.add(e.name, e.tensor, e.trainable, e.buffer);
    std::string trunk_file = (tmp.path / "trunk.ckpt").string();
    save_checkpoint(trunk_file, trunk);
    CHECK_NOTHROW(verify_checkpoint_compatibility(trunk_file, cfg));
    CHECK_NOTHROW(verify_checkpoint_compatibility(trunk_file, naive));
    CHECK_THROWS_AS(verify_checkpoint_compatibility(trunk_file, paper), ConfigError);

    // a bare registry without stamps is not a pipeline checkpoint
    ParamRegistry loose;
    Rng rng(3);
    loose.add("w", Tensor::uniform({2, 2}, -1, 1, rng));
    std::string loose_file = (tmp.path / "loose.ckpt").string();
    save_checkpoint(loose_file, loose);
    CHECK_THROWS_WITH_AS(verify_checkpoint_compatibility(loose_file, cfg),
                         doctest::Contains("meta.preset"), ConfigError);
}

TEST_CASE("train log rows append monotonically and serialize with events last") {
    TrainLog log;
    TrainStep a;
    a.step = 1;
    a.epoch = 0;
    a.total = 0.1;
    a.lr_rest = 1e-3;
    a.wall_s = 5.5;
    log.append(a);
    TrainStep b = a;
    b.step = 2;
    b.total = 0.05;
    log.append(b);
    log.events.push_back("epoch 0 mean total 0.075");

    TrainStep stale = a;
    CHECK_THROWS_AS(log.append(stale), ContractError);

    std::string csv = log.to_csv();
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,epoch,total,task,fsa_huber,fsa_cosine,depth,lr_forecast,lr_rest,wall_s");
    std::getline(in, line);
    // %.17g keeps doubles parse-exact: 0.1 prints with its full mantissa
    CHECK(line.substr(0, 24) == "1,0,0.10000000000000001,");
    std::getline(in, line);
    CHECK(line.substr(0, 7) == "2,0,0.0");
    std::getline(in, line);
    CHECK(line == "# epoch 0 mean total 0.075");
}

TEST_CASE("gen-data writes a loadable dataset and layout mismatches refuse to train") {
    TempDir tmp("gen");
    RunConfig cfg;
    cfg.seed = 41;
    cfg.data_dir = (tmp.path / "data").string();
    cfg.out_dir = (tmp.path / "out").string();

    run_gen_data(cfg, 2);
    Dataset ds = load_dataset(cfg.data_dir);
    REQUIRE(ds.scenes.size() == 2);
    CHECK(ds.scenes[0].seed == 41);
    CHECK(ds.scenes[1].seed == 42);
    CHECK(ds.config.n_context == cfg.frames);
    REQUIRE(ds.scenes[0].frames.size() == 7);  // 4 observed + 3 horizons
    CHECK(ds.scenes[0].frames[3].is_future == false);
    CHECK(ds.scenes[0].frames[4].is_future == true);

    // an empty dataset directory is valid on disk but refuses to train
    RunConfig empty = cfg;
    empty.data_dir = (tmp.path / "empty").string();
    run_gen_data(empty, 0);
    CHECK(fs::exists(fs::path(empty.data_dir) / "dataset.json"));
    CHECK_THROWS_AS(run_pretrain(empty), ConfigError);

    // a dataset generated with a different context length is a layout mismatch
    RunConfig other = cfg;
    other.frames = 3;
    CHECK_THROWS_AS(run_pretrain(other), ConfigError);

    CHECK_THROWS_AS(run_gen_data(cfg, -1), ConfigError);
}

TEST_CASE("two-phase training writes logs, checkpoints and reports, deterministically") {
    TempDir tmp("train");
    RunConfig cfg;
    cfg.seed = 51;
    cfg.data_dir = (tmp.path / "data").string();
    cfg.out_dir = (tmp.path / "out").string();
    cfg.pretrain_epochs = 1;
    cfg.epochs = 2;  // exercises the midpoint rate drop at epoch 1
    cfg.batch = 2;

    run_gen_data(cfg, 2);
    TrainResult pre = run_pretrain(cfg);
    REQUIRE(pre.log.steps.size() == 1);  // 2 scenes / batch 2 / 1 epoch
    CHECK(pre.log.steps[0].lr_rest == cfg.pretrain_lr);
    CHECK(pre.log.steps[0].lr_forecast == 0);
    CHECK(pre.log.steps[0].depth > 0);
    CHECK(fs::exists(pre.checkpoint));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "pretrain_log.csv"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "config.cfg"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "model_summary.txt"));

    TrainResult fore = run_train_forecast(cfg, pre.checkpoint);
    REQUIRE(fore.log.steps.size() == 2);
    CHECK(fore.log.steps[0].lr_forecast == cfg.lr_forecast);
    CHECK(fore.log.steps[1].lr_forecast == doctest::Approx(cfg.lr_forecast / 10));
    CHECK(fore.log.steps[0].fsa_huber > 0);
    CHECK(fore.log.steps[0].task > 0);
    bool drop_logged = false;
    for (const std::string &e : fore.log.events)
        if (e.find("forecast lr") != std::string::npos) drop_logged = true;
    CHECK(drop_logged);
    CHECK(fs::exists(fore.checkpoint));

    // same seed, same data => bitwise-identical loss columns
    RunConfig rerun = cfg;
    rerun.out_dir = (tmp.path / "out2").string();
    TrainResult pre2 = run_pretrain(rerun);
    CHECK(strip_wall_column(pre2.log.to_csv()) == strip_wall_column(pre.log.to_csv()));
    TrainResult fore2 = run_train_forecast(rerun, pre2.checkpoint);
    CHECK(strip_wall_column(fore2.log.to_csv()) == strip_wall_column(fore.log.to_csv()));

    // evaluation artifacts
    HorizonReport report = run_eval(cfg, fore.checkpoint);
    REQUIRE(report.rows.size() == 2 * 3);
    CHECK(report.horizons_s == std::vector<int>{1, 2, 3});
    for (const HorizonRow &row : report.rows) {
        CHECK(row.iou >= 0);
        CHECK(row.iou <= 100);
        CHECK(row.miou >= 0);
        CHECK(row.miou <= 100);
    }
    CHECK(std::isfinite(report.avg_miou));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "report.csv"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "report.txt"));
    int z = 0, y = 0, x = 0;
    auto grid = read_occ((fs::path(cfg.out_dir) / "pred_scene_51_h2s.occ").string(), z, y, x);
    CHECK(z == 8);
    CHECK(y == 32);
    CHECK(x == 32);
    for (uint8_t v : grid) CHECK(v < 5);

    // the eval checkpoint must be a full model, not a trunk
    CHECK_THROWS_AS(run_eval(cfg, pre.checkpoint), ContractError);

    // per-scene export artifacts
    run_export(cfg, fore.checkpoint, 1);
    CHECK(fs::exists(fs::path(cfg.out_dir) / "export_scene_52_h1s.occ"));
    CHECK(fs::exists(fs::path(cfg.out_dir) / "export_scene_52_summary.txt"));
    Tensor logits =
        read_logits((fs::path(cfg.out_dir) / "export_scene_52_h3s.logits").string());
    CHECK(logits.shape() == Shape{5, 8, 32, 32});
    CHECK_THROWS_AS(run_export(cfg, fore.checkpoint, 7), ConfigError);
}

TEST_CASE("prediction outputs one class volume per horizon") {
    RunConfig cfg;
    cfg.seed = 61;
    Pipeline pipe(cfg);
    pipe.encoder().mark_pretrained();
    SceneConfig sc = pipe.scene_config();
    sc.seed = 61;
    SceneData scene = synth_scene(sc);

    std::vector<Tensor> logits = pipe.predict_logits(scene);
    REQUIRE(logits.size() == 3);
    for (const Tensor &l : logits) {
        CHECK(l.shape() == Shape{5, 8, 32, 32});
        CHECK(!l.has_grad());
    }
    Tensor current = pipe.predict_current_logits(scene);
    CHECK(current.shape() == Shape{5, 8, 32, 32});

    std::vector<std::vector<uint8_t>> grids = pipe.predict_grids(scene);
    REQUIRE(grids.size() == 3);
    for (const auto &g : grids) {
        CHECK(g.size() == size_t{8} * 32 * 32);
        for (uint8_t v : g) CHECK(v < 5);
    }
}
