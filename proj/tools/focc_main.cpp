#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "focc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace focc;

namespace {

// shared flags: --config loads a file first, explicit flags override it
struct CommonOpts {
    std::string config_path, out_dir, data_dir, preset;
    uint64_t seed = 0;
    CLI::Option *config_opt = nullptr, *seed_opt = nullptr, *out_opt = nullptr,
                *data_opt = nullptr, *preset_opt = nullptr;

    void attach(CLI::App *cmd) {
        config_opt = cmd->add_option("--config", config_path,
                                     "run config file ([section] key = value lines)")
                         ->check(CLI::ExistingFile);
        seed_opt = cmd->add_option("--seed", seed, "run seed");
        out_opt = cmd->add_option("--out", out_dir, "output directory");
        data_opt = cmd->add_option("--data", data_dir, "dataset directory");
        preset_opt = cmd->add_option("--preset", preset, "toy | paper-shape")
                         ->check(CLI::IsMember({"toy", "paper-shape"}));
    }

    RunConfig build() const {
        RunConfig cfg;
        if (config_opt->count()) cfg = load_run_config(config_path);
        if (seed_opt->count()) cfg.seed = seed;
        if (out_opt->count()) cfg.out_dir = out_dir;
        if (data_opt->count()) cfg.data_dir = data_dir;
        if (preset_opt->count())
            cfg.preset = preset == "toy" ? Preset::Toy : Preset::PaperShape;
        cfg.validate();
        return cfg;
    }
};

void require_file(const std::string &path, const char *what) {
    if (!fs::exists(path))
        throw ConfigError(std::string(what) + " not found: " + path);
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"focc: vision-based semantic occupancy forecasting on synthetic scenes"};
    app.require_subcommand(1);

    CLI::App *gen = app.add_subcommand("gen-data", "generate synthetic scenes into the dataset directory");
    CommonOpts gen_opts;
    gen_opts.attach(gen);
    int gen_count = 1;
    gen->add_option("--count", gen_count, "number of scenes (seeds seed, seed+1, ...)");

    CLI::App *pre = app.add_subcommand("pretrain", "phase 1: train encoder + grid branch on current-frame occupancy and depth");
    CommonOpts pre_opts;
    pre_opts.attach(pre);

    CLI::App *trn = app.add_subcommand("train-forecast", "phase 2: freeze the encoder and train the forecaster");
    CommonOpts trn_opts;
    trn_opts.attach(trn);
    std::string trn_ckpt;
    CLI::Option *trn_ckpt_opt =
        trn->add_option("--pretrained", trn_ckpt, "pretrain checkpoint (default <out>/pretrain.ckpt)");

    CLI::App *ev = app.add_subcommand("eval", "run inference over the dataset and write the horizon report");
    CommonOpts ev_opts;
    ev_opts.attach(ev);
    std::string ev_ckpt;
    CLI::Option *ev_ckpt_opt =
        ev->add_option("--checkpoint", ev_ckpt, "model checkpoint (default <out>/model.ckpt)");

    CLI::App *ex = app.add_subcommand("export", "write one scene's per-horizon grids, logits and class summary");
    CommonOpts ex_opts;
    ex_opts.attach(ex);
    std::string ex_ckpt;
    CLI::Option *ex_ckpt_opt =
        ex->add_option("--checkpoint", ex_ckpt, "model checkpoint (default <out>/model.ckpt)");
    size_t ex_scene = 0;
    ex->add_option("--scene", ex_scene, "scene index within the dataset");

    CLI::App *grd = app.add_subcommand("grad-check", "finite-difference check of the full loss through every stage");
    CommonOpts grd_opts;
    grd_opts.attach(grd);
    int grd_seeds = 3;
    grd->add_option("--seeds", grd_seeds, "number of consecutive seeds to check");

    CLI::App *shp = app.add_subcommand("shape-check", "one forward pass, printing every stage output shape");
    CommonOpts shp_opts;
    shp_opts.attach(shp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad flags are config errors
    }

    try {
        if (gen->parsed()) {
            RunConfig cfg = gen_opts.build();
            run_gen_data(cfg, gen_count);
            std::cout << "wrote " << gen_count << " scene(s) under " << cfg.data_dir << "\n";
        } else if (pre->parsed()) {
            RunConfig cfg = pre_opts.build();
            TrainResult r = run_pretrain(cfg);
            std::cout << "pretrained " << r.log.steps.size() << " steps; final total "
                      << r.log.steps.back().total << "\n"
                      << "checkpoint: " << r.checkpoint << "\n";
        } else if (trn->parsed()) {
            RunConfig cfg = trn_opts.build();
            std::string ckpt = trn_ckpt_opt->count()
                                   ? trn_ckpt
                                   : (fs::path(cfg.out_dir) / "pretrain.ckpt").string();
            require_file(ckpt, "pretrain checkpoint");
            TrainResult r = run_train_forecast(cfg, ckpt);
            std::cout << "trained " << r.log.steps.size() << " steps; final total "
                      << r.log.steps.back().total << "\n"
                      << "checkpoint: " << r.checkpoint << "\n";
        } else if (ev->parsed()) {
            RunConfig cfg = ev_opts.build();
            std::string ckpt = ev_ckpt_opt->count()
                                   ? ev_ckpt
                                   : (fs::path(cfg.out_dir) / "model.ckpt").string();
            require_file(ckpt, "model checkpoint");
            HorizonReport report = run_eval(cfg, ckpt);
            std::cout << report.to_table() << "report written under " << cfg.out_dir << "\n";
        } else if (ex->parsed()) {
            RunConfig cfg = ex_opts.build();
            std::string ckpt = ex_ckpt_opt->count()
                                   ? ex_ckpt
                                   : (fs::path(cfg.out_dir) / "model.ckpt").string();
            require_file(ckpt, "model checkpoint");
            run_export(cfg, ckpt, ex_scene);
            std::cout << "exported scene " << ex_scene << " under " << cfg.out_dir << "\n";
        } else if (grd->parsed()) {
            RunConfig cfg = grd_opts.build();
            if (grd_seeds < 1) throw ConfigError("grad-check: --seeds must be >= 1");
            double worst = 0;
            for (int i = 0; i < grd_seeds; ++i) {
                uint64_t s = cfg.seed + static_cast<uint64_t>(i);
                double err = end_to_end_gradient_error(s);
                std::cout << "seed " << s << ": max relative error " << err << "\n";
                worst = std::max(worst, err);
            }
            if (!(worst < 1e-3))
                throw NumericError("grad-check: worst relative error " + std::to_string(worst) +
                                   " exceeds 1e-3");
            std::cout << "gradients agree with finite differences (worst " << worst << ")\n";
        } else if (shp->parsed()) {
            RunConfig cfg = shp_opts.build();
            for (const auto &[name, shape] : run_shape_check(cfg))
                std::cout << name << ": " << shape_str(shape) << "\n";
        }
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError &e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
