#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "lara/pipeline.hpp"

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw std::runtime_error("cannot open config '" + path + "'");
    nlohmann::json j;
    f >> j;
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lara: feed-forward 2D-Gaussian radiance fields at desk scale"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
    lara::DatasetSpec dspec;
    gen->add_option("--out", dspec.out_dir, "output directory")->required();
    gen->add_option("--scenes", dspec.n_scenes, "number of scenes");
    gen->add_option("--views", dspec.views_per_scene, "training views per scene");
    gen->add_option("--test-views", dspec.test_views, "held-out views per scene");
    gen->add_option("--res", dspec.resolution, "image resolution");
    gen->add_option("--seed", dspec.seed, "random seed");

    // train
    auto* tr = app.add_subcommand("train", "train the feed-forward model");
    std::string train_config_path, train_out, train_resume;
    uint64_t train_seed = 0;
    bool train_seed_set = false, deterministic = false;
    int train_threads = 0;
    tr->add_option("--config", train_config_path, "train config JSON")->required();
    tr->add_option("--out", train_out, "output directory (overrides config)");
    tr->add_option("--seed", train_seed, "seed (overrides config)")->each([&](const std::string&) {
        train_seed_set = true;
    });
    tr->add_flag("--deterministic", deterministic, "deterministic mode");
    tr->add_option("--threads", train_threads, "worker threads");
    tr->add_option("--resume", train_resume, "checkpoint to resume from");

    // render
    auto* rd = app.add_subcommand("render", "reconstruct a scene and render a trajectory");
    std::string rd_ckpt, rd_scene, rd_out, rd_splats;
    int rd_ring = 16;
    double rd_radius = 2.5;
    int rd_width = 64;
    rd->add_option("--checkpoint", rd_ckpt, "model checkpoint");
    rd->add_option("--splats", rd_splats, "LARA-GS1 splat dump (instead of a checkpoint)");
    rd->add_option("--scene", rd_scene, "scene directory");
    rd->add_option("--out", rd_out, "output directory")->required();
    rd->add_option("--ring-views", rd_ring, "views per orbit ring");
    rd->add_option("--radius", rd_radius, "orbit radius");
    rd->add_option("--size", rd_width, "image size for --splats rendering");

    // mesh
    auto* ms = app.add_subcommand("mesh", "reconstruct a scene and extract a TSDF mesh");
    std::string ms_ckpt, ms_scene, ms_out;
    int ms_res = 128, ms_ring = 16, ms_render = 0;
    double ms_trunc = 0.02, ms_radius = 2.5;
    ms->add_option("--checkpoint", ms_ckpt, "model checkpoint")->required();
    ms->add_option("--scene", ms_scene, "scene directory")->required();
    ms->add_option("--out", ms_out, "output PLY path")->required();
    ms->add_option("--tsdf-res", ms_res, "TSDF resolution");
    ms->add_option("--trunc", ms_trunc, "TSDF truncation distance");
    ms->add_option("--ring-views", ms_ring, "views per orbit ring");
    ms->add_option("--radius", ms_radius, "orbit radius");
    ms->add_option("--render-size", ms_render, "depth render size (0: scene resolution)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string ev_ckpt, ev_dataset, ev_out;
    int ev_max = 0;
    uint64_t ev_seed = 1;
    bool ev_train_views = false;
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--dataset", ev_dataset, "dataset root")->required();
    ev->add_option("--out", ev_out, "metrics JSON output")->required();
    ev->add_option("--max-scenes", ev_max, "limit scene count");
    ev->add_option("--seed", ev_seed, "seed for input-view selection");
    ev->add_flag("--train-views", ev_train_views, "evaluate on training views instead of held-out");

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient audit");
    uint64_t gc_seed = 3;
    int gc_scenes = 4, gc_splats = 6;
    double gc_tol = 1e-3;
    gc->add_option("--seed", gc_seed, "seed");
    gc->add_option("--scenes", gc_scenes, "number of random scenes");
    gc->add_option("--splats", gc_splats, "splats per scene");
    gc->add_option("--tol", gc_tol, "relative-error tolerance");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            lara::gen_dataset(dspec);
            std::cout << "dataset written to " << dspec.out_dir << "\n";
        } else if (tr->parsed()) {
            lara::TrainConfig cfg = lara::TrainConfig::from_json(load_json(train_config_path));
            if (!train_out.empty()) cfg.out_dir = train_out;
            if (train_seed_set) cfg.seed = train_seed;
            if (deterministic) cfg.deterministic = true;
            if (train_threads > 0) cfg.threads = train_threads;
            if (!train_resume.empty()) cfg.resume = train_resume;
            lara::TrainResult res = lara::train(cfg);
            std::cout << "trained " << res.steps_run << " steps (" << res.epochs_run << " epochs); "
                      << "train PSNR " << res.train_psnr << ", held-out PSNR " << res.test_psnr
                      << "; checkpoint: " << res.checkpoint_path << "\n";
        } else if (rd->parsed()) {
            if (!rd_splats.empty()) {
                lara::render_splats_cmd(rd_splats, rd_out, rd_width, rd_width, rd_ring, {30.0, 0.0, -30.0},
                                        rd_radius);
            } else {
                if (rd_ckpt.empty() || rd_scene.empty())
                    throw std::runtime_error("render: need --checkpoint and --scene (or --splats)");
                lara::render_views_cmd(rd_ckpt, rd_scene, rd_out, rd_ring, {30.0, 0.0, -30.0}, rd_radius);
            }
            std::cout << "renders written to " << rd_out << "\n";
        } else if (ms->parsed()) {
            lara::mesh_cmd(ms_ckpt, ms_scene, ms_out, ms_res, ms_trunc, ms_ring, ms_radius, ms_render);
            std::cout << "mesh written to " << ms_out << "\n";
        } else if (ev->parsed()) {
            lara::LoadedModel lm = lara::load_model(ev_ckpt);
            lara::EvalSummary summary =
                lara::evaluate(*lm.model, ev_dataset, ev_max, ev_seed, !ev_train_views);
            std::ofstream f(ev_out);
            f << summary.report.dump(1) << "\n";
            std::cout << summary.report.at("aggregate").dump(1) << "\n";
        } else if (gc->parsed()) {
            lara::GradCheckSummary summary = lara::run_grad_check_battery(gc_seed, gc_scenes, gc_splats, gc_tol);
            std::cout << summary.report.dump(1) << "\n";
            std::cout << "max rel err: " << summary.max_rel_err << (summary.passed ? " (PASS)" : " (FAIL)")
                      << "\n";
            return summary.passed ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
