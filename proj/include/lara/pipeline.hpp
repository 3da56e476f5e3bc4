#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lara/dataset.hpp"
#include "lara/losses.hpp"
#include "lara/model.hpp"
#include "lara/rasterizer.hpp"

namespace lara {

struct TrainConfig {
    std::string dataset;
    std::string out_dir;
    ModelConfig model;
    double lr = 4e-4;
    double lr_min = 0.0;
    double weight_decay = 0.0;
    int epochs = 80;
    int steps_per_epoch = 150;
    int batch_size = 1;
    int reg_start_epoch = 24;           // L_Reg active from this epoch on
    double gamma_d = 1000.0;
    double gamma_n = 0.2;
    int cosine_period_epochs = 0;       // 0: one cosine over the whole run
    uint64_t seed = 1;
    bool deterministic = true;
    int threads = 0;                    // 0: hardware default
    int checkpoint_every_epochs = 1;
    int val_every_epochs = 2;
    int val_scenes = 4;
    // optional early exit once both PSNR targets hold (0 disables)
    double target_train_psnr = 0;
    double target_test_psnr = 0;
    int min_epochs = 0;
    std::string resume;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
    std::string checkpoint_path;
    int64_t steps_run = 0;
    int epochs_run = 0;
    double train_psnr = 0;
    double test_psnr = 0;
};

TrainResult train(const TrainConfig& cfg);

// Feed-forward reconstruction of one scene from its selected input views.
struct ReconstructedScene {
    GaussianVolume volume;
    CoarsePrimitives coarse;
    Tensor sh_fine;
    std::vector<int> input_views;
    std::vector<RenderResult> coarse_input_renders;
};

struct LoadedModel {
    std::unique_ptr<LaraModel> model;
    nlohmann::json meta;
};
LoadedModel load_model(const std::string& checkpoint_path);
// error listing differing fields when the stored config disagrees
void check_config_compatible(const nlohmann::json& stored, const ModelConfig& requested);

ReconstructedScene reconstruct_scene(LaraModel& model, const SceneData& scene,
                                     const std::vector<int>& input_views,
                                     const RasterizeConfig& rcfg);

RasterizeConfig default_raster_config(const ModelConfig& model);

struct EvalSummary {
    nlohmann::json report;  // per-scene entries plus an "aggregate" block
};
EvalSummary evaluate(LaraModel& model, const std::string& dataset_root, int max_scenes = 0,
                     uint64_t seed = 1, bool held_out_views = true);

void render_views_cmd(const std::string& checkpoint, const std::string& scene_dir,
                      const std::string& out_dir, int orbit_views_per_ring = 16,
                      const std::vector<double>& elevations = {30.0, 0.0, -30.0},
                      double orbit_radius = 2.5);
void render_splats_cmd(const std::string& splat_file, const std::string& out_dir, int width, int height,
                       int orbit_views_per_ring = 16, const std::vector<double>& elevations = {30.0, 0.0, -30.0},
                       double orbit_radius = 2.5, double focal_factor = 0.9);

void mesh_cmd(const std::string& checkpoint, const std::string& scene_dir, const std::string& out_ply,
              int tsdf_resolution = 128, double trunc = 0.02, int orbit_views_per_ring = 16,
              double orbit_radius = 2.5, int render_size = 0);

// Direct optimization of a raw Gaussian volume against analytic renders of a
// textured sphere, bypassing the transformer.
struct DirectFitConfig {
    int grid_res = 16;
    int prims_per_voxel = 2;
    int views = 8;
    int image_size = 64;
    int steps = 2000;
    int views_per_step = 4;
    double lr = 2e-2;
    uint64_t seed = 7;
    double sphere_radius = 0.4;
    double target_psnr = 0;  // early exit when reached (0 disables)
    int eval_every = 100;
};
struct DirectFitResult {
    double final_psnr = 0;
    int64_t steps_run = 0;
};
DirectFitResult direct_fit_sphere(const DirectFitConfig& cfg);

// Gradient-check battery behind the `grad-check` CLI subcommand.
struct GradCheckSummary {
    double max_rel_err = 0;
    nlohmann::json report;
    bool passed = false;
};
GradCheckSummary run_grad_check_battery(uint64_t seed, int scenes, int splats, double tol = 1e-3);

}  // namespace lara
