#include "lara/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "lara/checkpoint.hpp"
#include "lara/mesh.hpp"

namespace fs = std::filesystem;

namespace lara {

namespace {

Tensor image_to_tensor(const Image& img) {
    check(img.channels == 3, "image_to_tensor: expected RGB");
    return Tensor::from_vector({img.height, img.width, 3}, img.data);
}

Image tensor_to_image(const Tensor& t) {
    const Shape& s = t.shape();
    Image img;
    img.height = static_cast<int>(s[0]);
    img.width = static_cast<int>(s[1]);
    img.channels = s.size() == 3 ? static_cast<int>(s[2]) : 1;
    img.data = t.value();
    return img;
}

struct SceneCache {
    SceneData data;
    std::vector<Tensor> images;
    std::vector<std::vector<double>> depths;
    std::vector<std::vector<uint8_t>> masks;
    std::vector<int> input_views;
};

SceneCache make_scene_cache(SceneData&& data, int m_views, uint64_t seed) {
    SceneCache cache;
    cache.data = std::move(data);
    for (const auto& img : cache.data.images) cache.images.push_back(image_to_tensor(img));
    for (const auto& d : cache.data.depths) {
        cache.depths.push_back(d.data);
        std::vector<uint8_t> mask(d.data.size());
        for (size_t i = 0; i < d.data.size(); ++i) mask[i] = d.data[i] > 0 ? 1 : 0;
        cache.masks.push_back(std::move(mask));
    }
    std::vector<Camera> train_cams(cache.data.cameras.begin(),
                                   cache.data.cameras.begin() + cache.data.n_train);
    cache.input_views = select_input_views(train_cams, m_views, seed);
    return cache;
}

struct SampleLossParts {
    Tensor total;
    double recon_coarse = 0, recon_fine = 0, ld = 0, ln = 0;
};

SampleLossParts scene_sample_loss(LaraModel& model, const SceneCache& scene,
                                  const std::vector<int>& novel_views, bool reg_enabled, double gamma_d,
                                  double gamma_n, const RasterizeConfig& rcfg) {
    const auto& inputs = scene.input_views;
    std::vector<Tensor> in_images;
    std::vector<Camera> in_cams;
    for (int v : inputs) {
        in_images.push_back(scene.images[static_cast<size_t>(v)]);
        in_cams.push_back(scene.data.cameras[static_cast<size_t>(v)]);
    }
    GaussianVolume vol = model.reconstruct(in_images, in_cams);
    CoarsePrimitives prims = model.decode_coarse(vol);

    std::vector<RenderResult> coarse_input;
    for (const Camera& cam : in_cams)
        coarse_input.push_back(
            rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, prims.sh, cam, rcfg));
    Tensor sh_fine = model.decode_fine(vol, prims, in_images, coarse_input, in_cams);

    std::vector<int> supervised = inputs;
    supervised.insert(supervised.end(), novel_views.begin(), novel_views.end());

    Tensor total;
    Tensor reg_d, reg_n;
    SampleLossParts parts;
    for (size_t k = 0; k < supervised.size(); ++k) {
        const int v = supervised[k];
        const Camera& cam = scene.data.cameras[static_cast<size_t>(v)];
        const Tensor& target = scene.images[static_cast<size_t>(v)];
        RenderResult coarse = k < inputs.size()
                                  ? coarse_input[k]
                                  : rasterize(prims.position, prims.rotation, prims.scale, prims.opacity,
                                              prims.sh, cam, rcfg);
        RenderResult fine = rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, sh_fine,
                                      cam, rcfg);
        Tensor lc = recon_loss(coarse.rgb, target);
        Tensor lf = recon_loss(fine.rgb, target);
        parts.recon_coarse += lc.item();
        parts.recon_fine += lf.item();
        Tensor view_loss = add(lc, lf);
        total = total.defined() ? add(total, view_loss) : view_loss;
        if (reg_enabled) {
            Tensor ld = distortion_loss(coarse);
            Tensor ln = normal_consistency_loss(coarse, depth_to_normal(coarse.depth, cam));
            parts.ld += ld.item();
            parts.ln += ln.item();
            reg_d = reg_d.defined() ? add(reg_d, ld) : ld;
            reg_n = reg_n.defined() ? add(reg_n, ln) : ln;
        }
    }
    const double inv_views = 1.0 / static_cast<double>(supervised.size());
    total = mul_scalar(total, inv_views);
    if (reg_enabled) {
        total = add(total, mul_scalar(reg_d, gamma_d * inv_views));
        total = add(total, mul_scalar(reg_n, gamma_n * inv_views));
    }
    parts.recon_coarse *= inv_views;
    parts.recon_fine *= inv_views;
    parts.ld *= inv_views;
    parts.ln *= inv_views;
    parts.total = total;
    return parts;
}

struct ViewMetrics {
    double psnr_v = 0, ssim_v = 0;
    DepthMetrics depth;
    bool has_depth = false;
};

ViewMetrics render_and_score(LaraModel& model, const SceneCache& scene, const ReconstructedScene& recon,
                             int view, const RasterizeConfig& rcfg) {
    const Camera& cam = scene.data.cameras[static_cast<size_t>(view)];
    RenderResult fine = rasterize(recon.coarse.position, recon.coarse.rotation, recon.coarse.scale,
                                  recon.coarse.opacity, recon.sh_fine, cam, rcfg);
    ViewMetrics m;
    m.psnr_v = psnr(fine.rgb.value(), scene.images[static_cast<size_t>(view)].value());
    m.ssim_v = ssim_value(fine.rgb, scene.images[static_cast<size_t>(view)]);
    if (view < static_cast<int>(scene.depths.size())) {
        m.depth = depth_metrics(fine.depth.value(), scene.depths[static_cast<size_t>(view)],
                                scene.masks[static_cast<size_t>(view)]);
        m.has_depth = true;
    }
    (void)model;
    return m;
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
    return {{"dataset", dataset},
            {"out_dir", out_dir},
            {"model", model.to_json()},
            {"lr", lr},
            {"lr_min", lr_min},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"steps_per_epoch", steps_per_epoch},
            {"batch_size", batch_size},
            {"reg_start_epoch", reg_start_epoch},
            {"gamma_d", gamma_d},
            {"gamma_n", gamma_n},
            {"cosine_period_epochs", cosine_period_epochs},
            {"seed", seed},
            {"deterministic", deterministic},
            {"threads", threads},
            {"checkpoint_every_epochs", checkpoint_every_epochs},
            {"val_every_epochs", val_every_epochs},
            {"val_scenes", val_scenes},
            {"target_train_psnr", target_train_psnr},
            {"target_test_psnr", target_test_psnr},
            {"min_epochs", min_epochs}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.dataset = j.value("dataset", c.dataset);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.lr = j.value("lr", c.lr);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.reg_start_epoch = j.value("reg_start_epoch", c.reg_start_epoch);
    c.gamma_d = j.value("gamma_d", c.gamma_d);
    c.gamma_n = j.value("gamma_n", c.gamma_n);
    c.cosine_period_epochs = j.value("cosine_period_epochs", c.cosine_period_epochs);
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    c.threads = j.value("threads", c.threads);
    c.checkpoint_every_epochs = j.value("checkpoint_every_epochs", c.checkpoint_every_epochs);
    c.val_every_epochs = j.value("val_every_epochs", c.val_every_epochs);
    c.val_scenes = j.value("val_scenes", c.val_scenes);
    c.target_train_psnr = j.value("target_train_psnr", c.target_train_psnr);
    c.target_test_psnr = j.value("target_test_psnr", c.target_test_psnr);
    c.min_epochs = j.value("min_epochs", c.min_epochs);
    c.resume = j.value("resume", c.resume);
    return c;
}

RasterizeConfig default_raster_config(const ModelConfig& model) {
    RasterizeConfig rcfg;
    rcfg.sh_order = model.sh_order;
    rcfg.background = {1, 1, 1};
    return rcfg;
}

ReconstructedScene reconstruct_scene(LaraModel& model, const SceneData& scene,
                                     const std::vector<int>& input_views, const RasterizeConfig& rcfg) {
    ReconstructedScene out;
    out.input_views = input_views;
    std::vector<Tensor> in_images;
    std::vector<Camera> in_cams;
    for (int v : input_views) {
        in_images.push_back(image_to_tensor(scene.images[static_cast<size_t>(v)]));
        in_cams.push_back(scene.cameras[static_cast<size_t>(v)]);
    }
    out.volume = model.reconstruct(in_images, in_cams);
    out.coarse = model.decode_coarse(out.volume);
    for (const Camera& cam : in_cams)
        out.coarse_input_renders.push_back(rasterize(out.coarse.position, out.coarse.rotation,
                                                     out.coarse.scale, out.coarse.opacity, out.coarse.sh,
                                                     cam, rcfg));
    out.sh_fine = model.decode_fine(out.volume, out.coarse, in_images, out.coarse_input_renders, in_cams);
    return out;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace {

void save_train_checkpoint(const std::string& path, LaraModel& model, AdamW* opt,
                           nlohmann::json extra_meta) {
    CheckpointData data;
    extra_meta["model_config"] = model.config().to_json();
    if (opt) extra_meta["opt_step"] = opt->step_count();
    data.meta = std::move(extra_meta);
    for (const auto& p : model.params().params()) data.tensors.emplace_back(p.name, p.tensor);
    if (opt) {
        for (const auto& p : model.params().params()) {
            auto& m = opt->first_moments()[p.name];
            auto& v = opt->second_moments()[p.name];
            if (m.size() != p.tensor.value().size()) m.assign(p.tensor.value().size(), 0.0);
            if (v.size() != p.tensor.value().size()) v.assign(p.tensor.value().size(), 0.0);
            data.tensors.emplace_back("opt.m." + p.name, Tensor::from_vector(p.tensor.shape(), m));
            data.tensors.emplace_back("opt.v." + p.name, Tensor::from_vector(p.tensor.shape(), v));
        }
    }
    save_checkpoint(path, data);
}

}  // namespace

LoadedModel load_model(const std::string& checkpoint_path) {
    CheckpointData data = load_checkpoint(checkpoint_path);
    check(data.meta.contains("model_config"),
          "checkpoint '" + checkpoint_path + "' carries no model_config");
    ModelConfig cfg = ModelConfig::from_json(data.meta.at("model_config"));
    LoadedModel out;
    out.model = std::make_unique<LaraModel>(cfg, /*seed=*/0);
    std::vector<std::pair<std::string, Tensor>> params;
    for (const auto& [name, t] : data.tensors)
        if (name.rfind("opt.", 0) != 0) params.emplace_back(name, t);
    out.model->load_parameters(params);
    out.meta = data.meta;
    return out;
}

void check_config_compatible(const nlohmann::json& stored, const ModelConfig& requested) {
    const nlohmann::json req = requested.to_json();
    std::string diffs;
    for (auto it = req.begin(); it != req.end(); ++it) {
        if (!stored.contains(it.key()) || stored.at(it.key()) != it.value()) {
            diffs += diffs.empty() ? "" : ", ";
            diffs += it.key() + " (checkpoint: " +
                     (stored.contains(it.key()) ? stored.at(it.key()).dump() : "missing") +
                     ", requested: " + it.value().dump() + ")";
        }
    }
    check(diffs.empty(), "checkpoint/config mismatch in fields: " + diffs);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& cfg) {
    check(!cfg.dataset.empty(), "train: dataset path required");
    check(!cfg.out_dir.empty(), "train: out_dir required");
    if (cfg.threads > 0) set_num_threads(cfg.threads);
    fs::create_directories(cfg.out_dir);

    const DatasetMeta meta = read_dataset_meta(cfg.dataset);
    ModelConfig mcfg = cfg.model;
    mcfg.image_size = meta.resolution;
    mcfg.validate();

    // load and cache every scene
    std::vector<SceneCache> scenes;
    for (const auto& dir : list_scene_dirs(cfg.dataset)) {
        SceneCache cache = make_scene_cache(load_scene(dir), mcfg.views,
                                            cfg.seed ^ (0x5851F42D4C957F2DULL + scenes.size()));
        scenes.push_back(std::move(cache));
    }
    check(!scenes.empty(), "train: dataset has no scenes");

    LaraModel model(mcfg, cfg.seed);
    AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    RandomStream train_rng = RandomStream(cfg.seed).split(0xDA7A);
    int64_t start_step = 0;

    if (!cfg.resume.empty()) {
        CheckpointData data = load_checkpoint(cfg.resume);
        check_config_compatible(data.meta.at("model_config"), mcfg);
        std::vector<std::pair<std::string, Tensor>> params;
        for (const auto& [name, t] : data.tensors) {
            if (name.rfind("opt.m.", 0) == 0)
                opt.first_moments()[name.substr(6)] = t.value();
            else if (name.rfind("opt.v.", 0) == 0)
                opt.second_moments()[name.substr(6)] = t.value();
            else
                params.emplace_back(name, t);
        }
        model.load_parameters(params);
        opt.set_step_count(data.meta.value("opt_step", 0));
        start_step = data.meta.value("step", 0);
        train_rng.set_state(data.meta.value("rng_state", train_rng.state()));
    }

    std::ofstream log(fs::path(cfg.out_dir) / "train_log.ndjson", std::ios::app);
    const RasterizeConfig rcfg = default_raster_config(mcfg);
    const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * cfg.steps_per_epoch;
    const int64_t period_steps = cfg.cosine_period_epochs > 0
                                     ? static_cast<int64_t>(cfg.cosine_period_epochs) * cfg.steps_per_epoch
                                     : total_steps;

    auto eval_psnr = [&](bool held_out, int max_scenes) {
        double acc = 0;
        int count = 0;
        const int ns = std::min<int>(max_scenes, static_cast<int>(scenes.size()));
        for (int s = 0; s < ns; ++s) {
            SceneCache& scene = scenes[static_cast<size_t>(s)];
            std::vector<Tensor> in_images;
            std::vector<Camera> in_cams;
            for (int v : scene.input_views) {
                in_images.push_back(scene.images[static_cast<size_t>(v)]);
                in_cams.push_back(scene.data.cameras[static_cast<size_t>(v)]);
            }
            GaussianVolume vol = model.reconstruct(in_images, in_cams);
            CoarsePrimitives prims = model.decode_coarse(vol);
            std::vector<RenderResult> cr;
            for (const Camera& cam : in_cams)
                cr.push_back(rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, prims.sh,
                                       cam, rcfg));
            Tensor sh_fine = model.decode_fine(vol, prims, in_images, cr, in_cams);
            const int v_lo = held_out ? scene.data.n_train : 0;
            const int v_hi = held_out ? static_cast<int>(scene.data.cameras.size()) : scene.data.n_train;
            for (int v = v_lo; v < v_hi; ++v) {
                RenderResult fine = rasterize(prims.position, prims.rotation, prims.scale, prims.opacity,
                                              sh_fine, scene.data.cameras[static_cast<size_t>(v)], rcfg);
                acc += psnr(fine.rgb.value(), scene.images[static_cast<size_t>(v)].value());
                ++count;
            }
        }
        return count ? acc / count : 0.0;
    };

    TrainResult result;
    std::string last_ckpt;
    const auto t_start = std::chrono::steady_clock::now();
    for (int64_t step = start_step; step < total_steps; ++step) {
        const int epoch = static_cast<int>(step / cfg.steps_per_epoch);
        const bool reg = epoch >= cfg.reg_start_epoch;
        const double lr = cosine_lr(step % period_steps, period_steps, cfg.lr, cfg.lr_min);

        model.params().zero_grad();
        Tensor batch_loss;
        SampleLossParts parts_sum;
        int scene_id = -1;
        for (int b = 0; b < cfg.batch_size; ++b) {
            scene_id = static_cast<int>(train_rng.uniform_int(static_cast<int64_t>(scenes.size())));
            SceneCache& scene = scenes[static_cast<size_t>(scene_id)];
            // novel supervision views drawn from the non-input training views
            std::vector<int> candidates;
            for (int v = 0; v < scene.data.n_train; ++v)
                if (std::find(scene.input_views.begin(), scene.input_views.end(), v) ==
                    scene.input_views.end())
                    candidates.push_back(v);
            std::vector<int> novel;
            for (int k = 0; k < mcfg.views && !candidates.empty(); ++k) {
                const int64_t pick = train_rng.uniform_int(static_cast<int64_t>(candidates.size()));
                novel.push_back(candidates[static_cast<size_t>(pick)]);
                candidates.erase(candidates.begin() + static_cast<int64_t>(pick));
            }
            SampleLossParts parts =
                scene_sample_loss(model, scene, novel, reg, cfg.gamma_d, cfg.gamma_n, rcfg);
            batch_loss = batch_loss.defined() ? add(batch_loss, parts.total) : parts.total;
            parts_sum.recon_coarse += parts.recon_coarse;
            parts_sum.recon_fine += parts.recon_fine;
            parts_sum.ld += parts.ld;
            parts_sum.ln += parts.ln;
        }
        if (cfg.batch_size > 1) batch_loss = mul_scalar(batch_loss, 1.0 / cfg.batch_size);

        const double loss_value = batch_loss.item();
        if (!std::isfinite(loss_value)) {
            const std::string abort_path = (fs::path(cfg.out_dir) / "abort_last_good.ckpt").string();
            save_train_checkpoint(abort_path, model, &opt,
                                  {{"step", step}, {"epoch", epoch}, {"rng_state", train_rng.state()}});
            fail("train: non-finite loss at step " + std::to_string(step) + " on scene " +
                 std::to_string(scene_id) + "; last-good checkpoint written to " + abort_path);
        }
        batch_loss.backward();
        opt.set_lr(lr);
        opt.step(model.params().params());

        if (log.good()) {
            nlohmann::json rec{{"step", step},
                               {"epoch", epoch},
                               {"lr", lr},
                               {"loss", loss_value},
                               {"recon_coarse", parts_sum.recon_coarse / cfg.batch_size},
                               {"recon_fine", parts_sum.recon_fine / cfg.batch_size},
                               {"ld", parts_sum.ld / cfg.batch_size},
                               {"ln", parts_sum.ln / cfg.batch_size},
                               {"reg", reg}};
            log << rec.dump() << "\n";
        }

        const bool epoch_end = (step + 1) % cfg.steps_per_epoch == 0;
        if (epoch_end) {
            const int done_epoch = epoch + 1;
            if (done_epoch % cfg.checkpoint_every_epochs == 0 || step + 1 == total_steps) {
                char name[64];
                std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", done_epoch);
                last_ckpt = (fs::path(cfg.out_dir) / name).string();
                save_train_checkpoint(last_ckpt, model, &opt,
                                      {{"step", step + 1},
                                       {"epoch", done_epoch},
                                       {"rng_state", train_rng.state()}});
            }
            const bool want_val = done_epoch % cfg.val_every_epochs == 0 || step + 1 == total_steps;
            double train_psnr = 0, test_psnr = 0;
            if (want_val) {
                train_psnr = eval_psnr(false, cfg.val_scenes);
                test_psnr = eval_psnr(true, cfg.val_scenes);
                result.train_psnr = train_psnr;
                result.test_psnr = test_psnr;
                if (log.good()) {
                    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                                      t_start)
                                            .count();
                    nlohmann::json rec{{"epoch", done_epoch},
                                       {"val_train_psnr", train_psnr},
                                       {"val_test_psnr", test_psnr},
                                       {"elapsed_s", secs}};
                    log << rec.dump() << "\n";
                    log.flush();
                }
            }
            const bool targets_set = cfg.target_train_psnr > 0 && cfg.target_test_psnr > 0;
            if (targets_set && want_val && done_epoch >= cfg.min_epochs &&
                train_psnr >= cfg.target_train_psnr && test_psnr >= cfg.target_test_psnr) {
                result.steps_run = step + 1;
                result.epochs_run = done_epoch;
                break;
            }
        }
        result.steps_run = step + 1;
        result.epochs_run = epoch + 1;
    }

    if (last_ckpt.empty()) {
        last_ckpt = (fs::path(cfg.out_dir) / "final.ckpt").string();
        save_train_checkpoint(last_ckpt, model, &opt,
                              {{"step", result.steps_run},
                               {"epoch", result.epochs_run},
                               {"rng_state", train_rng.state()}});
    }
    // always leave a final checkpoint alias
    const std::string final_path = (fs::path(cfg.out_dir) / "final.ckpt").string();
    if (last_ckpt != final_path) {
        save_train_checkpoint(final_path, model, &opt,
                              {{"step", result.steps_run},
                               {"epoch", result.epochs_run},
                               {"rng_state", train_rng.state()}});
    }
    result.checkpoint_path = final_path;
    if (result.train_psnr == 0) result.train_psnr = eval_psnr(false, cfg.val_scenes);
    if (result.test_psnr == 0) result.test_psnr = eval_psnr(true, cfg.val_scenes);
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalSummary evaluate(LaraModel& model, const std::string& dataset_root, int max_scenes, uint64_t seed,
                     bool held_out_views) {
    const RasterizeConfig rcfg = default_raster_config(model.config());
    auto dirs = list_scene_dirs(dataset_root);
    if (max_scenes > 0 && static_cast<int>(dirs.size()) > max_scenes) dirs.resize(static_cast<size_t>(max_scenes));

    nlohmann::json per_scene = nlohmann::json::array();
    double sum_psnr = 0, sum_ssim = 0, sum_abs = 0, sum_a5 = 0, sum_a1 = 0, sum_a2 = 0;
    int64_t n_views = 0, n_depth = 0;
    for (const auto& dir : dirs) {
        SceneCache scene = make_scene_cache(load_scene(dir), model.config().views,
                                            seed ^ std::hash<std::string>{}(dir));
        ReconstructedScene recon;
        {
            std::vector<int> in = scene.input_views;
            recon = reconstruct_scene(model, scene.data, in, rcfg);
        }
        const int v_lo = held_out_views ? scene.data.n_train : 0;
        const int v_hi = held_out_views ? static_cast<int>(scene.data.cameras.size()) : scene.data.n_train;
        double s_psnr = 0, s_ssim = 0, s_abs = 0, s_a5 = 0, s_a1 = 0, s_a2 = 0;
        int s_views = 0, s_depth = 0;
        for (int v = v_lo; v < v_hi; ++v) {
            ViewMetrics m = render_and_score(model, scene, recon, v, rcfg);
            s_psnr += m.psnr_v;
            s_ssim += m.ssim_v;
            ++s_views;
            if (m.has_depth) {
                s_abs += m.depth.abs_err;
                s_a5 += m.depth.acc_005;
                s_a1 += m.depth.acc_01;
                s_a2 += m.depth.acc_02;
                ++s_depth;
            }
        }
        check(s_views > 0, "evaluate: scene '" + scene.data.id + "' has no evaluation views");
        nlohmann::json e{{"scene", scene.data.id},
                         {"psnr", s_psnr / s_views},
                         {"ssim", s_ssim / s_views}};
        if (s_depth > 0) {
            e["depth_abs"] = s_abs / s_depth;
            e["acc_005"] = s_a5 / s_depth;
            e["acc_01"] = s_a1 / s_depth;
            e["acc_02"] = s_a2 / s_depth;
        }
        per_scene.push_back(e);
        sum_psnr += s_psnr;
        sum_ssim += s_ssim;
        n_views += s_views;
        sum_abs += s_abs;
        sum_a5 += s_a5;
        sum_a1 += s_a1;
        sum_a2 += s_a2;
        n_depth += s_depth;
    }
    EvalSummary out;
    out.report["scenes"] = per_scene;
    nlohmann::json agg{{"psnr", n_views ? sum_psnr / n_views : 0.0},
                       {"ssim", n_views ? sum_ssim / n_views : 0.0}};
    if (n_depth > 0) {
        agg["depth_abs"] = sum_abs / n_depth;
        agg["acc_005"] = sum_a5 / n_depth;
        agg["acc_01"] = sum_a1 / n_depth;
        agg["acc_02"] = sum_a2 / n_depth;
    }
    out.report["aggregate"] = agg;
    return out;
}

// ---------------------------------------------------------------------------
// rendering / meshing commands
// ---------------------------------------------------------------------------

namespace {

void render_trajectory(const std::vector<Gaussian2D>& splats, const std::vector<Camera>& cams,
                       const std::string& out_dir, const RasterizeConfig& rcfg) {
    fs::create_directories(out_dir);
    for (size_t i = 0; i < cams.size(); ++i) {
        RenderResult r = rasterize_gaussians(splats, cams[i], rcfg);
        char name[64];
        std::snprintf(name, sizeof(name), "render_%03zu.png", i);
        write_png((fs::path(out_dir) / name).string(), tensor_to_image(r.rgb));
        std::snprintf(name, sizeof(name), "depth_%03zu.pfm", i);
        write_pfm((fs::path(out_dir) / name).string(), tensor_to_image(r.depth));
        std::snprintf(name, sizeof(name), "normal_%03zu.pfm", i);
        write_pfm((fs::path(out_dir) / name).string(), tensor_to_image(r.normal));
    }
}

}  // namespace

void render_views_cmd(const std::string& checkpoint, const std::string& scene_dir,
                      const std::string& out_dir, int orbit_views_per_ring,
                      const std::vector<double>& elevations, double orbit_radius) {
    LoadedModel lm = load_model(checkpoint);
    SceneData scene = load_scene(scene_dir);
    check(static_cast<int>(scene.cameras.size()) >= lm.model->config().views,
          "render: scene has fewer views than the model needs");
    const RasterizeConfig rcfg = default_raster_config(lm.model->config());
    std::vector<Camera> train_cams(scene.cameras.begin(), scene.cameras.begin() + scene.n_train);
    std::vector<int> inputs = select_input_views(train_cams, lm.model->config().views, 1);
    ReconstructedScene recon = reconstruct_scene(*lm.model, scene, inputs, rcfg);
    check(lm.model->reconstruct_count() == 1, "render: reconstruct must run exactly once");

    std::vector<Gaussian2D> splats = primitives_to_gaussians(recon.coarse, recon.sh_fine);
    fs::create_directories(out_dir);
    save_gaussians((fs::path(out_dir) / "splats.lara-gs1").string(), splats, lm.model->config().sh_order);

    const Camera& ref = scene.cameras[0];
    std::vector<Camera> traj = orbit_trajectory(elevations, orbit_views_per_ring, orbit_radius, {0, 0, 0},
                                                ref.fx, ref.width, ref.height);
    render_trajectory(splats, traj, out_dir, rcfg);
}

void render_splats_cmd(const std::string& splat_file, const std::string& out_dir, int width, int height,
                       int orbit_views_per_ring, const std::vector<double>& elevations, double orbit_radius,
                       double focal_factor) {
    int sh_order = 2;
    std::vector<Gaussian2D> splats = load_gaussians(splat_file, &sh_order);
    RasterizeConfig rcfg;
    rcfg.sh_order = sh_order;
    std::vector<Camera> traj = orbit_trajectory(elevations, orbit_views_per_ring, orbit_radius, {0, 0, 0},
                                                focal_factor * width, width, height);
    render_trajectory(splats, traj, out_dir, rcfg);
}

void mesh_cmd(const std::string& checkpoint, const std::string& scene_dir, const std::string& out_ply,
              int tsdf_resolution, double trunc, int orbit_views_per_ring, double orbit_radius,
              int render_size) {
    LoadedModel lm = load_model(checkpoint);
    SceneData scene = load_scene(scene_dir);
    const RasterizeConfig rcfg = default_raster_config(lm.model->config());
    std::vector<Camera> train_cams(scene.cameras.begin(), scene.cameras.begin() + scene.n_train);
    std::vector<int> inputs = select_input_views(train_cams, lm.model->config().views, 1);
    ReconstructedScene recon = reconstruct_scene(*lm.model, scene, inputs, rcfg);
    std::vector<Gaussian2D> splats = primitives_to_gaussians(recon.coarse, recon.sh_fine);

    const Camera& ref = scene.cameras[0];
    const int size = render_size > 0 ? render_size : ref.width;
    const double focal = ref.fx * size / ref.width;
    std::vector<Camera> traj =
        orbit_trajectory({30.0, 0.0, -30.0}, orbit_views_per_ring, orbit_radius, {0, 0, 0}, focal, size, size);

    TsdfVolume volume(tsdf_resolution, trunc);
    for (const Camera& cam : traj) {
        RenderResult r = rasterize_gaussians(splats, cam, rcfg);
        tsdf_integrate(volume, tensor_to_image(r.depth), tensor_to_image(r.rgb),
                       tensor_to_image(r.alpha), cam);
    }
    TriangleMesh mesh = extract_mesh(volume);
    write_ply(out_ply, mesh);
    const std::string obj = out_ply.substr(0, out_ply.find_last_of('.')) + ".obj";
    write_obj(obj, mesh);
}

// ---------------------------------------------------------------------------
// direct fit (raw Gaussian volume, no transformer)
// ---------------------------------------------------------------------------

DirectFitResult direct_fit_sphere(const DirectFitConfig& cfg) {
    const SceneSpec scene = textured_sphere_scene(cfg.sphere_radius);
    const double focal = 0.9 * cfg.image_size;
    std::vector<Camera> cams;
    std::vector<Tensor> targets;
    RandomStream rng(cfg.seed);
    for (int v = 0; v < cfg.views; ++v) {
        const double az = 360.0 * v / cfg.views;
        const double el = (v % 2 == 0) ? 22.0 : -14.0;
        const double rad = 2.4;
        const Vec3 pos{rad * std::cos(el * M_PI / 180) * std::cos(az * M_PI / 180),
                       rad * std::cos(el * M_PI / 180) * std::sin(az * M_PI / 180),
                       rad * std::sin(el * M_PI / 180)};
        cams.push_back(look_at_camera(pos, {0, 0, 0}, {0, 0, 1}, focal, cfg.image_size, cfg.image_size));
        Image rgb;
        render_scene(scene, cams.back(), &rgb, nullptr);
        targets.push_back(image_to_tensor(rgb));
    }

    const VoxelGrid grid{cfg.grid_res, {-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}};
    const int64_t n = grid.count() * cfg.prims_per_voxel;
    const int64_t head = 10 + 3 * 9;
    ParamStore store;
    Tensor raw = store.create("volume_raw", {n, head});
    {
        auto& v = raw.value();
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t k = 0; k < head; ++k) v[static_cast<size_t>(i * head + k)] = 0.1 * trunc_normal(rng, 1.0);
            v[static_cast<size_t>(i * head + 3)] = -2.0;  // opacity logit
            v[static_cast<size_t>(i * head + 4)] = 1.0;   // quaternion w
            v[static_cast<size_t>(i * head + 8)] = -1.5;  // scale logits
            v[static_cast<size_t>(i * head + 9)] = -1.5;
        }
    }
    const double offset_radius = 1.0 / cfg.grid_res;
    RasterizeConfig rcfg;
    rcfg.sh_order = 2;

    AdamW opt({.lr = cfg.lr});
    DirectFitResult result;
    auto eval_full_psnr = [&]() {
        CoarsePrimitives prims = activate_primitives(raw, grid, cfg.prims_per_voxel, offset_radius, 9);
        double acc = 0;
        for (int v = 0; v < cfg.views; ++v) {
            RenderResult r = rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, prims.sh,
                                       cams[static_cast<size_t>(v)], rcfg);
            acc += psnr(r.rgb.value(), targets[static_cast<size_t>(v)].value());
        }
        return acc / cfg.views;
    };

    for (int step = 0; step < cfg.steps; ++step) {
        store.zero_grad();
        CoarsePrimitives prims = activate_primitives(raw, grid, cfg.prims_per_voxel, offset_radius, 9);
        Tensor loss;
        for (int k = 0; k < cfg.views_per_step; ++k) {
            const int v = static_cast<int>(rng.uniform_int(cfg.views));
            RenderResult r = rasterize(prims.position, prims.rotation, prims.scale, prims.opacity, prims.sh,
                                       cams[static_cast<size_t>(v)], rcfg);
            Tensor l = recon_loss(r.rgb, targets[static_cast<size_t>(v)]);
            loss = loss.defined() ? add(loss, l) : l;
        }
        loss = mul_scalar(loss, 1.0 / cfg.views_per_step);
        check(std::isfinite(loss.item()), "direct_fit: non-finite loss at step " + std::to_string(step));
        loss.backward();
        opt.set_lr(cosine_lr(step, cfg.steps, cfg.lr, cfg.lr * 0.05));
        opt.step(store.params());
        result.steps_run = step + 1;
        if (cfg.target_psnr > 0 && (step + 1) % cfg.eval_every == 0) {
            result.final_psnr = eval_full_psnr();
            if (result.final_psnr >= cfg.target_psnr) return result;
        }
    }
    result.final_psnr = eval_full_psnr();
    return result;
}

// ---------------------------------------------------------------------------
// gradient-check battery
// ---------------------------------------------------------------------------

GradCheckSummary run_grad_check_battery(uint64_t seed, int scenes, int splats, double tol) {
    GradCheckSummary summary;
    summary.report = nlohmann::json::array();
    RandomStream rng(seed);
    RasterizeConfig rcfg;
    rcfg.g_cutoff = 0;             // culling-free configuration keeps the loss smooth
    rcfg.stop_transmittance = 0;
    rcfg.background = {1, 1, 1};

    for (int s = 0; s < scenes; ++s) {
        const int w = 16, h = 16;
        const double az = rng.uniform(0, 2 * M_PI);
        const double el = rng.uniform(-0.7, 0.7);
        const Vec3 pos{2.2 * std::cos(el) * std::cos(az), 2.2 * std::cos(el) * std::sin(az),
                       2.2 * std::sin(el)};
        Camera cam = look_at_camera(pos, {0, 0, 0}, {0, 0, 1}, 0.9 * w, w, h);

        const int64_t n = splats;
        std::vector<double> pv, qv, sv, av, shv;
        for (int64_t i = 0; i < n; ++i) {
            for (int k = 0; k < 3; ++k) pv.push_back(rng.uniform(-0.35, 0.35));
            for (int k = 0; k < 4; ++k) qv.push_back(rng.normal());
            sv.push_back(rng.uniform(0.08, 0.25));
            sv.push_back(rng.uniform(0.08, 0.25));
            av.push_back(rng.uniform(0.15, 0.85));
            for (int c = 0; c < 3; ++c) {
                shv.push_back(rng.uniform(-0.3, 0.3));
                for (int l = 1; l < 9; ++l) shv.push_back(rng.uniform(-0.04, 0.04));
            }
        }
        Tensor p = Tensor::from_vector({n, 3}, pv, true);
        Tensor q = Tensor::from_vector({n, 4}, qv, true);
        Tensor sc = Tensor::from_vector({n, 2}, sv, true);
        Tensor a = Tensor::from_vector({n}, av, true);
        Tensor sh = Tensor::from_vector({n, 27}, shv, true);

        // a fixed random target image
        std::vector<double> tv(static_cast<size_t>(w) * h * 3);
        for (auto& x : tv) x = rng.uniform(0, 1);
        Tensor target = Tensor::from_vector({h, w, 3}, tv);

        auto f = [&]() {
            RenderResult r = rasterize(p, q, sc, a, sh, cam, rcfg);
            Tensor loss = mse_loss(r.rgb, target);
            loss = add(loss, mul_scalar(distortion_loss(r), 1000.0));
            loss = add(loss, mul_scalar(normal_consistency_loss(r, depth_to_normal(r.depth, cam)), 0.2));
            return loss;
        };
        auto report = grad_check(f, {{"position", p}, {"rotation", q}, {"scale", sc}, {"opacity", a},
                                     {"sh", sh}},
                                 1e-4, tol);
        nlohmann::json entry{{"scene", s}};
        for (const auto& e : report.entries) entry[e.name] = e.max_rel_err;
        summary.report.push_back(entry);
        summary.max_rel_err = std::max(summary.max_rel_err, report.max_rel_err);
    }
    summary.passed = summary.max_rel_err < tol;
    return summary;
}

}  // namespace lara
