#pragma once

#include <string>
#include <vector>

#include "lara/camera.hpp"
#include "lara/imageio.hpp"
#include "lara/raytracer.hpp"

namespace lara {

// Dataset layout: <root>/meta.json, <root>/scenes/<id>/{cameras.json,
// scene.json, rgb_###.png, depth_###.pfm}. The first `views_per_scene`
// entries of cameras.json are training views, the remaining `test_views`
// are held out.

struct DatasetSpec {
    std::string out_dir;
    int n_scenes = 20;
    int views_per_scene = 16;
    int test_views = 4;
    int resolution = 64;
    uint64_t seed = 1;
    double orbit_radius = 2.5;
    double focal_factor = 0.9;       // focal = factor * resolution
    double elevation_jitter = 12.0;  // degrees
};

void gen_dataset(const DatasetSpec& spec);

struct SceneData {
    std::string id;
    std::string dir;
    std::vector<Camera> cameras;
    std::vector<Image> images;   // RGB in [0,1]
    std::vector<Image> depths;   // camera-z, 0 at background
    int n_train = 0;             // cameras[0..n_train) are training views
    SceneSpec spec;              // procedural description (for analytic checks)
};

struct DatasetMeta {
    int n_scenes = 0;
    int views_per_scene = 0;
    int test_views = 0;
    int resolution = 0;
    uint64_t seed = 0;
};

DatasetMeta read_dataset_meta(const std::string& root);
std::vector<std::string> list_scene_dirs(const std::string& root);
SceneData load_scene(const std::string& scene_dir, bool load_images = true);

// Camera-file schema helpers (JSON array of {K, w2c, width, height,
// image_path, depth_path}).
void write_cameras_json(const std::string& path, const std::vector<Camera>& cams,
                        const std::vector<std::string>& image_paths,
                        const std::vector<std::string>& depth_paths);
std::vector<Camera> read_cameras_json(const std::string& path, std::vector<std::string>* image_paths,
                                      std::vector<std::string>* depth_paths);

// K-means representatives of the training cameras (geometry module) used as
// feed-forward input views.
std::vector<int> select_input_views(const std::vector<Camera>& cameras, int m, uint64_t seed);

}  // namespace lara
