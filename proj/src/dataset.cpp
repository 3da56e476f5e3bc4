#include "lara/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace lara {

namespace {

std::string view_name(const char* stem, int idx, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d.%s", stem, idx, ext);
    return buf;
}

Camera orbit_camera(double azimuth_deg, double elevation_deg, double radius, double focal, int res) {
    const double az = azimuth_deg * M_PI / 180.0;
    const double el = elevation_deg * M_PI / 180.0;
    const Vec3 pos{radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
                   radius * std::sin(el)};
    return look_at_camera(pos, {0, 0, 0}, {0, 0, 1}, focal, res, res);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "cannot open '" + path + "' for writing");
    f << text;
    check(f.good(), "write failed for '" + path + "'");
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "cannot open '" + path + "'");
    nlohmann::json j;
    f >> j;
    return j;
}

}  // namespace

void write_cameras_json(const std::string& path, const std::vector<Camera>& cams,
                        const std::vector<std::string>& image_paths,
                        const std::vector<std::string>& depth_paths) {
    nlohmann::json arr = nlohmann::json::array();
    for (size_t i = 0; i < cams.size(); ++i) {
        nlohmann::json e;
        e["K"] = cams[i].intrinsics_matrix();
        e["w2c"] = cams[i].world_to_cam_matrix();
        e["width"] = cams[i].width;
        e["height"] = cams[i].height;
        e["image_path"] = image_paths[i];
        if (!depth_paths.empty()) e["depth_path"] = depth_paths[i];
        arr.push_back(e);
    }
    write_text_file(path, arr.dump(1));
}

std::vector<Camera> read_cameras_json(const std::string& path, std::vector<std::string>* image_paths,
                                      std::vector<std::string>* depth_paths) {
    nlohmann::json arr = read_json_file(path);
    check(arr.is_array(), "cameras file '" + path + "' must be a JSON array");
    std::vector<Camera> cams;
    for (const auto& e : arr) {
        auto k = e.at("K").get<std::array<double, 9>>();
        auto w2c = e.at("w2c").get<std::array<double, 16>>();
        cams.push_back(Camera::from_matrices(k, w2c, e.at("width"), e.at("height")));
        if (image_paths) image_paths->push_back(e.value("image_path", ""));
        if (depth_paths) depth_paths->push_back(e.value("depth_path", ""));
    }
    return cams;
}

void gen_dataset(const DatasetSpec& spec) {
    check(spec.n_scenes > 0 && spec.views_per_scene > 0, "gen_dataset: counts must be positive");
    std::error_code ec;
    fs::create_directories(fs::path(spec.out_dir) / "scenes", ec);
    check(!ec, "gen_dataset: cannot create output directory '" + spec.out_dir + "'");

    nlohmann::json meta{{"n_scenes", spec.n_scenes},
                        {"views_per_scene", spec.views_per_scene},
                        {"test_views", spec.test_views},
                        {"resolution", spec.resolution},
                        {"seed", spec.seed}};
    write_text_file((fs::path(spec.out_dir) / "meta.json").string(), meta.dump(1));

    RandomStream root(spec.seed);
    const double focal = spec.focal_factor * spec.resolution;
    for (int s = 0; s < spec.n_scenes; ++s) {
        RandomStream rng = root.split(static_cast<uint64_t>(s) + 1);
        const SceneSpec scene = random_scene_spec(rng);

        char id[32];
        std::snprintf(id, sizeof(id), "%04d", s);
        const fs::path dir = fs::path(spec.out_dir) / "scenes" / id;
        fs::create_directories(dir, ec);
        check(!ec, "gen_dataset: cannot create scene directory");

        const int total_views = spec.views_per_scene + spec.test_views;
        std::vector<Camera> cams;
        std::vector<std::string> img_paths, depth_paths;
        for (int v = 0; v < total_views; ++v) {
            double azimuth, elevation;
            if (v < spec.views_per_scene) {
                azimuth = 360.0 * v / spec.views_per_scene + rng.uniform(-8.0, 8.0);
                // alternate above/below the equator for hemisphere-ish coverage
                const double base = (v % 2 == 0) ? 18.0 : -12.0;
                elevation = base + rng.uniform(-spec.elevation_jitter, spec.elevation_jitter);
            } else {
                // held-out views between the training azimuths
                const int t = v - spec.views_per_scene;
                azimuth = 360.0 * (t + 0.5) / std::max(1, spec.test_views) + rng.uniform(-5.0, 5.0);
                elevation = rng.uniform(-20.0, 30.0);
            }
            const double radius = spec.orbit_radius * rng.uniform(0.97, 1.03);
            cams.push_back(orbit_camera(azimuth, elevation, radius, focal, spec.resolution));

            Image rgb, depth;
            render_scene(scene, cams.back(), &rgb, &depth);
            const std::string img_name = view_name("rgb", v, "png");
            const std::string depth_name = view_name("depth", v, "pfm");
            write_png((dir / img_name).string(), rgb);
            write_pfm((dir / depth_name).string(), depth);
            img_paths.push_back(img_name);
            depth_paths.push_back(depth_name);
        }
        write_cameras_json((dir / "cameras.json").string(), cams, img_paths, depth_paths);
        write_text_file((dir / "scene.json").string(), scene.to_json().dump(1));
    }
}

DatasetMeta read_dataset_meta(const std::string& root) {
    nlohmann::json j = read_json_file((fs::path(root) / "meta.json").string());
    DatasetMeta m;
    m.n_scenes = j.at("n_scenes");
    m.views_per_scene = j.at("views_per_scene");
    m.test_views = j.at("test_views");
    m.resolution = j.at("resolution");
    m.seed = j.at("seed");
    return m;
}

std::vector<std::string> list_scene_dirs(const std::string& root) {
    std::vector<std::string> dirs;
    const fs::path scenes = fs::path(root) / "scenes";
    check(fs::exists(scenes), "dataset '" + root + "' has no scenes directory");
    for (const auto& e : fs::directory_iterator(scenes)) {
        if (e.is_directory()) dirs.push_back(e.path().string());
    }
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

SceneData load_scene(const std::string& scene_dir, bool load_images) {
    SceneData data;
    data.dir = scene_dir;
    data.id = fs::path(scene_dir).filename().string();
    std::vector<std::string> img_paths, depth_paths;
    data.cameras = read_cameras_json((fs::path(scene_dir) / "cameras.json").string(), &img_paths,
                                     &depth_paths);
    const fs::path meta_path = fs::path(scene_dir).parent_path().parent_path() / "meta.json";
    if (fs::exists(meta_path)) {
        DatasetMeta meta = read_dataset_meta(fs::path(scene_dir).parent_path().parent_path().string());
        data.n_train = std::min<int>(meta.views_per_scene, static_cast<int>(data.cameras.size()));
    } else {
        data.n_train = static_cast<int>(data.cameras.size());
    }
    const fs::path scene_json = fs::path(scene_dir) / "scene.json";
    if (fs::exists(scene_json)) data.spec = SceneSpec::from_json(read_json_file(scene_json.string()));
    if (load_images) {
        for (size_t v = 0; v < data.cameras.size(); ++v) {
            data.images.push_back(read_png((fs::path(scene_dir) / img_paths[v]).string()));
            if (!depth_paths[v].empty())
                data.depths.push_back(read_pfm((fs::path(scene_dir) / depth_paths[v]).string()));
        }
    }
    return data;
}

std::vector<int> select_input_views(const std::vector<Camera>& cameras, int m, uint64_t seed) {
    check(static_cast<int>(cameras.size()) >= m, "select_input_views: need at least " + std::to_string(m) +
                                                     " cameras");
    if (static_cast<int>(cameras.size()) == m) {
        std::vector<int> all(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) all[static_cast<size_t>(i)] = i;
        return all;
    }
    KMeansResult res = kmeans_cluster_cameras(cameras, m, seed);
    std::vector<int> picks = res.representatives;
    std::sort(picks.begin(), picks.end());
    return picks;
}

}  // namespace lara
