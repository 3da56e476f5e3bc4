#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "lara/checkpoint.hpp"
#include "lara/dataset.hpp"
#include "lara/losses.hpp"
#include "lara/mesh.hpp"
#include "lara/model.hpp"
#include "lara/pipeline.hpp"
#include "lara/rasterizer.hpp"

namespace py = pybind11;
using namespace lara;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const DArray& a) {
    return std::vector<double>(a.data(), a.data() + a.size());
}

DArray make_array(const std::vector<double>& data, const std::vector<py::ssize_t>& shape) {
    DArray out(shape);
    std::copy(data.begin(), data.end(), out.mutable_data());
    return out;
}

Camera camera_from_arrays(const DArray& intrinsics, const DArray& world_to_cam, int width, int height) {
    if (intrinsics.size() != 9 || world_to_cam.size() != 16)
        throw std::invalid_argument("camera: K must have 9 entries and w2c 16");
    std::array<double, 9> k{};
    std::array<double, 16> m{};
    std::copy(intrinsics.data(), intrinsics.data() + 9, k.begin());
    std::copy(world_to_cam.data(), world_to_cam.data() + 16, m.begin());
    return Camera::from_matrices(k, m, width, height);
}

std::vector<Gaussian2D> splats_from_arrays(const DArray& position, const DArray& rotation,
                                           const DArray& scale, const DArray& opacity, const DArray& sh) {
    const py::ssize_t n = position.shape(0);
    if (rotation.shape(0) != n || scale.shape(0) != n || opacity.shape(0) != n || sh.shape(0) != n)
        throw std::invalid_argument("splats: leading dimensions disagree");
    std::vector<Gaussian2D> out(static_cast<size_t>(n));
    if (n == 0) return out;
    const int nsh = static_cast<int>(sh.size() / n);
    for (py::ssize_t i = 0; i < n; ++i) {
        Gaussian2D& g = out[static_cast<size_t>(i)];
        g.position = {position.at(i, 0), position.at(i, 1), position.at(i, 2)};
        for (int k = 0; k < 4; ++k) g.rotation[static_cast<size_t>(k)] = rotation.at(i, k);
        g.scale_u = scale.at(i, 0);
        g.scale_v = scale.at(i, 1);
        g.opacity = opacity.at(i);
        for (int k = 0; k < nsh && k < 27; ++k) g.sh[static_cast<size_t>(k)] = sh.data()[i * nsh + k];
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_lara, m) {
    m.doc() = "feed-forward 2D-Gaussian radiance fields: core operations";

    m.def(
        "gen_dataset",
        [](const std::string& out_dir, int scenes, int views, int test_views, int resolution,
           uint64_t seed) {
            DatasetSpec spec;
            spec.out_dir = out_dir;
            spec.n_scenes = scenes;
            spec.views_per_scene = views;
            spec.test_views = test_views;
            spec.resolution = resolution;
            spec.seed = seed;
            gen_dataset(spec);
        },
        py::arg("out_dir"), py::arg("scenes") = 20, py::arg("views") = 16, py::arg("test_views") = 4,
        py::arg("resolution") = 64, py::arg("seed") = 1, "Generate a procedural dataset.");

    m.def(
        "rasterize",
        [](const DArray& position, const DArray& rotation, const DArray& scale, const DArray& opacity,
           const DArray& sh, const DArray& intrinsics, const DArray& world_to_cam, int width, int height,
           int sh_order, double g_cutoff, double stop_transmittance) {
            Camera cam = camera_from_arrays(intrinsics, world_to_cam, width, height);
            RasterizeConfig cfg;
            cfg.sh_order = sh_order;
            cfg.g_cutoff = g_cutoff;
            cfg.stop_transmittance = stop_transmittance;
            auto splats = splats_from_arrays(position, rotation, scale, opacity, sh);
            RenderResult r = rasterize_gaussians(splats, cam, cfg);
            py::dict out;
            out["rgb"] = make_array(r.rgb.value(), {height, width, 3});
            out["depth"] = make_array(r.depth.value(), {height, width});
            out["alpha"] = make_array(r.alpha.value(), {height, width});
            out["normal"] = make_array(r.normal.value(), {height, width, 3});
            return out;
        },
        py::arg("position"), py::arg("rotation"), py::arg("scale"), py::arg("opacity"), py::arg("sh"),
        py::arg("K"), py::arg("w2c"), py::arg("width"), py::arg("height"), py::arg("sh_order") = 2,
        py::arg("g_cutoff") = 1.0 / 255.0, py::arg("stop_transmittance") = 1e-4,
        "Differentiable-core tile rasterization of 2D Gaussian surfels (forward buffers).");

    m.def(
        "sh_eval",
        [](const DArray& coeffs, const DArray& dirs, int sh_order) {
            const py::ssize_t n = dirs.shape(0);
            std::vector<double> out;
            out.reserve(static_cast<size_t>(n) * 3);
            for (py::ssize_t i = 0; i < n; ++i) {
                Vec3 d = normalized({dirs.at(i, 0), dirs.at(i, 1), dirs.at(i, 2)});
                Vec3 c = sh_eval(coeffs.data(), d, sh_order);
                out.insert(out.end(), {c.x, c.y, c.z});
            }
            return make_array(out, {n, 3});
        },
        py::arg("coeffs"), py::arg("dirs"), py::arg("sh_order") = 2);

    m.def(
        "plucker_rays",
        [](const DArray& intrinsics, const DArray& world_to_cam, int width, int height,
           const DArray& pixels) {
            Camera cam = camera_from_arrays(intrinsics, world_to_cam, width, height);
            const py::ssize_t n = pixels.shape(0);
            std::vector<double> dirs, moments;
            for (py::ssize_t i = 0; i < n; ++i) {
                PluckerRay ray = plucker_ray(cam, pixels.at(i, 0), pixels.at(i, 1));
                dirs.insert(dirs.end(), {ray.d.x, ray.d.y, ray.d.z});
                moments.insert(moments.end(), {ray.m.x, ray.m.y, ray.m.z});
            }
            return py::make_tuple(make_array(dirs, {n, 3}), make_array(moments, {n, 3}));
        },
        py::arg("K"), py::arg("w2c"), py::arg("width"), py::arg("height"), py::arg("pixels"));

    m.def(
        "project_points",
        [](const DArray& intrinsics, const DArray& world_to_cam, int width, int height,
           const DArray& points) {
            Camera cam = camera_from_arrays(intrinsics, world_to_cam, width, height);
            const py::ssize_t n = points.shape(0);
            std::vector<double> uv, z, valid;
            for (py::ssize_t i = 0; i < n; ++i) {
                Projection pr = project_point({points.at(i, 0), points.at(i, 1), points.at(i, 2)}, cam);
                uv.insert(uv.end(), {pr.u, pr.v});
                z.push_back(pr.depth);
                valid.push_back(pr.in_front ? 1.0 : 0.0);
            }
            return py::make_tuple(make_array(uv, {n, 2}), make_array(z, {n}), make_array(valid, {n}));
        },
        py::arg("K"), py::arg("w2c"), py::arg("width"), py::arg("height"), py::arg("points"));

    m.def(
        "kmeans_points",
        [](const DArray& points, int k, uint64_t seed) {
            const py::ssize_t n = points.shape(0);
            std::vector<Vec3> pts;
            for (py::ssize_t i = 0; i < n; ++i)
                pts.push_back({points.at(i, 0), points.at(i, 1), points.at(i, 2)});
            KMeansResult res = kmeans_points(pts, k, seed);
            return py::make_tuple(res.assignment, res.representatives, res.objective);
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 1);

    m.def(
        "psnr",
        [](const DArray& a, const DArray& b) { return psnr(to_vector(a), to_vector(b)); },
        py::arg("pred"), py::arg("target"));

    m.def(
        "ssim",
        [](const DArray& a, const DArray& b) {
            if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("ssim: expected [H,W,3]");
            Shape shape{a.shape(0), a.shape(1), 3};
            return ssim_value(Tensor::from_vector(shape, to_vector(a)),
                              Tensor::from_vector(shape, to_vector(b)));
        },
        py::arg("pred"), py::arg("target"));

    m.def(
        "depth_metrics",
        [](const DArray& pred, const DArray& gt, const DArray& mask) {
            std::vector<uint8_t> m8(static_cast<size_t>(mask.size()));
            for (py::ssize_t i = 0; i < mask.size(); ++i) m8[static_cast<size_t>(i)] = mask.data()[i] > 0.5;
            DepthMetrics dm = depth_metrics(to_vector(pred), to_vector(gt), m8);
            py::dict out;
            out["abs_err"] = dm.abs_err;
            out["acc_005"] = dm.acc_005;
            out["acc_01"] = dm.acc_01;
            out["acc_02"] = dm.acc_02;
            out["pixels"] = dm.pixels;
            return out;
        },
        py::arg("pred"), py::arg("gt"), py::arg("mask"));

    m.def("distortion_loss_ray", &distortion_loss_ray, py::arg("weights"), py::arg("zs"));

    m.def(
        "orbit_trajectory",
        [](const std::vector<double>& elevations, int per_ring, double radius, double focal, int width,
           int height) {
            auto cams = orbit_trajectory(elevations, per_ring, radius, {0, 0, 0}, focal, width, height);
            py::list out;
            for (const auto& cam : cams) {
                auto k = cam.intrinsics_matrix();
                auto w2c = cam.world_to_cam_matrix();
                out.append(py::make_tuple(make_array({k.begin(), k.end()}, {3, 3}),
                                          make_array({w2c.begin(), w2c.end()}, {4, 4})));
            }
            return out;
        },
        py::arg("elevations"), py::arg("per_ring"), py::arg("radius"), py::arg("focal"), py::arg("width"),
        py::arg("height"));

    m.def(
        "tsdf_fuse_mesh",
        [](const py::list& depths, const py::list& rgbs, const py::list& alphas, const py::list& cam_ks,
           const py::list& cam_w2cs, int width, int height, int resolution, double trunc) {
            TsdfVolume volume(resolution, trunc);
            for (size_t i = 0; i < depths.size(); ++i) {
                DArray d = depths[i].cast<DArray>();
                DArray c = rgbs[i].cast<DArray>();
                DArray a = alphas[i].cast<DArray>();
                Camera cam = camera_from_arrays(cam_ks[i].cast<DArray>(), cam_w2cs[i].cast<DArray>(),
                                                width, height);
                Image di{width, height, 1, to_vector(d)};
                Image ci{width, height, 3, to_vector(c)};
                Image ai{width, height, 1, to_vector(a)};
                tsdf_integrate(volume, di, ci, ai, cam);
            }
            TriangleMesh mesh = extract_mesh(volume);
            std::vector<double> verts, colors;
            std::vector<int> faces;
            for (const auto& v : mesh.vertices) verts.insert(verts.end(), {v.x, v.y, v.z});
            for (const auto& c : mesh.colors) colors.insert(colors.end(), {c.x, c.y, c.z});
            for (const auto& f : mesh.faces) faces.insert(faces.end(), {f[0], f[1], f[2]});
            py::dict out;
            out["vertices"] = make_array(verts, {static_cast<py::ssize_t>(mesh.vertices.size()), 3});
            out["colors"] = make_array(colors, {static_cast<py::ssize_t>(mesh.colors.size()), 3});
            py::array_t<int> farr({static_cast<py::ssize_t>(mesh.faces.size()), static_cast<py::ssize_t>(3)});
            std::copy(faces.begin(), faces.end(), farr.mutable_data());
            out["faces"] = farr;
            out["watertight"] = mesh_is_watertight(mesh);
            return out;
        },
        py::arg("depths"), py::arg("rgbs"), py::arg("alphas"), py::arg("Ks"), py::arg("w2cs"),
        py::arg("width"), py::arg("height"), py::arg("resolution") = 128, py::arg("trunc") = 0.02,
        "TSDF-fuse RGBD views and extract a textured triangle mesh.");

    m.def(
        "train",
        [](const std::string& config_json) {
            TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(config_json));
            TrainResult res = train(cfg);
            py::dict out;
            out["checkpoint"] = res.checkpoint_path;
            out["steps"] = res.steps_run;
            out["epochs"] = res.epochs_run;
            out["train_psnr"] = res.train_psnr;
            out["test_psnr"] = res.test_psnr;
            return out;
        },
        py::arg("config_json"), "Run the training loop from a JSON config string.");

    m.def(
        "evaluate",
        [](const std::string& checkpoint, const std::string& dataset, int max_scenes, bool held_out) {
            LoadedModel lm = load_model(checkpoint);
            EvalSummary s = evaluate(*lm.model, dataset, max_scenes, 1, held_out);
            return s.report.dump();
        },
        py::arg("checkpoint"), py::arg("dataset"), py::arg("max_scenes") = 0, py::arg("held_out") = true);

    py::class_<LaraModel>(m, "Model")
        .def(py::init([](const std::string& checkpoint) {
                 LoadedModel lm = load_model(checkpoint);
                 return std::move(lm.model);
             }),
             py::arg("checkpoint"))
        .def_property_readonly("config_json",
                               [](const LaraModel& model) { return model.config().to_json().dump(); })
        .def(
            "reconstruct_splats",
            [](LaraModel& model, const py::list& images, const py::list& cam_ks, const py::list& cam_w2cs,
               int width, int height) {
                std::vector<Tensor> imgs;
                std::vector<Camera> cams;
                for (size_t i = 0; i < images.size(); ++i) {
                    DArray a = images[i].cast<DArray>();
                    imgs.push_back(Tensor::from_vector({height, width, 3}, to_vector(a)));
                    cams.push_back(camera_from_arrays(cam_ks[i].cast<DArray>(),
                                                      cam_w2cs[i].cast<DArray>(), width, height));
                }
                GaussianVolume vol = model.reconstruct(imgs, cams);
                CoarsePrimitives prims = model.decode_coarse(vol);
                const RasterizeConfig rcfg = default_raster_config(model.config());
                std::vector<RenderResult> renders;
                for (const auto& cam : cams)
                    renders.push_back(rasterize(prims.position, prims.rotation, prims.scale, prims.opacity,
                                                prims.sh, cam, rcfg));
                Tensor sh_fine = model.decode_fine(vol, prims, imgs, renders, cams);
                const int64_t n = prims.position.shape()[0];
                py::dict out;
                out["position"] = make_array(prims.position.value(), {n, 3});
                out["rotation"] = make_array(prims.rotation.value(), {n, 4});
                out["scale"] = make_array(prims.scale.value(), {n, 2});
                out["opacity"] = make_array(prims.opacity.value(), {n});
                out["sh"] = make_array(sh_fine.value(), {n, sh_fine.shape()[1]});
                return out;
            },
            py::arg("images"), py::arg("Ks"), py::arg("w2cs"), py::arg("width"), py::arg("height"),
            "Feed-forward reconstruction: returns the fine splat set as arrays.");
}
