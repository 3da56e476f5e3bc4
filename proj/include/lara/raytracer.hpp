#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "lara/camera.hpp"
#include "lara/core.hpp"
#include "lara/imageio.hpp"

namespace lara {

// Procedural desk-scale scenes: unions of textured spheres, boxes and tori
// shaded with fixed directional lights on a white background. All content
// stays inside the canonical bounding box [-0.5, 0.5]^3.

struct TextureSpec {
    enum class Kind { Checker, Gradient, Noise };
    Kind kind = Kind::Checker;
    Vec3 color_a{0.8, 0.2, 0.2};
    Vec3 color_b{0.9, 0.9, 0.9};
    double scale = 8.0;
    uint64_t noise_seed = 0;
};

struct PrimitiveSpec {
    enum class Kind { Sphere, Box, Torus };
    Kind kind = Kind::Sphere;
    Vec3 center{};
    Vec3 size{0.3, 0.3, 0.3};        // sphere: (r,-,-); box: half extents; torus: (R, r, -)
    std::array<double, 9> rot{1, 0, 0, 0, 1, 0, 0, 0, 1};  // world-to-local rotation
    TextureSpec texture;
};

struct SceneSpec {
    std::vector<PrimitiveSpec> primitives;

    nlohmann::json to_json() const;
    static SceneSpec from_json(const nlohmann::json& j);
};

struct TraceHit {
    bool hit = false;
    double t = 0;        // ray parameter
    Vec3 point{};
    Vec3 normal{};       // outward unit normal, world
    int primitive = -1;
};

TraceHit trace_scene(const SceneSpec& scene, const Vec3& origin, const Vec3& dir);
Vec3 shade_scene(const SceneSpec& scene, const TraceHit& hit);

// RGB in [0,1] (white background), camera-z depth (0 at misses) and a 0/1
// alpha channel.
void render_scene(const SceneSpec& scene, const Camera& cam, Image* rgb, Image* depth,
                  Image* alpha = nullptr);

SceneSpec random_scene_spec(RandomStream& rng);
SceneSpec textured_sphere_scene(double radius = 0.4);

}  // namespace lara
