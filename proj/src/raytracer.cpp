#include "lara/raytracer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lara {

namespace {

Vec3 rotate(const std::array<double, 9>& r, const Vec3& v) {
    return {r[0] * v.x + r[1] * v.y + r[2] * v.z, r[3] * v.x + r[4] * v.y + r[5] * v.z,
            r[6] * v.x + r[7] * v.y + r[8] * v.z};
}

Vec3 rotate_back(const std::array<double, 9>& r, const Vec3& v) {
    return {r[0] * v.x + r[3] * v.y + r[6] * v.z, r[1] * v.x + r[4] * v.y + r[7] * v.z,
            r[2] * v.x + r[5] * v.y + r[8] * v.z};
}

double hash_noise(uint64_t seed, int64_t x, int64_t y, int64_t z) {
    uint64_t s = seed ^ (static_cast<uint64_t>(x) * 0x9E3779B97F4A7C15ULL) ^
                 (static_cast<uint64_t>(y) * 0xC2B2AE3D27D4EB4FULL) ^
                 (static_cast<uint64_t>(z) * 0x165667B19E3779F9ULL);
    s ^= s >> 30;
    s *= 0xBF58476D1CE4E5B9ULL;
    s ^= s >> 27;
    s *= 0x94D049BB133111EBULL;
    s ^= s >> 31;
    return static_cast<double>(s >> 11) * 0x1.0p-53;
}

double value_noise(uint64_t seed, const Vec3& p) {
    const int64_t x0 = static_cast<int64_t>(std::floor(p.x));
    const int64_t y0 = static_cast<int64_t>(std::floor(p.y));
    const int64_t z0 = static_cast<int64_t>(std::floor(p.z));
    const double fx = p.x - static_cast<double>(x0);
    const double fy = p.y - static_cast<double>(y0);
    const double fz = p.z - static_cast<double>(z0);
    double acc = 0;
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                acc += w * hash_noise(seed, x0 + dx, y0 + dy, z0 + dz);
            }
    return acc;
}

Vec3 texture_albedo(const TextureSpec& tex, const Vec3& local) {
    switch (tex.kind) {
        case TextureSpec::Kind::Checker: {
            const int64_t ix = static_cast<int64_t>(std::floor(local.x * tex.scale));
            const int64_t iy = static_cast<int64_t>(std::floor(local.y * tex.scale));
            const int64_t iz = static_cast<int64_t>(std::floor(local.z * tex.scale));
            return ((ix + iy + iz) & 1) ? tex.color_b : tex.color_a;
        }
        case TextureSpec::Kind::Gradient: {
            const double t = std::clamp(0.5 + local.z * tex.scale * 0.25, 0.0, 1.0);
            return tex.color_a * (1 - t) + tex.color_b * t;
        }
        case TextureSpec::Kind::Noise: {
            const double n0 = value_noise(tex.noise_seed, local * tex.scale);
            const double n1 = value_noise(tex.noise_seed + 1, local * tex.scale * 2.0);
            const double t = std::clamp(0.65 * n0 + 0.35 * n1, 0.0, 1.0);
            return tex.color_a * (1 - t) + tex.color_b * t;
        }
    }
    return tex.color_a;
}

struct LocalHit {
    bool hit = false;
    double t = 0;
    Vec3 normal_local{};
};

LocalHit intersect_sphere(double radius, const Vec3& o, const Vec3& d) {
    LocalHit h;
    const double b = dot(o, d);
    const double c = dot(o, o) - radius * radius;
    const double disc = b * b - c;
    if (disc < 0) return h;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t < 1e-6) t = -b + sq;
    if (t < 1e-6) return h;
    h.hit = true;
    h.t = t;
    h.normal_local = normalized(o + d * t);
    return h;
}

LocalHit intersect_box(const Vec3& half, const Vec3& o, const Vec3& d) {
    LocalHit h;
    double t0 = -std::numeric_limits<double>::max();
    double t1 = std::numeric_limits<double>::max();
    int axis0 = -1;
    for (int a = 0; a < 3; ++a) {
        const double da = d[a];
        if (std::fabs(da) < 1e-12) {
            if (std::fabs(o[a]) > half[a]) return h;
            continue;
        }
        double ta = (-half[a] - o[a]) / da;
        double tb = (half[a] - o[a]) / da;
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
            t0 = ta;
            axis0 = a;
        }
        t1 = std::min(t1, tb);
        if (t0 > t1) return h;
    }
    if (t0 < 1e-6 || axis0 < 0) return h;
    h.hit = true;
    h.t = t0;
    Vec3 p = o + d * t0;
    Vec3 n{};
    n[axis0] = p[axis0] > 0 ? 1.0 : -1.0;
    h.normal_local = n;
    return h;
}

double torus_sdf(double major, double minor, const Vec3& p) {
    const double q = std::sqrt(p.x * p.x + p.y * p.y) - major;
    return std::sqrt(q * q + p.z * p.z) - minor;
}

LocalHit intersect_torus(double major, double minor, const Vec3& o, const Vec3& d) {
    // sphere tracing; bounded by the enclosing sphere of radius major+minor
    LocalHit h;
    const double bound = major + minor;
    const double b = dot(o, d);
    const double c = dot(o, o) - bound * bound;
    const double disc = b * b - c;
    if (disc < 0) return h;
    double t = std::max(1e-6, -b - std::sqrt(disc));
    const double t_exit = -b + std::sqrt(disc);
    for (int it = 0; it < 256 && t <= t_exit; ++it) {
        const Vec3 p = o + d * t;
        const double sd = torus_sdf(major, minor, p);
        if (sd < 1e-7) {
            h.hit = true;
            h.t = t;
            const double e = 1e-6;
            const Vec3 grad{
                torus_sdf(major, minor, {p.x + e, p.y, p.z}) - torus_sdf(major, minor, {p.x - e, p.y, p.z}),
                torus_sdf(major, minor, {p.x, p.y + e, p.z}) - torus_sdf(major, minor, {p.x, p.y - e, p.z}),
                torus_sdf(major, minor, {p.x, p.y, p.z + e}) - torus_sdf(major, minor, {p.x, p.y, p.z - e})};
            h.normal_local = normalized(grad);
            return h;
        }
        t += std::max(sd, 1e-7);
    }
    return h;
}

}  // namespace

TraceHit trace_scene(const SceneSpec& scene, const Vec3& origin, const Vec3& dir) {
    TraceHit best;
    best.t = std::numeric_limits<double>::max();
    for (size_t i = 0; i < scene.primitives.size(); ++i) {
        const auto& prim = scene.primitives[i];
        const Vec3 lo = rotate(prim.rot, origin - prim.center);
        const Vec3 ld = rotate(prim.rot, dir);
        LocalHit lh;
        switch (prim.kind) {
            case PrimitiveSpec::Kind::Sphere: lh = intersect_sphere(prim.size.x, lo, ld); break;
            case PrimitiveSpec::Kind::Box: lh = intersect_box(prim.size, lo, ld); break;
            case PrimitiveSpec::Kind::Torus: lh = intersect_torus(prim.size.x, prim.size.y, lo, ld); break;
        }
        if (lh.hit && lh.t < best.t) {
            best.hit = true;
            best.t = lh.t;
            best.point = origin + dir * lh.t;
            best.normal = rotate_back(prim.rot, lh.normal_local);
            best.primitive = static_cast<int>(i);
        }
    }
    if (!best.hit) best.t = 0;
    return best;
}

Vec3 shade_scene(const SceneSpec& scene, const TraceHit& hit) {
    if (!hit.hit) return {1, 1, 1};
    const auto& prim = scene.primitives[static_cast<size_t>(hit.primitive)];
    const Vec3 local = rotate(prim.rot, hit.point - prim.center);
    const Vec3 albedo = texture_albedo(prim.texture, local);
    static const Vec3 l1 = normalized({0.5, -0.3, 0.8});
    static const Vec3 l2 = normalized({-0.6, 0.5, 0.2});
    const double diff = 0.38 + 0.5 * std::max(0.0, dot(hit.normal, l1)) + 0.22 * std::max(0.0, dot(hit.normal, l2));
    Vec3 c = albedo * diff;
    return {std::clamp(c.x, 0.0, 1.0), std::clamp(c.y, 0.0, 1.0), std::clamp(c.z, 0.0, 1.0)};
}

void render_scene(const SceneSpec& scene, const Camera& cam, Image* rgb, Image* depth, Image* alpha) {
    const int w = cam.width, h = cam.height;
    if (rgb) {
        rgb->width = w;
        rgb->height = h;
        rgb->channels = 3;
        rgb->data.assign(static_cast<size_t>(w) * h * 3, 1.0);
    }
    if (depth) {
        depth->width = w;
        depth->height = h;
        depth->channels = 1;
        depth->data.assign(static_cast<size_t>(w) * h, 0.0);
    }
    if (alpha) {
        alpha->width = w;
        alpha->height = h;
        alpha->channels = 1;
        alpha->data.assign(static_cast<size_t>(w) * h, 0.0);
    }
    const Vec3 origin = cam.center();
    parallel_chunks(h, 8, [&](int64_t y0, int64_t y1) {
        for (int64_t y = y0; y < y1; ++y) {
            for (int x = 0; x < w; ++x) {
                Vec3 dc{(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0};
                const double len = std::sqrt(dot(dc, dc));
                const Vec3 dir = cam.rotate_to_world(dc) / len;
                const TraceHit hit = trace_scene(scene, origin, dir);
                if (rgb) {
                    const Vec3 c = shade_scene(scene, hit);
                    rgb->at(static_cast<int>(y), x, 0) = c.x;
                    rgb->at(static_cast<int>(y), x, 1) = c.y;
                    rgb->at(static_cast<int>(y), x, 2) = c.z;
                }
                if (hit.hit) {
                    const double z = hit.t / len;  // camera-frame depth
                    if (depth) depth->at(static_cast<int>(y), x, 0) = z;
                    if (alpha) alpha->at(static_cast<int>(y), x, 0) = 1.0;
                }
            }
        }
    });
}

namespace {

nlohmann::json vec_to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }
Vec3 vec_from_json(const nlohmann::json& j) { return {j[0], j[1], j[2]}; }

std::array<double, 9> random_rotation(RandomStream& rng) {
    // quaternion to matrix
    double q[4];
    double n = 0;
    for (double& v : q) {
        v = rng.normal();
        n += v * v;
    }
    n = std::sqrt(n);
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}

TextureSpec random_texture(RandomStream& rng) {
    TextureSpec tex;
    const double pick = rng.uniform();
    tex.kind = pick < 0.4 ? TextureSpec::Kind::Checker
                          : (pick < 0.7 ? TextureSpec::Kind::Gradient : TextureSpec::Kind::Noise);
    tex.color_a = {rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
    tex.color_b = {rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.95)};
    tex.scale = rng.uniform(4.0, 14.0);
    tex.noise_seed = rng.next_u64();
    return tex;
}

}  // namespace

SceneSpec random_scene_spec(RandomStream& rng) {
    SceneSpec scene;
    const int count = 1 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < count; ++i) {
        PrimitiveSpec prim;
        const double pick = rng.uniform();
        prim.kind = pick < 0.45 ? PrimitiveSpec::Kind::Sphere
                                : (pick < 0.8 ? PrimitiveSpec::Kind::Box : PrimitiveSpec::Kind::Torus);
        const double max_r = count == 1 ? 0.42 : 0.30;
        const double min_r = count == 1 ? 0.22 : 0.14;
        switch (prim.kind) {
            case PrimitiveSpec::Kind::Sphere: {
                const double r = rng.uniform(min_r, max_r);
                prim.size = {r, r, r};
                prim.center = {rng.uniform(-0.4 + r, 0.4 - r), rng.uniform(-0.4 + r, 0.4 - r),
                               rng.uniform(-0.4 + r, 0.4 - r)};
                break;
            }
            case PrimitiveSpec::Kind::Box: {
                prim.size = {rng.uniform(min_r * 0.7, max_r * 0.7), rng.uniform(min_r * 0.7, max_r * 0.7),
                             rng.uniform(min_r * 0.7, max_r * 0.7)};
                const double reach = norm(prim.size);
                prim.center = {rng.uniform(-0.42 + reach, 0.42 - reach),
                               rng.uniform(-0.42 + reach, 0.42 - reach),
                               rng.uniform(-0.42 + reach, 0.42 - reach)};
                prim.rot = random_rotation(rng);
                break;
            }
            case PrimitiveSpec::Kind::Torus: {
                const double major = rng.uniform(min_r, max_r * 0.8);
                const double minor = rng.uniform(0.35 * major, 0.6 * major);
                prim.size = {major, minor, 0};
                const double reach = major + minor;
                prim.center = {rng.uniform(-0.42 + reach, 0.42 - reach),
                               rng.uniform(-0.42 + reach, 0.42 - reach),
                               rng.uniform(-0.42 + reach, 0.42 - reach)};
                prim.rot = random_rotation(rng);
                break;
            }
        }
        prim.texture = random_texture(rng);
        scene.primitives.push_back(prim);
    }
    return scene;
}

SceneSpec textured_sphere_scene(double radius) {
    SceneSpec scene;
    PrimitiveSpec prim;
    prim.kind = PrimitiveSpec::Kind::Sphere;
    prim.center = {0, 0, 0};
    prim.size = {radius, radius, radius};
    prim.texture.kind = TextureSpec::Kind::Checker;
    prim.texture.color_a = {0.85, 0.25, 0.2};
    prim.texture.color_b = {0.95, 0.9, 0.85};
    prim.texture.scale = 7.0;
    scene.primitives.push_back(prim);
    return scene;
}

nlohmann::json SceneSpec::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : primitives) {
        nlohmann::json jp;
        jp["kind"] = p.kind == PrimitiveSpec::Kind::Sphere ? "sphere"
                     : p.kind == PrimitiveSpec::Kind::Box  ? "box"
                                                           : "torus";
        jp["center"] = vec_to_json(p.center);
        jp["size"] = vec_to_json(p.size);
        jp["rot"] = p.rot;
        nlohmann::json jt;
        jt["kind"] = p.texture.kind == TextureSpec::Kind::Checker    ? "checker"
                     : p.texture.kind == TextureSpec::Kind::Gradient ? "gradient"
                                                                     : "noise";
        jt["color_a"] = vec_to_json(p.texture.color_a);
        jt["color_b"] = vec_to_json(p.texture.color_b);
        jt["scale"] = p.texture.scale;
        jt["noise_seed"] = p.texture.noise_seed;
        jp["texture"] = jt;
        arr.push_back(jp);
    }
    return nlohmann::json{{"primitives", arr}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
    SceneSpec scene;
    for (const auto& jp : j.at("primitives")) {
        PrimitiveSpec p;
        const std::string kind = jp.at("kind");
        p.kind = kind == "sphere" ? PrimitiveSpec::Kind::Sphere
                 : kind == "box"  ? PrimitiveSpec::Kind::Box
                                  : PrimitiveSpec::Kind::Torus;
        p.center = vec_from_json(jp.at("center"));
        p.size = vec_from_json(jp.at("size"));
        p.rot = jp.at("rot").get<std::array<double, 9>>();
        const auto& jt = jp.at("texture");
        const std::string tk = jt.at("kind");
        p.texture.kind = tk == "checker"    ? TextureSpec::Kind::Checker
                         : tk == "gradient" ? TextureSpec::Kind::Gradient
                                            : TextureSpec::Kind::Noise;
        p.texture.color_a = vec_from_json(jt.at("color_a"));
        p.texture.color_b = vec_from_json(jt.at("color_b"));
        p.texture.scale = jt.at("scale");
        p.texture.noise_seed = jt.at("noise_seed");
        scene.primitives.push_back(p);
    }
    return scene;
}

}  // namespace lara
