#include "lara/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace lara {

SplatFrame build_frame(const std::array<double, 4>& quat) {
    const double n2 = quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3];
    check(n2 > 1e-24, "build_frame: zero quaternion");
    const double inv = 1.0 / std::sqrt(n2);
    const double w = quat[0] * inv, x = quat[1] * inv, y = quat[2] * inv, z = quat[3] * inv;
    SplatFrame f;
    f.t_u = {1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)};
    f.t_v = {2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)};
    f.normal = {2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)};
    return f;
}

std::array<double, 4> build_frame_backward(const std::array<double, 4>& quat, const Vec3& du,
                                           const Vec3& dv, const Vec3& dn) {
    const double n2 = quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3];
    check(n2 > 1e-24, "build_frame_backward: zero quaternion");
    const double inv = 1.0 / std::sqrt(n2);
    const double w = quat[0] * inv, x = quat[1] * inv, y = quat[2] * inv, z = quat[3] * inv;
    // gradients w.r.t. the unit quaternion
    double gw = 0, gx = 0, gy = 0, gz = 0;
    // t_u = (1-2yy-2zz, 2xy+2wz, 2xz-2wy)
    gy += du.x * (-4 * y);
    gz += du.x * (-4 * z);
    gw += du.y * (2 * z);
    gx += du.y * (2 * y);
    gy += du.y * (2 * x);
    gz += du.y * (2 * w);
    gw += du.z * (-2 * y);
    gx += du.z * (2 * z);
    gy += du.z * (-2 * w);
    gz += du.z * (2 * x);
    // t_v = (2xy-2wz, 1-2xx-2zz, 2yz+2wx)
    gw += dv.x * (-2 * z);
    gx += dv.x * (2 * y);
    gy += dv.x * (2 * x);
    gz += dv.x * (-2 * w);
    gx += dv.y * (-4 * x);
    gz += dv.y * (-4 * z);
    gw += dv.z * (2 * x);
    gx += dv.z * (2 * w);
    gy += dv.z * (2 * z);
    gz += dv.z * (2 * y);
    // n = (2xz+2wy, 2yz-2wx, 1-2xx-2yy)
    gw += dn.x * (2 * y);
    gx += dn.x * (2 * z);
    gy += dn.x * (2 * w);
    gz += dn.x * (2 * x);
    gw += dn.y * (-2 * x);
    gx += dn.y * (-2 * w);
    gy += dn.y * (2 * z);
    gz += dn.y * (2 * y);
    gx += dn.z * (-4 * x);
    gy += dn.z * (-4 * y);
    // project through the normalization: dq = (I - qn qn^T) g / |q|
    const double qd = gw * w + gx * x + gy * y + gz * z;
    return {(gw - qd * w) * inv, (gx - qd * x) * inv, (gy - qd * y) * inv, (gz - qd * z) * inv};
}

namespace {
constexpr double kShC0 = 0.28209479177387814;
constexpr double kShC1 = 0.48860251190291987;
constexpr double kShC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                             -1.0925484305920792, 0.5462742152960396};
}  // namespace

std::array<double, 9> sh_basis(const Vec3& d) {
    const double x = d.x, y = d.y, z = d.z;
    return {kShC0,          -kShC1 * y,      kShC1 * z,       -kShC1 * x,     kShC2[0] * x * y,
            kShC2[1] * y * z, kShC2[2] * (3 * z * z - 1), kShC2[3] * x * z, kShC2[4] * (x * x - y * y)};
}

void sh_basis_with_grad(const Vec3& d, std::array<double, 9>& basis, std::array<Vec3, 9>& db) {
    const double x = d.x, y = d.y, z = d.z;
    basis = sh_basis(d);
    db[0] = {0, 0, 0};
    db[1] = {0, -kShC1, 0};
    db[2] = {0, 0, kShC1};
    db[3] = {-kShC1, 0, 0};
    db[4] = {kShC2[0] * y, kShC2[0] * x, 0};
    db[5] = {0, kShC2[1] * z, kShC2[1] * y};
    db[6] = {0, 0, kShC2[2] * 6 * z};
    db[7] = {kShC2[3] * z, 0, kShC2[3] * x};
    db[8] = {kShC2[4] * 2 * x, -kShC2[4] * 2 * y, 0};
}

Vec3 sh_eval(const double* coeffs, const Vec3& dir, int sh_order) {
    check(sh_order == 0 || sh_order == 2, "sh_eval: sh_order must be 0 or 2, got " + std::to_string(sh_order));
    const int nb = sh_order == 0 ? 1 : 9;
    const auto basis = sh_basis(dir);
    Vec3 rgb;
    for (int c = 0; c < 3; ++c) {
        double acc = 0.5;
        for (int l = 0; l < nb; ++l) acc += coeffs[c * nb + l] * basis[static_cast<size_t>(l)];
        rgb[c] = std::min(1.0, std::max(0.0, acc));
    }
    return rgb;
}

std::optional<RaySplatHit> ray_splat_intersect(const Gaussian2D& g, const Vec3& origin, const Vec3& dir,
                                               double near, double g_cutoff) {
    const SplatFrame f = build_frame(g.rotation);
    const double denom = dot(dir, f.normal);
    if (std::fabs(denom) < 1e-6) return std::nullopt;
    const double t = dot(f.normal, g.position - origin) / denom;
    if (t <= near) return std::nullopt;
    const Vec3 delta = origin + dir * t - g.position;
    RaySplatHit hit;
    hit.u = dot(delta, f.t_u) / g.scale_u;
    hit.v = dot(delta, f.t_v) / g.scale_v;
    hit.t = t;
    hit.gauss = std::exp(-0.5 * (hit.u * hit.u + hit.v * hit.v));
    if (hit.gauss < g_cutoff) return std::nullopt;
    return hit;
}

// ---------------------------------------------------------------------------
// tile rasterizer
// ---------------------------------------------------------------------------

class RenderState {
public:
    Camera cam;
    RasterizeConfig cfg;
    int64_t n = 0;
    int w = 0, h = 0;
    NodePtr p_node, q_node, s_node, a_node, sh_node;
    // weak: the anchor's backward closure owns this state, so strong links
    // back to the graph would form reference cycles
    std::weak_ptr<TensorNode> rgb_node, depth_node, alpha_node, normal_node, anchor;
    Vec3 cam_center, cam_forward;

    std::vector<SplatFrame> frames;
    std::vector<Vec3> colors;
    std::vector<uint8_t> color_interior;  // bit c set when channel c is inside (0,1)
    std::vector<Vec3> view_dirs;
    std::vector<double> view_dist;

    struct Isect {
        int32_t splat;
        double t;
        double g;
    };
    std::vector<int64_t> offsets;  // per pixel, size h*w+1
    std::vector<Isect> isects;

    std::vector<double> d_weight, d_z, d_normal;
    bool has_direct = false;

    void ensure_direct() {
        if (!has_direct) {
            d_weight.assign(isects.size(), 0.0);
            d_z.assign(isects.size(), 0.0);
            d_normal.assign(isects.size() * 3, 0.0);
            has_direct = true;
        }
    }
};

void rasterize_backward_impl(RenderState& st);

namespace {

struct PixelRay {
    Vec3 dir;      // unit, world
    double kappa;  // camera-z per unit ray parameter
};

PixelRay pixel_ray(const Camera& cam, int x, int y) {
    const double u = x + 0.5, v = y + 0.5;
    Vec3 dc{(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0};
    const double len = std::sqrt(dot(dc, dc));
    PixelRay r;
    r.dir = cam.rotate_to_world(dc) / len;
    r.kappa = 1.0 / len;
    return r;
}

int64_t div_floor(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

RenderResult rasterize(const Tensor& position, const Tensor& rotation, const Tensor& scale,
                       const Tensor& opacity, const Tensor& sh, const Camera& cam,
                       const RasterizeConfig& cfg) {
    check(position.shape().size() == 2 && position.shape()[1] == 3, "rasterize: position must be [N,3]");
    const int64_t n = position.shape()[0];
    check(rotation.shape() == Shape({n, 4}), "rasterize: rotation must be [N,4]");
    check(scale.shape() == Shape({n, 2}), "rasterize: scale must be [N,2]");
    check(opacity.shape() == Shape({n}) || opacity.shape() == Shape({n, 1}),
          "rasterize: opacity must be [N]");
    const int64_t nsh = cfg.sh_order == 0 ? 3 : 27;
    check(sh.shape() == Shape({n, nsh}), "rasterize: sh must be [N," + std::to_string(nsh) + "]");

    auto st = std::make_shared<RenderState>();
    st->cam = cam;
    st->cfg = cfg;
    st->n = n;
    st->w = cam.width;
    st->h = cam.height;
    st->p_node = position.node();
    st->q_node = rotation.node();
    st->s_node = scale.node();
    st->a_node = opacity.node();
    st->sh_node = sh.node();
    st->cam_center = cam.center();
    st->cam_forward = cam.forward_world();

    const auto& pv = position.value();
    const auto& qv = rotation.value();
    const auto& sv = scale.value();
    const auto& av = opacity.value();
    const auto& shv = sh.value();

    // per-splat caches
    st->frames.resize(static_cast<size_t>(n));
    st->colors.resize(static_cast<size_t>(n));
    st->color_interior.resize(static_cast<size_t>(n));
    st->view_dirs.resize(static_cast<size_t>(n));
    st->view_dist.resize(static_cast<size_t>(n));
    const int nb = cfg.sh_order == 0 ? 1 : 9;
    for (int64_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k)
            check(std::isfinite(pv[static_cast<size_t>(3 * i + k)]), "rasterize: non-finite position in splat " + std::to_string(i));
        for (int k = 0; k < 4; ++k)
            check(std::isfinite(qv[static_cast<size_t>(4 * i + k)]), "rasterize: non-finite rotation in splat " + std::to_string(i));
        check(std::isfinite(sv[static_cast<size_t>(2 * i)]) && std::isfinite(sv[static_cast<size_t>(2 * i + 1)]),
              "rasterize: non-finite scale in splat " + std::to_string(i));
        check(sv[static_cast<size_t>(2 * i)] > 0 && sv[static_cast<size_t>(2 * i + 1)] > 0,
              "rasterize: non-positive scale in splat " + std::to_string(i));
        const double a = av[static_cast<size_t>(i)];
        check(std::isfinite(a) && a >= -1e-9 && a <= 1 + 1e-9,
              "rasterize: opacity outside [0,1] in splat " + std::to_string(i));
        for (int64_t k = 0; k < nsh; ++k)
            check(std::isfinite(shv[static_cast<size_t>(nsh * i + k)]), "rasterize: non-finite sh in splat " + std::to_string(i));

        st->frames[static_cast<size_t>(i)] =
            build_frame({qv[static_cast<size_t>(4 * i)], qv[static_cast<size_t>(4 * i + 1)],
                         qv[static_cast<size_t>(4 * i + 2)], qv[static_cast<size_t>(4 * i + 3)]});
        const Vec3 p{pv[static_cast<size_t>(3 * i)], pv[static_cast<size_t>(3 * i + 1)], pv[static_cast<size_t>(3 * i + 2)]};
        Vec3 to_splat = p - st->cam_center;
        double dist = norm(to_splat);
        Vec3 dir = dist > 1e-12 ? to_splat / dist : Vec3{0, 0, 1};
        st->view_dirs[static_cast<size_t>(i)] = dir;
        st->view_dist[static_cast<size_t>(i)] = dist;
        const auto basis = sh_basis(dir);
        Vec3 col;
        uint8_t interior = 0;
        for (int c = 0; c < 3; ++c) {
            double acc = 0.5;
            for (int l = 0; l < nb; ++l) acc += shv[static_cast<size_t>(nsh * i + c * nb + l)] * basis[static_cast<size_t>(l)];
            if (acc > 0.0 && acc < 1.0) interior |= static_cast<uint8_t>(1 << c);
            col[c] = std::min(1.0, std::max(0.0, acc));
        }
        st->colors[static_cast<size_t>(i)] = col;
        st->color_interior[static_cast<size_t>(i)] = interior;
    }

    // tile binning via projected bounding boxes of the 3.33-sigma ball
    const int ts = cfg.tile_size;
    const int tiles_x = (st->w + ts - 1) / ts;
    const int tiles_y = (st->h + ts - 1) / ts;
    const double radius_mult = cfg.g_cutoff > 0 ? std::sqrt(2.0 * std::log(1.0 / cfg.g_cutoff)) : -1.0;
    std::vector<std::vector<int32_t>> bins(static_cast<size_t>(tiles_x * tiles_y));
    for (int64_t i = 0; i < n; ++i) {
        int tx0 = 0, tx1 = tiles_x - 1, ty0 = 0, ty1 = tiles_y - 1;
        bool visible = true;
        if (radius_mult > 0) {
            const Vec3 p{pv[static_cast<size_t>(3 * i)], pv[static_cast<size_t>(3 * i + 1)], pv[static_cast<size_t>(3 * i + 2)]};
            const double r3d = radius_mult * std::max(sv[static_cast<size_t>(2 * i)], sv[static_cast<size_t>(2 * i + 1)]);
            double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
            bool all_front = true;
            for (int cz = 0; cz < 8 && all_front; ++cz) {
                Vec3 corner = p + Vec3{(cz & 1) ? r3d : -r3d, (cz & 2) ? r3d : -r3d, (cz & 4) ? r3d : -r3d};
                const Projection pr = project_point(corner, cam);
                if (pr.depth <= cfg.near) {
                    all_front = false;
                    break;
                }
                umin = std::min(umin, pr.u);
                umax = std::max(umax, pr.u);
                vmin = std::min(vmin, pr.v);
                vmax = std::max(vmax, pr.v);
            }
            if (all_front) {
                if (umax < 0 || umin >= st->w || vmax < 0 || vmin >= st->h) visible = false;
                tx0 = static_cast<int>(std::max<int64_t>(0, div_floor(static_cast<int64_t>(std::floor(umin - 1.0)), ts)));
                tx1 = static_cast<int>(std::min<int64_t>(tiles_x - 1, div_floor(static_cast<int64_t>(std::floor(umax + 1.0)), ts)));
                ty0 = static_cast<int>(std::max<int64_t>(0, div_floor(static_cast<int64_t>(std::floor(vmin - 1.0)), ts)));
                ty1 = static_cast<int>(std::min<int64_t>(tiles_y - 1, div_floor(static_cast<int64_t>(std::floor(vmax + 1.0)), ts)));
            } else {
                // box straddles the near plane; check whether it is entirely behind
                const Vec3 pc = cam.to_camera(p);
                if (pc.z + r3d * 1.7320508075688772 <= cfg.near) visible = false;
            }
        }
        if (!visible) continue;
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                bins[static_cast<size_t>(ty * tiles_x + tx)].push_back(static_cast<int32_t>(i));
    }

    // forward, parallel over tile-aligned row strips
    auto rgb = make_node({st->h, st->w, 3});
    auto depth = make_node({st->h, st->w});
    auto alpha = make_node({st->h, st->w});
    auto normal = make_node({st->h, st->w, 3});
    auto& rgbv = *rgb->data;
    auto& depthv = *depth->data;
    auto& alphav = *alpha->data;
    auto& normalv = *normal->data;

    std::vector<std::vector<RenderState::Isect>> strip_isects(static_cast<size_t>(tiles_y));
    std::vector<std::vector<int32_t>> strip_counts(static_cast<size_t>(tiles_y));

    parallel_chunks(tiles_y, 1, [&](int64_t ty, int64_t) {
        auto& out = strip_isects[static_cast<size_t>(ty)];
        auto& counts = strip_counts[static_cast<size_t>(ty)];
        const int y0 = static_cast<int>(ty) * ts;
        const int y1 = std::min(st->h, y0 + ts);
        counts.assign(static_cast<size_t>((y1 - y0) * st->w), 0);
        std::vector<RenderState::Isect> local;
        for (int y = y0; y < y1; ++y) {
            for (int x = 0; x < st->w; ++x) {
                const auto& bin = bins[static_cast<size_t>(ty * tiles_x + x / ts)];
                const PixelRay ray = pixel_ray(cam, x, y);
                local.clear();
                for (int32_t i : bin) {
                    const SplatFrame& f = st->frames[static_cast<size_t>(i)];
                    const double denom = dot(ray.dir, f.normal);
                    if (std::fabs(denom) < 1e-6) continue;
                    const Vec3 p{pv[static_cast<size_t>(3 * i)], pv[static_cast<size_t>(3 * i + 1)],
                                 pv[static_cast<size_t>(3 * i + 2)]};
                    const double t = dot(f.normal, p - st->cam_center) / denom;
                    if (t * ray.kappa <= cfg.near) continue;
                    const Vec3 delta = st->cam_center + ray.dir * t - p;
                    const double u = dot(delta, f.t_u) / sv[static_cast<size_t>(2 * i)];
                    const double v = dot(delta, f.t_v) / sv[static_cast<size_t>(2 * i + 1)];
                    const double g = std::exp(-0.5 * (u * u + v * v));
                    if (g < cfg.g_cutoff) continue;
                    local.push_back({i, t, g});
                }
                std::sort(local.begin(), local.end(), [](const auto& a, const auto& b) {
                    return a.t != b.t ? a.t < b.t : a.splat < b.splat;
                });
                // front-to-back compositing
                double T = 1.0;
                Vec3 crgb{}, cnormal{};
                double cdepth = 0, calpha = 0;
                size_t kept = 0;
                for (const auto& is : local) {
                    const double a = av[static_cast<size_t>(is.splat)] * is.g;
                    const double wgt = a * T;
                    const Vec3& col = st->colors[static_cast<size_t>(is.splat)];
                    crgb += col * wgt;
                    cdepth += wgt * is.t * ray.kappa;
                    calpha += wgt;
                    Vec3 nw = st->frames[static_cast<size_t>(is.splat)].normal;
                    if (dot(nw, ray.dir) > 0) nw = -nw;
                    cnormal += cam.rotate_to_camera(nw) * wgt;
                    T *= (1.0 - a);
                    ++kept;
                    if (cfg.stop_transmittance > 0 && T < cfg.stop_transmittance) break;
                }
                local.resize(kept);
                const int64_t px = static_cast<int64_t>(y) * st->w + x;
                const Vec3 outc = crgb + cfg.background * (1.0 - calpha);
                rgbv[static_cast<size_t>(3 * px)] = outc.x;
                rgbv[static_cast<size_t>(3 * px + 1)] = outc.y;
                rgbv[static_cast<size_t>(3 * px + 2)] = outc.z;
                depthv[static_cast<size_t>(px)] = cdepth / (calpha + cfg.eps_div);
                alphav[static_cast<size_t>(px)] = calpha;
                normalv[static_cast<size_t>(3 * px)] = cnormal.x;
                normalv[static_cast<size_t>(3 * px + 1)] = cnormal.y;
                normalv[static_cast<size_t>(3 * px + 2)] = cnormal.z;
                counts[static_cast<size_t>((y - y0) * st->w + x)] = static_cast<int32_t>(kept);
                out.insert(out.end(), local.begin(), local.end());
            }
        }
    });

    // merge strips in row order
    st->offsets.assign(static_cast<size_t>(st->h * st->w) + 1, 0);
    int64_t total = 0;
    for (int ty = 0; ty < tiles_y; ++ty) {
        const int y0 = ty * ts;
        const auto& counts = strip_counts[static_cast<size_t>(ty)];
        for (size_t k = 0; k < counts.size(); ++k) {
            st->offsets[static_cast<size_t>(y0 * st->w) + k + 1] = counts[k];
        }
        total += static_cast<int64_t>(strip_isects[static_cast<size_t>(ty)].size());
    }
    for (size_t i = 1; i < st->offsets.size(); ++i) st->offsets[i] += st->offsets[i - 1];
    st->isects.reserve(static_cast<size_t>(total));
    for (int ty = 0; ty < tiles_y; ++ty) {
        auto& s = strip_isects[static_cast<size_t>(ty)];
        st->isects.insert(st->isects.end(), s.begin(), s.end());
        s.clear();
        s.shrink_to_fit();
    }

    // graph wiring: a hidden anchor node owns the backward pass
    const bool needs = position.requires_grad() || rotation.requires_grad() || scale.requires_grad() ||
                       opacity.requires_grad() || sh.requires_grad();
    RenderResult result;
    if (needs) {
        auto anchor = std::make_shared<TensorNode>();
        anchor->shape = {1};
        anchor->data = std::make_shared<std::vector<double>>(1, 0.0);
        anchor->id = next_node_id();
        anchor->needs_grad = true;
        anchor->parents = {st->p_node, st->q_node, st->s_node, st->a_node, st->sh_node};
        st->anchor = anchor;

        auto hook_output = [&](const NodePtr& out) {
            out->needs_grad = true;
            out->parents = {anchor};
        };
        hook_output(rgb);
        hook_output(depth);
        hook_output(alpha);
        hook_output(normal);
        st->rgb_node = rgb;
        st->depth_node = depth;
        st->alpha_node = alpha;
        st->normal_node = normal;

        std::shared_ptr<RenderState> keep = st;  // the anchor owns the retained state
        anchor->backward_fn = [keep](TensorNode&) { rasterize_backward_impl(*keep); };
    }
    result.rgb = Tensor(rgb);
    result.depth = Tensor(depth);
    result.alpha = Tensor(alpha);
    result.normal = Tensor(normal);
    result.state = st;
    return result;
}

RenderResult rasterize_gaussians(const std::vector<Gaussian2D>& splats, const Camera& cam,
                                 const RasterizeConfig& cfg) {
    const int64_t n = static_cast<int64_t>(splats.size());
    std::vector<double> p(static_cast<size_t>(3 * n)), q(static_cast<size_t>(4 * n)), s(static_cast<size_t>(2 * n)),
        a(static_cast<size_t>(n)), shv(static_cast<size_t>((cfg.sh_order == 0 ? 3 : 27) * n));
    const int64_t nsh = cfg.sh_order == 0 ? 3 : 27;
    for (int64_t i = 0; i < n; ++i) {
        const auto& g = splats[static_cast<size_t>(i)];
        p[static_cast<size_t>(3 * i)] = g.position.x;
        p[static_cast<size_t>(3 * i + 1)] = g.position.y;
        p[static_cast<size_t>(3 * i + 2)] = g.position.z;
        for (int k = 0; k < 4; ++k) q[static_cast<size_t>(4 * i + k)] = g.rotation[static_cast<size_t>(k)];
        s[static_cast<size_t>(2 * i)] = g.scale_u;
        s[static_cast<size_t>(2 * i + 1)] = g.scale_v;
        a[static_cast<size_t>(i)] = g.opacity;
        for (int64_t k = 0; k < nsh; ++k) shv[static_cast<size_t>(nsh * i + k)] = g.sh[static_cast<size_t>(k)];
    }
    return rasterize(Tensor::from_vector({n, 3}, std::move(p)), Tensor::from_vector({n, 4}, std::move(q)),
                     Tensor::from_vector({n, 2}, std::move(s)), Tensor::from_vector({n}, std::move(a)),
                     Tensor::from_vector({n, nsh}, std::move(shv)), cam, cfg);
}

bool rasterizer_tracks_gradients(const RenderState& st) {
    return st.p_node->needs_grad || st.q_node->needs_grad || st.s_node->needs_grad ||
           st.a_node->needs_grad || st.sh_node->needs_grad;
}

int64_t intersection_count(const RenderState& st) { return static_cast<int64_t>(st.isects.size()); }

int64_t pixel_count(const RenderState& st) { return static_cast<int64_t>(st.h) * st.w; }

void pixel_intersections_into(const RenderState& st, int64_t pixel, std::vector<RayIntersectionEntry>& out) {
    out.clear();
    const int64_t lo = st.offsets[static_cast<size_t>(pixel)];
    const int64_t hi = st.offsets[static_cast<size_t>(pixel) + 1];
    if (lo == hi) return;
    const int x = static_cast<int>(pixel % st.w);
    const int y = static_cast<int>(pixel / st.w);
    const PixelRay ray = pixel_ray(st.cam, x, y);
    const auto& av = *st.a_node->data;
    double T = 1.0;
    for (int64_t k = lo; k < hi; ++k) {
        const auto& is = st.isects[static_cast<size_t>(k)];
        RayIntersectionEntry e;
        e.splat = is.splat;
        e.z = is.t * ray.kappa;
        e.gauss = is.g;
        e.alpha = av[static_cast<size_t>(is.splat)];
        const double a = e.alpha * e.gauss;
        e.weight = a * T;
        T *= (1.0 - a);
        Vec3 nw = st.frames[static_cast<size_t>(is.splat)].normal;
        if (dot(nw, ray.dir) > 0) nw = -nw;
        e.normal_cam = st.cam.rotate_to_camera(nw);
        out.push_back(e);
    }
}

std::vector<RayIntersectionEntry> pixel_intersections(const RenderState& st, int64_t pixel) {
    std::vector<RayIntersectionEntry> out;
    pixel_intersections_into(st, pixel, out);
    return out;
}

void add_intersection_grad(RenderState& st, int64_t pixel, int64_t index, double d_weight, double d_z,
                           const Vec3& d_normal_cam) {
    st.ensure_direct();
    const int64_t k = st.offsets[static_cast<size_t>(pixel)] + index;
    check(k < st.offsets[static_cast<size_t>(pixel) + 1], "add_intersection_grad: index out of range");
    st.d_weight[static_cast<size_t>(k)] += d_weight;
    st.d_z[static_cast<size_t>(k)] += d_z;
    st.d_normal[static_cast<size_t>(3 * k)] += d_normal_cam.x;
    st.d_normal[static_cast<size_t>(3 * k + 1)] += d_normal_cam.y;
    st.d_normal[static_cast<size_t>(3 * k + 2)] += d_normal_cam.z;
}

NodePtr render_anchor(const RenderResult& r) {
    NodePtr a = r.state ? r.state->anchor.lock() : nullptr;
    check(a != nullptr, "render_anchor: rasterization did not retain gradient state");
    return a;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {
struct SplatGrad {
    double p[3] = {0, 0, 0};
    double tu[3] = {0, 0, 0};
    double tv[3] = {0, 0, 0};
    double nrm[3] = {0, 0, 0};
    double s[2] = {0, 0};
    double a = 0;
    double c[3] = {0, 0, 0};
};
}  // namespace

void rasterize_backward_impl(RenderState& st) {
    const auto& pv = *st.p_node->data;
    const auto& qv = *st.q_node->data;
    const auto& sv = *st.s_node->data;
    const auto& av = *st.a_node->data;
    const auto& shv = *st.sh_node->data;
    const int64_t n = st.n;
    const int nsh = st.cfg.sh_order == 0 ? 3 : 27;
    const int nb = st.cfg.sh_order == 0 ? 1 : 9;

    auto grad_of = [](const std::weak_ptr<TensorNode>& weak) -> const double* {
        NodePtr node = weak.lock();
        if (!node || node->grad.size() != node->data->size()) return nullptr;
        return node->grad.data();
    };
    const double* g_rgb = grad_of(st.rgb_node);
    const double* g_depth = grad_of(st.depth_node);
    const double* g_alpha = grad_of(st.alpha_node);
    const double* g_normal = grad_of(st.normal_node);

    const int ts = st.cfg.tile_size;
    const int tiles_y = (st.h + ts - 1) / ts;
    std::vector<std::unordered_map<int32_t, SplatGrad>> strip_grads(static_cast<size_t>(tiles_y));

    parallel_chunks(tiles_y, 1, [&](int64_t ty, int64_t) {
        auto& acc = strip_grads[static_cast<size_t>(ty)];
        const int y0 = static_cast<int>(ty) * ts;
        const int y1 = std::min(st.h, y0 + ts);
        std::vector<double> T_pre;  // transmittance before each intersection
        for (int y = y0; y < y1; ++y) {
            for (int x = 0; x < st.w; ++x) {
                const int64_t px = static_cast<int64_t>(y) * st.w + x;
                const int64_t lo = st.offsets[static_cast<size_t>(px)];
                const int64_t hi = st.offsets[static_cast<size_t>(px) + 1];
                if (lo == hi) continue;
                const PixelRay ray = pixel_ray(st.cam, x, y);

                // replay the forward compositing
                const int64_t m = hi - lo;
                T_pre.assign(static_cast<size_t>(m) + 1, 1.0);
                double A = 0, draw = 0;
                for (int64_t j = 0; j < m; ++j) {
                    const auto& is = st.isects[static_cast<size_t>(lo + j)];
                    const double a = av[static_cast<size_t>(is.splat)] * is.g;
                    const double wgt = a * T_pre[static_cast<size_t>(j)];
                    A += wgt;
                    draw += wgt * is.t * ray.kappa;
                    T_pre[static_cast<size_t>(j) + 1] = T_pre[static_cast<size_t>(j)] * (1.0 - a);
                }

                const double gr[3] = {g_rgb ? g_rgb[3 * px] : 0.0, g_rgb ? g_rgb[3 * px + 1] : 0.0,
                                      g_rgb ? g_rgb[3 * px + 2] : 0.0};
                const double gA_buf = g_alpha ? g_alpha[px] : 0.0;
                const double gD = g_depth ? g_depth[px] : 0.0;
                const double gN[3] = {g_normal ? g_normal[3 * px] : 0.0,
                                      g_normal ? g_normal[3 * px + 1] : 0.0,
                                      g_normal ? g_normal[3 * px + 2] : 0.0};
                const bool any_up = gr[0] != 0 || gr[1] != 0 || gr[2] != 0 || gA_buf != 0 || gD != 0 ||
                                    gN[0] != 0 || gN[1] != 0 || gN[2] != 0 || st.has_direct;
                if (!any_up) continue;

                const double denomD = A + st.cfg.eps_div;
                const double d_draw = gD / denomD;
                const double dA_from_depth = -gD * draw / (denomD * denomD);

                // reverse scan over the compositing chain
                double S = 0;  // sum over later intersections of w_bar * w
                for (int64_t j = m - 1; j >= 0; --j) {
                    const auto& is = st.isects[static_cast<size_t>(lo + j)];
                    const int32_t sid = is.splat;
                    const double alpha_i = av[static_cast<size_t>(sid)];
                    const double a = alpha_i * is.g;
                    const double Ti = T_pre[static_cast<size_t>(j)];
                    const double wgt = a * Ti;
                    const double z = is.t * ray.kappa;
                    const Vec3& col = st.colors[static_cast<size_t>(sid)];

                    Vec3 nw = st.frames[static_cast<size_t>(sid)].normal;
                    double sgn = 1.0;
                    if (dot(nw, ray.dir) > 0) {
                        sgn = -1.0;
                        nw = -nw;
                    }
                    const Vec3 n_cam = st.cam.rotate_to_camera(nw);

                    double w_bar = gr[0] * col.x + gr[1] * col.y + gr[2] * col.z -
                                   (gr[0] * st.cfg.background.x + gr[1] * st.cfg.background.y +
                                    gr[2] * st.cfg.background.z) +
                                   gA_buf + dA_from_depth + d_draw * z + gN[0] * n_cam.x +
                                   gN[1] * n_cam.y + gN[2] * n_cam.z;
                    double z_bar = d_draw * wgt;
                    Vec3 ncam_bar{gN[0] * wgt, gN[1] * wgt, gN[2] * wgt};
                    if (st.has_direct) {
                        const int64_t k = lo + j;
                        w_bar += st.d_weight[static_cast<size_t>(k)];
                        z_bar += st.d_z[static_cast<size_t>(k)];
                        ncam_bar += Vec3{st.d_normal[static_cast<size_t>(3 * k)],
                                         st.d_normal[static_cast<size_t>(3 * k + 1)],
                                         st.d_normal[static_cast<size_t>(3 * k + 2)]};
                    }

                    // a_bar through w_i = a_i T_i and T_{k>i} products
                    const double one_minus_a = 1.0 - a;
                    double a_bar = w_bar * Ti;
                    if (S != 0.0) {
                        a_bar -= (one_minus_a > 1e-12 ? S / one_minus_a : 0.0);
                    }
                    S += w_bar * wgt;

                    SplatGrad& sg = acc[sid];
                    sg.a += a_bar * is.g;
                    const double g_bar = a_bar * alpha_i;

                    // color accumulation (per-splat, converted to sh later)
                    sg.c[0] += gr[0] * wgt;
                    sg.c[1] += gr[1] * wgt;
                    sg.c[2] += gr[2] * wgt;

                    // geometry chain
                    const SplatFrame& f = st.frames[static_cast<size_t>(sid)];
                    const Vec3 p{pv[static_cast<size_t>(3 * sid)], pv[static_cast<size_t>(3 * sid + 1)],
                                 pv[static_cast<size_t>(3 * sid + 2)]};
                    const double su = sv[static_cast<size_t>(2 * sid)];
                    const double s_v = sv[static_cast<size_t>(2 * sid + 1)];
                    const double denom = dot(ray.dir, f.normal);
                    const Vec3 delta = st.cam_center + ray.dir * is.t - p;
                    const double u = dot(delta, f.t_u) / su;
                    const double v = dot(delta, f.t_v) / s_v;

                    const double u_bar = g_bar * (-u * is.g);
                    const double v_bar = g_bar * (-v * is.g);
                    sg.s[0] += u_bar * (-u / su);
                    sg.s[1] += v_bar * (-v / s_v);
                    const double ur_bar = u_bar / su;
                    const double vr_bar = v_bar / s_v;
                    const Vec3 delta_bar = f.t_u * ur_bar + f.t_v * vr_bar;
                    sg.tu[0] += ur_bar * delta.x;
                    sg.tu[1] += ur_bar * delta.y;
                    sg.tu[2] += ur_bar * delta.z;
                    sg.tv[0] += vr_bar * delta.x;
                    sg.tv[1] += vr_bar * delta.y;
                    sg.tv[2] += vr_bar * delta.z;

                    const double t_bar = dot(delta_bar, ray.dir) + z_bar * ray.kappa;
                    // p through t = n.(p-o)/denom and delta = o + t d - p
                    const Vec3 p_bar = f.normal * (t_bar / denom) - delta_bar;
                    sg.p[0] += p_bar.x;
                    sg.p[1] += p_bar.y;
                    sg.p[2] += p_bar.z;
                    // raw (unoriented) normal: through t and through the oriented buffer term
                    const Vec3 n_from_buffer = st.cam.rotate_to_world(ncam_bar) * sgn;
                    const Vec3 n_bar = delta * (-t_bar / denom) + n_from_buffer;
                    sg.nrm[0] += n_bar.x;
                    sg.nrm[1] += n_bar.y;
                    sg.nrm[2] += n_bar.z;
                }
            }
        }
    });

    // deterministic merge in strip order
    std::vector<SplatGrad> total(static_cast<size_t>(n));
    std::vector<uint8_t> touched(static_cast<size_t>(n), 0);
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (const auto& [sid, sg] : strip_grads[static_cast<size_t>(ty)]) {
            SplatGrad& t = total[static_cast<size_t>(sid)];
            for (int k = 0; k < 3; ++k) {
                t.p[k] += sg.p[k];
                t.tu[k] += sg.tu[k];
                t.tv[k] += sg.tv[k];
                t.nrm[k] += sg.nrm[k];
                t.c[k] += sg.c[k];
            }
            t.s[0] += sg.s[0];
            t.s[1] += sg.s[1];
            t.a += sg.a;
            touched[static_cast<size_t>(sid)] = 1;
        }
    }

    auto grad_into = [](const NodePtr& node) -> double* {
        if (!node->needs_grad) return nullptr;
        node->ensure_grad();
        return node->grad.data();
    };
    double* gp = grad_into(st.p_node);
    double* gq = grad_into(st.q_node);
    double* gs = grad_into(st.s_node);
    double* ga = grad_into(st.a_node);
    double* gsh = grad_into(st.sh_node);

    for (int64_t i = 0; i < n; ++i) {
        if (!touched[static_cast<size_t>(i)]) continue;
        const SplatGrad& t = total[static_cast<size_t>(i)];
        if (gp) {
            gp[3 * i] += t.p[0];
            gp[3 * i + 1] += t.p[1];
            gp[3 * i + 2] += t.p[2];
        }
        if (gs) {
            gs[2 * i] += t.s[0];
            gs[2 * i + 1] += t.s[1];
        }
        if (ga) ga[i] += t.a;
        if (gq) {
            const std::array<double, 4> q{qv[static_cast<size_t>(4 * i)], qv[static_cast<size_t>(4 * i + 1)],
                                          qv[static_cast<size_t>(4 * i + 2)], qv[static_cast<size_t>(4 * i + 3)]};
            const auto dq = build_frame_backward(q, {t.tu[0], t.tu[1], t.tu[2]}, {t.tv[0], t.tv[1], t.tv[2]},
                                                 {t.nrm[0], t.nrm[1], t.nrm[2]});
            for (int k = 0; k < 4; ++k) gq[4 * i + k] += dq[static_cast<size_t>(k)];
        }
        // colors -> sh coefficients and view-direction dependence
        const uint8_t interior = st.color_interior[static_cast<size_t>(i)];
        const Vec3 dir = st.view_dirs[static_cast<size_t>(i)];
        std::array<double, 9> basis;
        std::array<Vec3, 9> dbasis;
        sh_basis_with_grad(dir, basis, dbasis);
        Vec3 ddir{};
        for (int c = 0; c < 3; ++c) {
            if (!(interior & (1 << c))) continue;  // clamped channel
            const double gc = t.c[c];
            if (gc == 0) continue;
            for (int l = 0; l < nb; ++l) {
                if (gsh) gsh[nsh * i + c * nb + l] += gc * basis[static_cast<size_t>(l)];
                ddir += dbasis[static_cast<size_t>(l)] * (gc * shv[static_cast<size_t>(nsh * i + c * nb + l)]);
            }
        }
        if (gp && (ddir.x != 0 || ddir.y != 0 || ddir.z != 0)) {
            const double dist = st.view_dist[static_cast<size_t>(i)];
            if (dist > 1e-12) {
                // d dir / d p = (I - dir dir^T) / dist
                const Vec3 proj = ddir - dir * dot(dir, ddir);
                gp[3 * i] += proj.x / dist;
                gp[3 * i + 1] += proj.y / dist;
                gp[3 * i + 2] += proj.z / dist;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// splat dumps
// ---------------------------------------------------------------------------

void save_gaussians(const std::string& path, const std::vector<Gaussian2D>& splats, int sh_order) {
    check(sh_order == 0 || sh_order == 2, "save_gaussians: sh_order must be 0 or 2");
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_gaussians: cannot open '" + path + "'");
    f.write("LARA-GS1", 8);
    const uint32_t count = static_cast<uint32_t>(splats.size());
    const uint32_t order = static_cast<uint32_t>(sh_order);
    f.write(reinterpret_cast<const char*>(&count), 4);
    f.write(reinterpret_cast<const char*>(&order), 4);
    const int nsh = sh_order == 0 ? 3 : 27;
    std::vector<float> rec(static_cast<size_t>(10 + nsh));
    for (const auto& g : splats) {
        const SplatFrame fchk = build_frame(g.rotation);  // validates the quaternion
        (void)fchk;
        double qn = std::sqrt(g.rotation[0] * g.rotation[0] + g.rotation[1] * g.rotation[1] +
                              g.rotation[2] * g.rotation[2] + g.rotation[3] * g.rotation[3]);
        size_t k = 0;
        rec[k++] = static_cast<float>(g.position.x);
        rec[k++] = static_cast<float>(g.position.y);
        rec[k++] = static_cast<float>(g.position.z);
        for (int j = 0; j < 4; ++j) rec[k++] = static_cast<float>(g.rotation[static_cast<size_t>(j)] / qn);
        rec[k++] = static_cast<float>(g.scale_u);
        rec[k++] = static_cast<float>(g.scale_v);
        rec[k++] = static_cast<float>(g.opacity);
        for (int j = 0; j < nsh; ++j) rec[k++] = static_cast<float>(g.sh[static_cast<size_t>(j)]);
        f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size() * 4));
    }
    check(f.good(), "save_gaussians: write failed");
}

std::vector<Gaussian2D> load_gaussians(const std::string& path, int* sh_order_out) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_gaussians: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, 8);
    check(f.good() && std::memcmp(magic, "LARA-GS1", 8) == 0,
          "load_gaussians: '" + path + "' is not a LARA-GS1 file");
    uint32_t count = 0, order = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    f.read(reinterpret_cast<char*>(&order), 4);
    check(order == 0 || order == 2, "load_gaussians: unsupported sh order");
    const int nsh = order == 0 ? 3 : 27;
    if (sh_order_out) *sh_order_out = static_cast<int>(order);
    std::vector<Gaussian2D> out(count);
    std::vector<float> rec(static_cast<size_t>(10 + nsh));
    for (uint32_t i = 0; i < count; ++i) {
        f.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size() * 4));
        check(f.good(), "load_gaussians: truncated record " + std::to_string(i));
        Gaussian2D& g = out[i];
        size_t k = 0;
        g.position = {rec[k], rec[k + 1], rec[k + 2]};
        k += 3;
        for (int j = 0; j < 4; ++j) g.rotation[static_cast<size_t>(j)] = rec[k++];
        g.scale_u = rec[k++];
        g.scale_v = rec[k++];
        g.opacity = rec[k++];
        for (int j = 0; j < nsh; ++j) g.sh[static_cast<size_t>(j)] = rec[k++];
    }
    return out;
}

}  // namespace lara
