#include "lara/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace lara {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::mutex g_blur_mutex;
std::map<int64_t, Tensor> g_blur_cache;

// Band matrix applying an 11-tap Gaussian (sigma 1.5) along one axis with
// zero padding, as a dense [n, n] constant.
Tensor blur_matrix(int64_t n) {
    std::lock_guard<std::mutex> lock(g_blur_mutex);
    auto it = g_blur_cache.find(n);
    if (it != g_blur_cache.end()) return it->second;
    const int radius = 5;
    double kernel[11];
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (1.5 * 1.5));
        total += kernel[i + radius];
    }
    for (double& k : kernel) k /= total;
    std::vector<double> m(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int j = -radius; j <= radius; ++j) {
            const int64_t col = i + j;
            if (col < 0 || col >= n) continue;
            m[static_cast<size_t>(i * n + col)] = kernel[j + radius];
        }
    Tensor t = Tensor::from_vector({n, n}, std::move(m));
    g_blur_cache.emplace(n, t);
    return t;
}

Tensor blur2d(const Tensor& x, int64_t h, int64_t w) {
    return matmul(blur_matrix(h), matmul(x, blur_matrix(w)));
}

Tensor ssim_map_channel(const Tensor& x, const Tensor& y, int64_t h, int64_t w) {
    Tensor mu_x = blur2d(x, h, w);
    Tensor mu_y = blur2d(y, h, w);
    Tensor sigma_x = sub(blur2d(mul(x, x), h, w), mul(mu_x, mu_x));
    Tensor sigma_y = sub(blur2d(mul(y, y), h, w), mul(mu_y, mu_y));
    Tensor sigma_xy = sub(blur2d(mul(x, y), h, w), mul(mu_x, mu_y));
    Tensor num = mul(add_scalar(mul_scalar(mul(mu_x, mu_y), 2.0), kC1),
                     add_scalar(mul_scalar(sigma_xy, 2.0), kC2));
    Tensor den = mul(add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), kC1),
                     add_scalar(add(sigma_x, sigma_y), kC2));
    return divide(num, den);
}

void check_image_pair(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
    check(a.shape().size() == 2 || (a.shape().size() == 3 && a.shape()[2] == 3),
          std::string(op) + ": expected [H,W] or [H,W,3], got " + shape_str(a.shape()));
}

}  // namespace

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check(pred.shape() == target.shape(), "mse_loss: shape mismatch " + shape_str(pred.shape()) +
                                              " vs " + shape_str(target.shape()));
    Tensor d = sub(pred, target);
    return mean_all(mul(d, d));
}

Tensor ssim_mean(const Tensor& a, const Tensor& b) {
    check_image_pair(a, b, "ssim");
    const int64_t h = a.shape()[0], w = a.shape()[1];
    if (a.shape().size() == 2) return mean_all(ssim_map_channel(a, b, h, w));
    std::vector<Tensor> maps;
    for (int c = 0; c < 3; ++c) {
        Tensor xc = reshape(slice(a, 2, c, 1), {h, w});
        Tensor yc = reshape(slice(b, 2, c, 1), {h, w});
        maps.push_back(ssim_map_channel(xc, yc, h, w));
    }
    return mul_scalar(add(add(mean_all(maps[0]), mean_all(maps[1])), mean_all(maps[2])), 1.0 / 3.0);
}

Tensor ssim_loss(const Tensor& pred, const Tensor& target) {
    return add_scalar(neg(ssim_mean(pred, target)), 1.0);
}

Tensor recon_loss(const Tensor& pred, const Tensor& target) {
    return add(mse_loss(pred, target), ssim_loss(pred, target));
}

// ---------------------------------------------------------------------------
// regularizers
// ---------------------------------------------------------------------------

double distortion_loss_ray(const std::vector<double>& weights, const std::vector<double>& zs) {
    check(weights.size() == zs.size(), "distortion_loss_ray: length mismatch");
    double acc = 0, w_pre = 0, s_pre = 0;
    for (size_t j = 0; j < weights.size(); ++j) {
        acc += 2.0 * weights[j] * (zs[j] * w_pre - s_pre);
        w_pre += weights[j];
        s_pre += weights[j] * zs[j];
    }
    return acc;
}

double normal_loss_ray(const std::vector<double>& weights, const std::vector<Vec3>& normals,
                       const Vec3& reference) {
    check(weights.size() == normals.size(), "normal_loss_ray: length mismatch");
    double acc = 0;
    for (size_t i = 0; i < weights.size(); ++i) acc += weights[i] * (1.0 - dot(normals[i], reference));
    return acc;
}

double distortion_value(const RenderState& st) {
    const int64_t pixels = pixel_count(st);
    std::vector<RayIntersectionEntry> entries;
    double total = 0;
    for (int64_t px = 0; px < pixels; ++px) {
        pixel_intersections_into(st, px, entries);
        if (entries.size() < 2) continue;
        double w_pre = 0, s_pre = 0;
        for (const auto& e : entries) {
            total += 2.0 * e.weight * (e.z * w_pre - s_pre);
            w_pre += e.weight;
            s_pre += e.weight * e.z;
        }
    }
    return total / static_cast<double>(pixels);
}

Tensor distortion_loss(const RenderResult& render) {
    auto st = render.state;
    const int64_t pixels = pixel_count(*st);
    auto out = make_node({1});
    (*out->data)[0] = distortion_value(*st);

    NodePtr anchor = rasterizer_tracks_gradients(*st) ? render_anchor(render) : nullptr;
    if (anchor) {
        out->needs_grad = true;
        out->parents = {anchor};
        out->backward_fn = [st, pixels](TensorNode& self) {
            const double scale = self.grad[0] / static_cast<double>(pixels);
            if (scale == 0) return;
            std::vector<RayIntersectionEntry> entries;
            for (int64_t px = 0; px < pixels; ++px) {
                pixel_intersections_into(*st, px, entries);
                const size_t m = entries.size();
                if (m < 2) continue;
                double w_suf = 0, s_suf = 0;
                for (const auto& e : entries) {
                    w_suf += e.weight;
                    s_suf += e.weight * e.z;
                }
                double w_pre = 0, s_pre = 0;
                for (size_t k = 0; k < m; ++k) {
                    const auto& e = entries[k];
                    w_suf -= e.weight;
                    s_suf -= e.weight * e.z;
                    const double dwk = 2.0 * (e.z * w_pre - s_pre) + 2.0 * (s_suf - e.z * w_suf);
                    const double dzk = 2.0 * e.weight * (w_pre - w_suf);
                    add_intersection_grad(*st, px, static_cast<int64_t>(k), scale * dwk, scale * dzk, {});
                    w_pre += e.weight;
                    s_pre += e.weight * e.z;
                }
            }
        };
    }
    return Tensor(out);
}

Tensor normal_consistency_loss(const RenderResult& render, const Tensor& normal_map) {
    auto st = render.state;
    const int64_t pixels = pixel_count(*st);
    check(normal_map.numel() == pixels * 3, "normal_consistency_loss: normal map must be [H,W,3]");
    auto nm_node = normal_map.node();
    auto out = make_node({1});
    {
        const auto& nv = *nm_node->data;
        std::vector<RayIntersectionEntry> entries;
        double total = 0;
        for (int64_t px = 0; px < pixels; ++px) {
            pixel_intersections_into(*st, px, entries);
            if (entries.empty()) continue;
            const Vec3 ref{nv[static_cast<size_t>(3 * px)], nv[static_cast<size_t>(3 * px + 1)],
                           nv[static_cast<size_t>(3 * px + 2)]};
            for (const auto& e : entries) total += e.weight * (1.0 - dot(e.normal_cam, ref));
        }
        (*out->data)[0] = total / static_cast<double>(pixels);
    }

    const bool splat_grads = rasterizer_tracks_gradients(*st);
    if (splat_grads || normal_map.requires_grad()) {
        out->needs_grad = true;
        if (splat_grads) out->parents.push_back(render_anchor(render));
        out->parents.push_back(nm_node);
        out->backward_fn = [st, nm_node, pixels, splat_grads](TensorNode& self) {
            const double scale = self.grad[0] / static_cast<double>(pixels);
            if (scale == 0) return;
            const auto& nv = *nm_node->data;
            double* ng = nullptr;
            if (nm_node->needs_grad) {
                nm_node->ensure_grad();
                ng = nm_node->grad.data();
            }
            std::vector<RayIntersectionEntry> entries;
            for (int64_t px = 0; px < pixels; ++px) {
                pixel_intersections_into(*st, px, entries);
                if (entries.empty()) continue;
                const Vec3 ref{nv[static_cast<size_t>(3 * px)], nv[static_cast<size_t>(3 * px + 1)],
                               nv[static_cast<size_t>(3 * px + 2)]};
                for (size_t k = 0; k < entries.size(); ++k) {
                    const auto& e = entries[k];
                    if (splat_grads) {
                        const double dwk = (1.0 - dot(e.normal_cam, ref)) * scale;
                        const Vec3 dnk = ref * (-e.weight * scale);
                        add_intersection_grad(*st, px, static_cast<int64_t>(k), dwk, 0.0, dnk);
                    }
                    if (ng) {
                        ng[3 * px] += -e.weight * e.normal_cam.x * scale;
                        ng[3 * px + 1] += -e.weight * e.normal_cam.y * scale;
                        ng[3 * px + 2] += -e.weight * e.normal_cam.z * scale;
                    }
                }
            }
        };
    }
    return Tensor(out);
}

Tensor depth_to_normal(const Tensor& depth, const Camera& cam) {
    const int64_t h = cam.height, w = cam.width;
    check(depth.numel() == h * w, "depth_to_normal: depth must be [H,W]");

    // camera-frame ray directions per pixel (z = 1 plane)
    std::vector<double> rays(static_cast<size_t>(h * w * 3));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t px = y * w + x;
            rays[static_cast<size_t>(3 * px)] = (static_cast<double>(x) + 0.5 - cam.cx) / cam.fx;
            rays[static_cast<size_t>(3 * px + 1)] = (static_cast<double>(y) + 0.5 - cam.cy) / cam.fy;
            rays[static_cast<size_t>(3 * px + 2)] = 1.0;
        }
    Tensor ray_map = Tensor::from_vector({h, w, 3}, rays);
    Tensor points = mul(reshape(depth, {h, w, 1}), ray_map);  // [H,W,3] camera space
    Tensor pts = reshape(points, {h * w, 3});

    auto shift_idx = [&](int dx, int dy) {
        auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(h * w));
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const int64_t sx = std::clamp<int64_t>(x + dx, 0, w - 1);
                const int64_t sy = std::clamp<int64_t>(y + dy, 0, h - 1);
                (*idx)[static_cast<size_t>(y * w + x)] = sy * w + sx;
            }
        return idx;
    };
    Tensor ddx = sub(take_rows(pts, shift_idx(1, 0), 3), take_rows(pts, shift_idx(-1, 0), 3));
    Tensor ddy = sub(take_rows(pts, shift_idx(0, 1), 3), take_rows(pts, shift_idx(0, -1), 3));

    auto comp = [](const Tensor& t, int c) { return slice(t, 1, c, 1); };
    Tensor cx = sub(mul(comp(ddx, 1), comp(ddy, 2)), mul(comp(ddx, 2), comp(ddy, 1)));
    Tensor cy = sub(mul(comp(ddx, 2), comp(ddy, 0)), mul(comp(ddx, 0), comp(ddy, 2)));
    Tensor cz = sub(mul(comp(ddx, 0), comp(ddy, 1)), mul(comp(ddx, 1), comp(ddy, 0)));
    Tensor raw = concat({cx, cy, cz}, 1);  // [H*W, 3]

    Tensor len2 = sum_axis(mul(raw, raw), 1);           // [H*W]
    Tensor len = sqrt_(add_scalar(len2, 1e-24));        // soft floor keeps empty pixels at zero
    Tensor unit = divide(raw, reshape(len, {h * w, 1}));

    // orient toward the camera: flip rows whose normal points along the ray
    auto flips = std::make_shared<std::vector<double>>(static_cast<size_t>(h * w), 1.0);
    const auto& uv = unit.value();
    for (int64_t px = 0; px < h * w; ++px) {
        const double d = uv[static_cast<size_t>(3 * px)] * rays[static_cast<size_t>(3 * px)] +
                         uv[static_cast<size_t>(3 * px + 1)] * rays[static_cast<size_t>(3 * px + 1)] +
                         uv[static_cast<size_t>(3 * px + 2)] * rays[static_cast<size_t>(3 * px + 2)];
        if (d > 0) (*flips)[static_cast<size_t>(px)] = -1.0;
    }
    return reshape(rows_scale(unit, flips), {h, w, 3});
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

double psnr(const std::vector<double>& pred, const std::vector<double>& target) {
    check(pred.size() == target.size() && !pred.empty(), "psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        mse += d * d;
    }
    mse /= static_cast<double>(pred.size());
    if (mse <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim_value(const Tensor& a, const Tensor& b) { return ssim_mean(a, b).item(); }

DepthMetrics depth_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<uint8_t>& mask) {
    check(pred.size() == gt.size() && pred.size() == mask.size(), "depth_metrics: size mismatch");
    DepthMetrics m;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        const double err = std::fabs(pred[i] - gt[i]);
        m.abs_err += err;
        m.acc_005 += err < 0.005 ? 1 : 0;
        m.acc_01 += err < 0.01 ? 1 : 0;
        m.acc_02 += err < 0.02 ? 1 : 0;
        ++m.pixels;
    }
    check(m.pixels > 0, "depth_metrics: empty mask");
    m.abs_err /= static_cast<double>(m.pixels);
    m.acc_005 /= static_cast<double>(m.pixels);
    m.acc_01 /= static_cast<double>(m.pixels);
    m.acc_02 /= static_cast<double>(m.pixels);
    return m;
}

}  // namespace lara
