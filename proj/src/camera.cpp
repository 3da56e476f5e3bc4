#include "lara/camera.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lara {

Camera Camera::from_matrices(const std::array<double, 9>& k, const std::array<double, 16>& w2c,
                             int width_, int height_) {
    Camera cam;
    cam.fx = k[0];
    cam.fy = k[4];
    cam.cx = k[2];
    cam.cy = k[5];
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cam.rot[static_cast<size_t>(r * 3 + c)] = w2c[static_cast<size_t>(r * 4 + c)];
    cam.trans = {w2c[3], w2c[7], w2c[11]};
    cam.width = width_;
    cam.height = height_;
    cam.validate();
    return cam;
}

Vec3 Camera::rotate_to_camera(const Vec3& v) const {
    return {rot[0] * v.x + rot[1] * v.y + rot[2] * v.z, rot[3] * v.x + rot[4] * v.y + rot[5] * v.z,
            rot[6] * v.x + rot[7] * v.y + rot[8] * v.z};
}

Vec3 Camera::rotate_to_world(const Vec3& v) const {
    return {rot[0] * v.x + rot[3] * v.y + rot[6] * v.z, rot[1] * v.x + rot[4] * v.y + rot[7] * v.z,
            rot[2] * v.x + rot[5] * v.y + rot[8] * v.z};
}

Vec3 Camera::to_camera(const Vec3& p) const { return rotate_to_camera(p) + trans; }

Vec3 Camera::to_world(const Vec3& p) const { return rotate_to_world(p - trans); }

Vec3 Camera::center() const { return rotate_to_world(-trans); }

Vec3 Camera::forward_world() const { return {rot[6], rot[7], rot[8]}; }

void Camera::validate() const {
    check(fx > 0 && fy > 0, "Camera: focal lengths must be positive (fx=" + std::to_string(fx) +
                                ", fy=" + std::to_string(fy) + ")");
    check(width > 0 && height > 0, "Camera: image size must be positive");
    // ||R^T R - I||_inf < 1e-6
    double worst = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int r = 0; r < 3; ++r)
                s += rot[static_cast<size_t>(r * 3 + i)] * rot[static_cast<size_t>(r * 3 + j)];
            worst = std::max(worst, std::fabs(s - (i == j ? 1.0 : 0.0)));
        }
    check(worst < 1e-6, "Camera: rotation block is not orthonormal (||R^T R - I||_inf = " +
                            std::to_string(worst) + ")");
}

std::array<double, 16> Camera::world_to_cam_matrix() const {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m[static_cast<size_t>(r * 4 + c)] = rot[static_cast<size_t>(r * 3 + c)];
    m[3] = trans.x;
    m[7] = trans.y;
    m[11] = trans.z;
    m[15] = 1.0;
    return m;
}

std::array<double, 9> Camera::intrinsics_matrix() const {
    return {fx, 0, cx, 0, fy, cy, 0, 0, 1};
}

Camera look_at_camera(const Vec3& position, const Vec3& target, const Vec3& up_hint, double focal,
                      int width, int height) {
    Vec3 fwd = normalized(target - position);
    Vec3 right = cross(fwd, up_hint);
    check(norm(right) > 1e-9, "look_at_camera: view direction parallel to up hint");
    right = normalized(right);
    Vec3 down = cross(fwd, right);  // = -corrected_up; gives image y pointing down
    Camera cam;
    cam.fx = cam.fy = focal;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.width = width;
    cam.height = height;
    cam.rot = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
    Vec3 t = cam.rotate_to_camera(-position);
    cam.trans = t;
    cam.validate();
    return cam;
}

Vec3 pixel_ray_direction(const Camera& cam, double u, double v) {
    check(cam.fx > 1e-12 && cam.fy > 1e-12, "pixel_ray_direction: degenerate intrinsics (zero focal)");
    Vec3 dir_cam{(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0};
    return normalized(cam.rotate_to_world(dir_cam));
}

PluckerRay plucker_ray(const Camera& cam, double u, double v) {
    PluckerRay ray;
    ray.d = pixel_ray_direction(cam, u, v);
    ray.m = cross(cam.center(), ray.d);
    return ray;
}

Projection project_point(const Vec3& p_world, const Camera& cam) {
    const Vec3 pc = cam.to_camera(p_world);
    Projection pr;
    pr.depth = pc.z;
    pr.in_front = pc.z > 1e-8;
    pr.u = cam.fx * pc.x / pc.z + cam.cx;
    pr.v = cam.fy * pc.y / pc.z + cam.cy;
    return pr;
}

Vec3 unproject_pixel(const Camera& cam, double u, double v, double depth) {
    Vec3 pc{(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
    return cam.to_world(pc);
}

Vec3 VoxelGrid::center(int64_t flat) const {
    const int64_t x = flat % side;
    const int64_t y = (flat / side) % side;
    const int64_t z = flat / (side * side);
    return center(x, y, z);
}

Vec3 VoxelGrid::center(int64_t ix, int64_t iy, int64_t iz) const {
    const double s = voxel_size();
    return {lo.x + (static_cast<double>(ix) + 0.5) * s, lo.y + (static_cast<double>(iy) + 0.5) * s,
            lo.z + (static_cast<double>(iz) + 0.5) * s};
}

std::shared_ptr<SparseMatrix> build_lift_matrix(const Camera& cam, const VoxelGrid& grid,
                                                int64_t tokens_h, int64_t tokens_w, int patch) {
    auto s = std::make_shared<SparseMatrix>();
    s->rows = grid.count();
    s->cols = tokens_h * tokens_w;
    s->row_offsets.reserve(static_cast<size_t>(s->rows) + 1);
    s->row_offsets.push_back(0);
    for (int64_t v = 0; v < grid.count(); ++v) {
        const Projection pr = project_point(grid.center(v), cam);
        const bool inside = pr.in_front && pr.u >= 0 && pr.u < cam.width && pr.v >= 0 && pr.v < cam.height;
        if (inside) {
            // token-lattice coordinates of the projected pixel
            const double tx = pr.u / patch - 0.5;
            const double ty = pr.v / patch - 0.5;
            const int64_t x0 = static_cast<int64_t>(std::floor(tx));
            const int64_t y0 = static_cast<int64_t>(std::floor(ty));
            const double fx = tx - static_cast<double>(x0);
            const double fy = ty - static_cast<double>(y0);
            const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
            const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
            for (int t = 0; t < 4; ++t) {
                if (xs[t] < 0 || xs[t] >= tokens_w || ys[t] < 0 || ys[t] >= tokens_h) continue;
                if (w[t] == 0.0) continue;
                s->col_indices.push_back(ys[t] * tokens_w + xs[t]);
                s->weights.push_back(w[t]);
            }
        }
        s->row_offsets.push_back(static_cast<int64_t>(s->col_indices.size()));
    }
    return s;
}

Tensor lift_features(const Tensor& tokens, const std::shared_ptr<SparseMatrix>& lift) {
    const Shape& sh = tokens.shape();
    check(sh.size() == 2 || sh.size() == 3, "lift_features: tokens must be [T, C] or [H', W', C]");
    Tensor flat = sh.size() == 3 ? reshape(tokens, {sh[0] * sh[1], sh[2]}) : tokens;
    check(flat.shape()[0] == lift->cols, "lift_features: token count " + std::to_string(flat.shape()[0]) +
                                             " does not match lift matrix (" + std::to_string(lift->cols) +
                                             ")");
    return sparse_matmul(lift, flat);
}

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
    const Vec3 d = a - b;
    return dot(d, d);
}

KMeansResult kmeans_once(const std::vector<Vec3>& pts, int k, RandomStream rng, int max_iters) {
    const int n = static_cast<int>(pts.size());
    std::vector<Vec3> centroids;
    centroids.reserve(static_cast<size_t>(k));
    // k-means++ seeding
    centroids.push_back(pts[static_cast<size_t>(rng.uniform_int(n))]);
    std::vector<double> d2(static_cast<size_t>(n));
    while (static_cast<int>(centroids.size()) < k) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const auto& c : centroids) best = std::min(best, sq_dist(pts[static_cast<size_t>(i)], c));
            d2[static_cast<size_t>(i)] = best;
            total += best;
        }
        if (total <= 0) {
            centroids.push_back(pts[static_cast<size_t>(rng.uniform_int(n))]);
            continue;
        }
        double r = rng.uniform() * total;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            r -= d2[static_cast<size_t>(i)];
            if (r <= 0) {
                pick = i;
                break;
            }
        }
        centroids.push_back(pts[static_cast<size_t>(pick)]);
    }

    KMeansResult res;
    res.assignment.assign(static_cast<size_t>(n), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::max();
            for (int c = 0; c < k; ++c) {
                const double d = sq_dist(pts[static_cast<size_t>(i)], centroids[static_cast<size_t>(c)]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (res.assignment[static_cast<size_t>(i)] != best) {
                res.assignment[static_cast<size_t>(i)] = best;
                changed = true;
            }
        }
        std::vector<Vec3> sums(static_cast<size_t>(k));
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            sums[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])] += pts[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0)
                centroids[static_cast<size_t>(c)] = sums[static_cast<size_t>(c)] / counts[static_cast<size_t>(c)];
        }
        if (!changed && iter > 0) break;
    }
    res.centroids = centroids;
    res.objective = 0;
    for (int i = 0; i < n; ++i)
        res.objective += sq_dist(pts[static_cast<size_t>(i)],
                                 centroids[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])]);
    res.representatives.assign(static_cast<size_t>(k), -1);
    std::vector<double> best_d(static_cast<size_t>(k), std::numeric_limits<double>::max());
    for (int i = 0; i < n; ++i) {
        const int c = res.assignment[static_cast<size_t>(i)];
        const double d = sq_dist(pts[static_cast<size_t>(i)], centroids[static_cast<size_t>(c)]);
        if (d < best_d[static_cast<size_t>(c)]) {
            best_d[static_cast<size_t>(c)] = d;
            res.representatives[static_cast<size_t>(c)] = i;
        }
    }
    return res;
}

}  // namespace

KMeansResult kmeans_points(const std::vector<Vec3>& points, int k, uint64_t seed, int max_iters,
                           int restarts) {
    check(static_cast<int>(points.size()) >= k, "kmeans: need at least k=" + std::to_string(k) +
                                                    " points, got " + std::to_string(points.size()));
    // distinct-point count
    std::vector<Vec3> uniq;
    for (const auto& p : points) {
        bool dup = false;
        for (const auto& q : uniq)
            if (sq_dist(p, q) < 1e-24) {
                dup = true;
                break;
            }
        if (!dup) uniq.push_back(p);
    }
    check(static_cast<int>(uniq.size()) >= k,
          "kmeans: only " + std::to_string(uniq.size()) + " distinct points for k=" + std::to_string(k));

    RandomStream root(seed);
    KMeansResult best;
    bool have = false;
    for (int r = 0; r < std::max(1, restarts); ++r) {
        KMeansResult res = kmeans_once(points, k, root.split(static_cast<uint64_t>(r) + 1), max_iters);
        if (!have || res.objective < best.objective) {
            best = std::move(res);
            have = true;
        }
    }
    return best;
}

KMeansResult kmeans_cluster_cameras(const std::vector<Camera>& cams, int k, uint64_t seed) {
    std::vector<Vec3> centers;
    centers.reserve(cams.size());
    for (const auto& c : cams) centers.push_back(c.center());
    return kmeans_points(centers, k, seed);
}

}  // namespace lara
