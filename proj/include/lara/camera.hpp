#pragma once

#include <array>
#include <memory>
#include <vector>

#include "lara/core.hpp"
#include "lara/tensor.hpp"

namespace lara {

// Pinhole camera, axis convention: camera x right, y down, z forward.
// `rot`/`trans` hold the world-to-camera rigid transform.
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    std::array<double, 9> rot{};    // row-major world-to-camera rotation
    Vec3 trans{};                   // world-to-camera translation
    int width = 0, height = 0;

    static Camera from_matrices(const std::array<double, 9>& intrinsics,
                                const std::array<double, 16>& world_to_cam, int width, int height);

    Vec3 to_camera(const Vec3& p_world) const;
    Vec3 to_world(const Vec3& p_cam) const;
    Vec3 rotate_to_camera(const Vec3& v_world) const;
    Vec3 rotate_to_world(const Vec3& v_cam) const;
    Vec3 center() const;                       // camera position in world coordinates
    Vec3 forward_world() const;                // +z axis in world coordinates
    void validate() const;                     // orthonormal rotation, positive focals
    std::array<double, 16> world_to_cam_matrix() const;
    std::array<double, 9> intrinsics_matrix() const;
};

// Camera looking at `target` from `position` with image y pointing down;
// `up_hint` fixes the roll (must not be parallel to the view direction).
Camera look_at_camera(const Vec3& position, const Vec3& target, const Vec3& up_hint, double focal,
                      int width, int height);

struct PluckerRay {
    Vec3 d;  // unit direction, world
    Vec3 m;  // moment o x d, world
};

// Ray through a (sub)pixel, in world coordinates. (u, v) are continuous pixel
// coordinates; the center of pixel (ix, iy) is (ix + 0.5, iy + 0.5).
PluckerRay plucker_ray(const Camera& cam, double u, double v);
Vec3 pixel_ray_direction(const Camera& cam, double u, double v);  // unit, world

struct Projection {
    double u = 0, v = 0;
    double depth = 0;   // camera-frame z
    bool in_front = false;
};
Projection project_point(const Vec3& p_world, const Camera& cam);
Vec3 unproject_pixel(const Camera& cam, double u, double v, double depth);

struct VoxelGrid {
    int64_t side = 0;
    Vec3 lo{-0.5, -0.5, -0.5};
    Vec3 hi{0.5, 0.5, 0.5};

    double voxel_size() const { return (hi.x - lo.x) / static_cast<double>(side); }
    int64_t count() const { return side * side * side; }
    // Row-major over (z, y, x) to match the volume tensor layout.
    Vec3 center(int64_t flat_index) const;
    Vec3 center(int64_t ix, int64_t iy, int64_t iz) const;
};

// Precomputed bilinear lift of a token grid [Ht, Wt, C] into a voxel grid:
// each voxel center projects into the view and samples the token lattice
// (token (i, j) sits at pixel ((j+0.5)*patch, (i+0.5)*patch)). Voxels behind
// the camera or outside the image get exact zeros. Linear in the tokens.
std::shared_ptr<SparseMatrix> build_lift_matrix(const Camera& cam, const VoxelGrid& grid,
                                                int64_t tokens_h, int64_t tokens_w, int patch);
Tensor lift_features(const Tensor& tokens, const std::shared_ptr<SparseMatrix>& lift);

struct KMeansResult {
    std::vector<int> assignment;          // per input point
    std::vector<Vec3> centroids;
    std::vector<int> representatives;     // member nearest its centroid, one per cluster
    double objective = 0;                 // sum of squared distances to assigned centroid
};

// Lloyd iterations on camera centers with k-means++ seeding; deterministic
// under a fixed seed. Runs a few restarts and keeps the lowest objective.
KMeansResult kmeans_points(const std::vector<Vec3>& points, int k, uint64_t seed, int max_iters = 100,
                           int restarts = 4);
KMeansResult kmeans_cluster_cameras(const std::vector<Camera>& cams, int k, uint64_t seed);

}  // namespace lara
