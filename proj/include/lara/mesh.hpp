#pragma once

#include <string>
#include <vector>

#include "lara/camera.hpp"
#include "lara/imageio.hpp"

namespace lara {

// Circular camera rings looking at a common target, evenly spaced azimuths.
std::vector<Camera> orbit_trajectory(const std::vector<double>& elevations_deg, int views_per_ring,
                                     double radius, const Vec3& look_at, double focal, int width,
                                     int height);

struct TsdfVolume {
    int64_t resolution = 128;
    Vec3 lo{-0.5, -0.5, -0.5};
    Vec3 hi{0.5, 0.5, 0.5};
    double trunc = 0.02;
    std::vector<float> tsdf;    // [R^3], truncated and normalized to [-1, 1]
    std::vector<float> weight;  // [R^3]
    std::vector<float> rgb;     // [R^3 * 3] running averages

    TsdfVolume() = default;
    TsdfVolume(int64_t res, double trunc_dist, const Vec3& lo_ = {-0.5, -0.5, -0.5},
               const Vec3& hi_ = {0.5, 0.5, 0.5});
    double voxel_size() const { return (hi.x - lo.x) / static_cast<double>(resolution); }
    Vec3 voxel_center(int64_t x, int64_t y, int64_t z) const;
    int64_t index(int64_t x, int64_t y, int64_t z) const {
        return (z * resolution + y) * resolution + x;
    }
};

// Projective TSDF update: sdf = depth(pixel) - voxel camera depth, integrated
// where sdf > -trunc with constant weight 1; pixels with alpha < 0.5 or
// non-positive depth are skipped.
void tsdf_integrate(TsdfVolume& volume, const Image& depth, const Image& rgb, const Image& alpha,
                    const Camera& cam);

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Vec3> colors;               // per vertex
    std::vector<std::array<int, 3>> faces;

    bool empty() const { return faces.empty(); }
};

// Marching cubes at iso level 0 over cells whose corners all carry weight;
// vertex colors tri-linearly sampled from the rgb accumulator.
TriangleMesh extract_mesh(const TsdfVolume& volume);

// Marching cubes over an arbitrary scalar field given at grid corners
// (positive outside). Used directly by the analytic-SDF tests.
TriangleMesh marching_cubes(const std::vector<float>& field, int64_t resolution, const Vec3& lo,
                            const Vec3& hi);

void write_ply(const std::string& path, const TriangleMesh& mesh);   // ASCII, per-vertex color
void write_obj(const std::string& path, const TriangleMesh& mesh);   // no color

// Topology check: true when every edge is shared by exactly two triangles.
bool mesh_is_watertight(const TriangleMesh& mesh);

}  // namespace lara
