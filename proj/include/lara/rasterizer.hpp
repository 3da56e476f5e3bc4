#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "lara/camera.hpp"
#include "lara/core.hpp"
#include "lara/tensor.hpp"

namespace lara {

// One 2D Gaussian surfel: world center, tangent frame as a unit quaternion,
// in-plane scales, opacity and order-2 SH coefficients (3 channels x 9,
// channel-major).
struct Gaussian2D {
    Vec3 position;
    std::array<double, 4> rotation{1, 0, 0, 0};  // (w, x, y, z)
    double scale_u = 0.1, scale_v = 0.1;
    double opacity = 1.0;
    std::array<double, 27> sh{};
};

struct SplatFrame {
    Vec3 t_u, t_v, normal;  // columns of the rotation matrix; normal = t_u x t_v
};

SplatFrame build_frame(const std::array<double, 4>& quat);
// Pullback of (d_tu, d_tv, d_n) through the quaternion-to-frame map,
// including the normalization of the raw quaternion.
std::array<double, 4> build_frame_backward(const std::array<double, 4>& quat, const Vec3& d_tu,
                                           const Vec3& d_tv, const Vec3& d_n);

// Real SH basis up to order 2 at a unit direction.
std::array<double, 9> sh_basis(const Vec3& dir);
void sh_basis_with_grad(const Vec3& dir, std::array<double, 9>& basis, std::array<Vec3, 9>& dbasis);
// Per-channel dot of coeffs with the basis, +0.5 offset, clamped to [0, 1].
// sh_order must be 0 or 2.
Vec3 sh_eval(const double* coeffs, const Vec3& dir, int sh_order = 2);

struct RaySplatHit {
    double u = 0, v = 0;   // plane coordinates divided by the scales
    double t = 0;          // ray parameter (distance for unit directions)
    double gauss = 0;      // exp(-(u^2+v^2)/2)
};
// Plane intersection in the tangent frame. none when grazing (|dir.n| < 1e-6),
// behind the near plane, or when the contribution falls below g_cutoff.
std::optional<RaySplatHit> ray_splat_intersect(const Gaussian2D& g, const Vec3& origin, const Vec3& dir,
                                               double near = 1e-4, double g_cutoff = 1.0 / 255.0);

struct RasterizeConfig {
    int tile_size = 16;
    double g_cutoff = 1.0 / 255.0;       // per-intersection contribution cull
    double stop_transmittance = 1e-4;    // front-to-back early stop; 0 disables
    double near = 1e-4;                  // camera-z near plane
    double eps_div = 1e-8;               // depth normalization floor
    Vec3 background{1, 1, 1};
    int sh_order = 2;
};

// One composited intersection along a pixel ray; z is camera-frame depth and
// the per-pixel list is sorted by increasing z (splat id breaks ties).
struct RayIntersectionEntry {
    int32_t splat = 0;
    double z = 0;
    double gauss = 0;
    double alpha = 0;
    double weight = 0;       // alpha * gauss * transmittance
    Vec3 normal_cam{};       // unit splat normal in camera space, oriented toward the camera
};

class RenderState;

struct RenderResult {
    Tensor rgb;     // [H, W, 3]
    Tensor depth;   // [H, W], alpha-weighted expected camera-z: sum(w z) / (alpha + eps_div)
    Tensor alpha;   // [H, W]
    Tensor normal;  // [H, W, 3], camera space
    std::shared_ptr<RenderState> state;
};

// Differentiable tile rasterizer. Inputs: position [N,3], rotation [N,4],
// scale [N,2], opacity [N] in [0,1], sh [N,27]. Backward produces exact
// analytic gradients for all five inputs; loss terms may additionally push
// per-intersection gradients through the retained state.
RenderResult rasterize(const Tensor& position, const Tensor& rotation, const Tensor& scale,
                       const Tensor& opacity, const Tensor& sh, const Camera& cam,
                       const RasterizeConfig& cfg = {});

RenderResult rasterize_gaussians(const std::vector<Gaussian2D>& splats, const Camera& cam,
                                 const RasterizeConfig& cfg = {});

// True when any rasterizer input participates in the tape.
bool rasterizer_tracks_gradients(const RenderState& st);

// Read access to the retained per-ray lists.
int64_t intersection_count(const RenderState& st);
std::vector<RayIntersectionEntry> pixel_intersections(const RenderState& st, int64_t pixel);
void pixel_intersections_into(const RenderState& st, int64_t pixel, std::vector<RayIntersectionEntry>& out);
int64_t pixel_count(const RenderState& st);

// Per-intersection gradient hooks used by the regularization losses. `index`
// counts intersections within the pixel's sorted list.
void add_intersection_grad(RenderState& st, int64_t pixel, int64_t index, double d_weight, double d_z,
                           const Vec3& d_normal_cam);
// The loss op that deposits the gradients above must register this node as a
// parent so the rasterizer backward runs after it.
NodePtr render_anchor(const RenderResult& r);

// Splat dump: magic "LARA-GS1", u32 count, u32 sh_order, then per record
// little-endian f32 (p[3], q[4], s[2], opacity, sh[3*(order+1)^2]).
void save_gaussians(const std::string& path, const std::vector<Gaussian2D>& splats, int sh_order = 2);
std::vector<Gaussian2D> load_gaussians(const std::string& path, int* sh_order_out = nullptr);

}  // namespace lara
