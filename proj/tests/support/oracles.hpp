#pragma once

// Independent reference implementations used to freeze expected values.
// Nothing here may call into the production rasterizer/loss internals.

#include <functional>
#include <vector>

#include "lara/camera.hpp"
#include "lara/core.hpp"
#include "lara/rasterizer.hpp"

namespace oracle {

struct Buffers {
    int w = 0, h = 0;
    std::vector<double> rgb;     // H*W*3
    std::vector<double> depth;   // H*W
    std::vector<double> alpha;   // H*W
    std::vector<double> normal;  // H*W*3 camera space
};

// Per-pixel loop over all splats: no tiling, no early stop, only the
// G < g_cutoff contribution cull.
Buffers rasterize_bruteforce(const std::vector<lara::Gaussian2D>& splats, const lara::Camera& cam,
                             lara::Vec3 background, double g_cutoff = 1.0 / 255.0, double near = 1e-4,
                             double eps_div = 1e-8);

// Direct sliding-window SSIM (11x11 Gaussian sigma=1.5, zero padding),
// mean over pixels and channels; images are H*W*C row-major.
double ssim_reference(const std::vector<double>& a, const std::vector<double>& b, int h, int w, int c);

// O(n^2) double sum over all ordered intersection pairs of one ray.
double distortion_reference(const std::vector<double>& weights, const std::vector<double>& zs);

// Midpoint product quadrature of f over the unit sphere.
double sphere_integral(const std::function<double(const lara::Vec3&)>& f, int n_phi = 40, int n_cos = 25);

// Random test scenes (splats near the origin, cameras on a sphere looking in).
std::vector<lara::Gaussian2D> random_scene(lara::RandomStream& rng, int count);
lara::Camera random_camera(lara::RandomStream& rng, int width, int height);

}  // namespace oracle
