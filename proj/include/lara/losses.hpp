#pragma once

#include <vector>

#include "lara/camera.hpp"
#include "lara/rasterizer.hpp"
#include "lara/tensor.hpp"

namespace lara {

struct LossWeights {
    double gamma_d = 1000.0;
    double gamma_n = 0.2;
    bool reg_enabled = false;
    int reg_start_epoch = 15;
};

// --- reconstruction -----------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target);
// 1 - mean SSIM, 11x11 Gaussian window sigma=1.5, C1=0.01^2, C2=0.03^2,
// zero padding at the borders; inputs [H,W,3] (or [H,W]) in [0,1].
Tensor ssim_loss(const Tensor& pred, const Tensor& target);
Tensor ssim_mean(const Tensor& a, const Tensor& b);
Tensor recon_loss(const Tensor& pred, const Tensor& target);  // mse + ssim loss

// --- regularizers over the rasterizer's per-ray lists --------------------------

// Mean over all pixels of sum_{i,j} w_i w_j |z_i - z_j| (both orders counted).
// Prefix-sum evaluation; gradients flow through w and z into the splats.
Tensor distortion_loss(const RenderResult& render);
// Mean over all pixels of sum_i w_i (1 - n_i . N(pixel)); N in camera space,
// both the splat normals and N oriented toward the camera.
Tensor normal_consistency_loss(const RenderResult& render, const Tensor& normal_map);
// Central-difference normals from a depth map (camera space, oriented toward
// the camera, zero where the local cross product vanishes). Differentiable.
Tensor depth_to_normal(const Tensor& depth, const Camera& cam);

// Single-ray helpers shared with tests.
double distortion_loss_ray(const std::vector<double>& weights, const std::vector<double>& zs);
double normal_loss_ray(const std::vector<double>& weights, const std::vector<Vec3>& normals,
                       const Vec3& reference);
// L_d evaluated on the retained lists without building graph nodes.
double distortion_value(const RenderState& st);

// --- metrics -------------------------------------------------------------------

double psnr(const std::vector<double>& pred, const std::vector<double>& target);  // [0,1] images
double ssim_value(const Tensor& a, const Tensor& b);

struct DepthMetrics {
    double abs_err = 0;
    double acc_005 = 0;  // fraction with |pred-gt| < 0.005
    double acc_01 = 0;
    double acc_02 = 0;
    int64_t pixels = 0;
};
DepthMetrics depth_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<uint8_t>& mask);

}  // namespace lara
