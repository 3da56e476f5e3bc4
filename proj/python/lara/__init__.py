"""Feed-forward 2D-Gaussian radiance fields: python surface over the C++ core."""

from ._lara import (
    Model,
    depth_metrics,
    distortion_loss_ray,
    evaluate,
    gen_dataset,
    kmeans_points,
    orbit_trajectory,
    plucker_rays,
    project_points,
    psnr,
    rasterize,
    sh_eval,
    ssim,
    train,
    tsdf_fuse_mesh,
)

__all__ = [
    "Model",
    "depth_metrics",
    "distortion_loss_ray",
    "evaluate",
    "gen_dataset",
    "kmeans_points",
    "orbit_trajectory",
    "plucker_rays",
    "project_points",
    "psnr",
    "rasterize",
    "sh_eval",
    "ssim",
    "train",
    "tsdf_fuse_mesh",
]
