"""Per-pixel inverse-variance fusion of two depth estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth_oracle import DepthImage

# provenance tags
TAG_INVALID = 0
TAG_A_ONLY = 1
TAG_B_ONLY = 2
TAG_FUSED = 3


@dataclass
class FusedDepth:
    image: DepthImage
    tag: np.ndarray  # per-pixel provenance, one of the TAG_* constants


def fuse_pixel(d1, s1, d2, s2):
    """Minimum-variance combination: sigma^-2 = s1^-2 + s2^-2."""
    if s1 <= 0 or s2 <= 0:
        raise ValueError("sigmas must be strictly positive")
    var = 1.0 / (1.0 / s1**2 + 1.0 / s2**2)
    d = var * (d1 / s1**2 + d2 / s2**2)
    return d, np.sqrt(var)


def fuse_images(a: DepthImage, b: DepthImage, outlier_kappa: float | None = 5.0) -> FusedDepth:
    """Fuse where both valid, pass through where one valid.

    If |d1 - d2| > kappa * sqrt(s1^2 + s2^2) the sources disagree beyond their
    stated uncertainty; the lower-sigma source is kept and the pixel tagged as
    single-source.  Set outlier_kappa=None to fuse unconditionally.
    """
    if a.depth.shape != b.depth.shape:
        raise ValueError("resolution mismatch")
    if a.camera != b.camera:
        raise ValueError("camera mismatch")
    if not (
        np.allclose(a.pose.q, b.pose.q, atol=1e-12) and np.allclose(a.pose.t, b.pose.t, atol=1e-12)
    ):
        raise ValueError("pose mismatch")

    both = a.valid & b.valid
    only_a = a.valid & ~b.valid
    only_b = b.valid & ~a.valid

    depth = np.zeros_like(a.depth)
    sigma = np.full_like(a.sigma, 1.0)
    tag = np.full(a.depth.shape, TAG_INVALID, dtype=np.uint8)

    depth[only_a], sigma[only_a], tag[only_a] = a.depth[only_a], a.sigma[only_a], TAG_A_ONLY
    depth[only_b], sigma[only_b], tag[only_b] = b.depth[only_b], b.sigma[only_b], TAG_B_ONLY

    if both.any():
        d1, s1 = a.depth[both], a.sigma[both]
        d2, s2 = b.depth[both], b.sigma[both]
        var = 1.0 / (1.0 / s1**2 + 1.0 / s2**2)
        df = var * (d1 / s1**2 + d2 / s2**2)
        sf = np.sqrt(var)
        tf = np.full(d1.shape, TAG_FUSED, dtype=np.uint8)
        if outlier_kappa is not None:
            gross = np.abs(d1 - d2) > outlier_kappa * np.sqrt(s1**2 + s2**2)
            keep_a = gross & (s1 <= s2)
            keep_b = gross & (s1 > s2)
            df[keep_a], sf[keep_a], tf[keep_a] = d1[keep_a], s1[keep_a], TAG_A_ONLY
            df[keep_b], sf[keep_b], tf[keep_b] = d2[keep_b], s2[keep_b], TAG_B_ONLY
        depth[both], sigma[both], tag[both] = df, sf, tf

    valid = both | only_a | only_b
    return FusedDepth(DepthImage(depth, sigma, valid, a.camera, a.pose), tag)
