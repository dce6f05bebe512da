"""Synthetic depth source standing in for the stereo / multi-view networks.

Renders exact depth from a signed-distance scene by sphere tracing, then
corrupts it with heteroscedastic Laplacian noise under two sensor models:

  * stereo: noise applied to disparity u = fx * b / d, uncertainty propagated
    linearly back to depth, sigma_st = (fx * b / u^2) * sigma_u;
  * mvs: noise applied to log-depth, sigma_mvs = d * sigma_l.

The reported per-pixel sigma is the standard deviation of the simulated
error, exactly as a calibrated network head would output it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import PinholeCamera, Pose

# sigma assigned to noiseless renders so downstream inverse-variance sums stay finite
NOISELESS_SIGMA = 1e-3

_SPHERE_TRACE_TOL = 1e-5
_SPHERE_TRACE_MAX_STEPS = 256


@dataclass(frozen=True)
class Primitive:
    """Signed-distance primitive; kind in {sphere, box, plane}.

    sphere: center + radius.  box: axis-aligned, center + full size.
    plane: half-space with unit outward normal and offset, sdf = n.p - offset
    (free space on the positive side).
    """

    kind: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0
    size: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=float).reshape(3))
        n = np.asarray(self.normal, dtype=float).reshape(3)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if self.kind == "sphere":
            d = np.linalg.norm(p - self.center, axis=-1) - self.radius
        elif self.kind == "box":
            q = np.abs(p - self.center) - 0.5 * self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            d = outside + inside
        else:  # plane
            d = p @ self.normal - self.offset
        return d


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    bounds_min: np.ndarray = field(default_factory=lambda: np.full(3, -10.0))
    bounds_max: np.ndarray = field(default_factory=lambda: np.full(3, 10.0))

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "bounds_min", np.asarray(self.bounds_min, dtype=float).reshape(3))
        object.__setattr__(self, "bounds_max", np.asarray(self.bounds_max, dtype=float).reshape(3))

    def sdf(self, p):
        """Scene signed distance: min over primitives."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        d = np.full(p.shape[0], np.inf)
        for prim in self.primitives:
            d = np.minimum(d, prim.sdf(p))
        return d

    @staticmethod
    def from_json(path):
        with open(path) as f:
            data = json.load(f)
        return scene_from_dict(data)


def scene_from_dict(data) -> SyntheticScene:
    """Scene schema: {"bounds": {"min": [..], "max": [..]}, "primitives": [
    {"type": "sphere", "center": [..], "radius": r} |
    {"type": "box", "center": [..], "size": [..]} |
    {"type": "plane", "normal": [..], "offset": o} ]}"""
    prims = []
    for entry in data["primitives"]:
        kind = entry["type"]
        if kind == "sphere":
            prims.append(Primitive("sphere", center=entry["center"], radius=float(entry["radius"])))
        elif kind == "box":
            prims.append(Primitive("box", center=entry["center"], size=entry["size"]))
        elif kind == "plane":
            prims.append(Primitive("plane", normal=entry["normal"], offset=float(entry["offset"])))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    bounds = data.get("bounds", {})
    return SyntheticScene(
        prims,
        bounds_min=bounds.get("min", np.full(3, -10.0)),
        bounds_max=bounds.get("max", np.full(3, 10.0)),
    )


@dataclass
class DepthImage:
    """Per-pixel projective depth [m], standard deviation [m], validity mask."""

    depth: np.ndarray
    sigma: np.ndarray
    valid: np.ndarray
    camera: PinholeCamera
    pose: Pose  # T_WC at capture

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]

    def check(self):
        d, s, v = self.depth[self.valid], self.sigma[self.valid], self.valid
        if v.any():
            assert (d > self.camera.near).all() and (d < self.camera.far).all()
            assert (s > 0).all()
        return self


def render_depth(scene: SyntheticScene, T_WC: Pose, cam: PinholeCamera) -> DepthImage:
    """Noiseless depth by sphere tracing; pixels with no hit before `far` invalid."""
    dirs_c = cam.ray_directions().reshape(-1, 3)
    inv_norm = 1.0 / np.linalg.norm(dirs_c, axis=-1)  # z per unit ray length
    dirs_w = (dirs_c * inv_norm[:, None]) @ T_WC.rotation_matrix().T
    origin = T_WC.t

    n = dirs_w.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    t_max = cam.far / inv_norm  # ray length at which z = far

    for _ in range(_SPHERE_TRACE_MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = origin + t[idx, None] * dirs_w[idx]
        d = scene.sdf(p)
        converged = d < _SPHERE_TRACE_TOL
        hit[idx[converged]] = True
        active[idx[converged]] = False
        t[idx] += np.maximum(d, 0.0)
        overshoot = t[idx] > t_max[idx]
        active[idx[overshoot]] = False

    z = t * inv_norm
    valid = hit & (z > cam.near) & (z < cam.far)
    depth = np.where(valid, z, 0.0).reshape(cam.height, cam.width)
    sigma = np.full_like(depth, NOISELESS_SIGMA)
    return DepthImage(depth, sigma, valid.reshape(cam.height, cam.width), cam, T_WC)


def sigma_field(spec, truth: DepthImage) -> np.ndarray:
    """Build a spatially varying sigma field from a config dict.

    kinds: {"kind": "constant", "value": v}
           {"kind": "ramp", "lo": a, "hi": b}          linear in x, left to right
           {"kind": "ramp_rev", "lo": a, "hi": b}      linear in x, right to left
           {"kind": "edge", "base": v, "factor": f, "width": w}
    The edge kind inflates sigma by `factor` within `width` pixels of a depth
    discontinuity (including depth-validity borders).
    """
    h, w = truth.depth.shape
    kind = spec["kind"]
    if kind == "constant":
        return np.full((h, w), float(spec["value"]))
    if kind in ("ramp", "ramp_rev"):
        x = np.linspace(0.0, 1.0, w)
        if kind == "ramp_rev":
            x = x[::-1]
        return np.broadcast_to(spec["lo"] + (spec["hi"] - spec["lo"]) * x, (h, w)).copy()
    if kind == "edge":
        gx = np.abs(np.diff(truth.depth, axis=1, prepend=truth.depth[:, :1]))
        gy = np.abs(np.diff(truth.depth, axis=0, prepend=truth.depth[:1, :]))
        edges = (np.maximum(gx, gy) > spec.get("threshold", 0.1)) | ~truth.valid
        near_edge = ndimage.binary_dilation(edges, iterations=int(spec.get("width", 3)))
        out = np.full((h, w), float(spec["base"]))
        out[near_edge] *= float(spec["factor"])
        return out
    raise ValueError(f"unknown sigma field kind {kind!r}")


@dataclass
class NoiseModel:
    """kind 'stereo': baseline [m] + per-pixel disparity sigma [px].
    kind 'mvs': per-pixel log-depth sigma (unitless)."""

    kind: str
    seed: int
    baseline: float = 0.11
    sigma_u: np.ndarray | None = None
    sigma_l: np.ndarray | None = None
    min_disparity: float = 0.5  # [px]; smaller disparities marked invalid

    def __post_init__(self):
        if self.kind not in ("stereo", "mvs"):
            raise ValueError(f"unknown noise kind {self.kind!r}")


def _laplace(rng, scale):
    return rng.laplace(0.0, 1.0, size=scale.shape) * scale


def corrupt_stereo(truth: DepthImage, m: NoiseModel) -> DepthImage:
    """Disparity-space Laplacian noise with linearized uncertainty propagation."""
    if m.kind != "stereo":
        raise ValueError("noise model kind must be 'stereo'")
    cam = truth.camera
    sigma_u = np.asarray(m.sigma_u, dtype=float)
    if (sigma_u <= 0).any():
        raise ValueError("sigma_u must be strictly positive")
    fcb = cam.fx * m.baseline
    rng = np.random.default_rng(m.seed)

    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(truth.valid, fcb / truth.depth, 0.0)
    # Laplace(mu, b) has std sqrt(2) b; scale so sigma_u is the std
    u_hat = u + _laplace(rng, sigma_u / np.sqrt(2.0))
    valid = truth.valid & (u_hat > m.min_disparity)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_hat = np.where(valid, fcb / u_hat, 0.0)
        sigma = np.where(valid, fcb / u_hat**2 * sigma_u, NOISELESS_SIGMA)
    valid &= (d_hat > cam.near) & (d_hat < cam.far)
    return DepthImage(np.where(valid, d_hat, 0.0), sigma, valid, cam, truth.pose)


def corrupt_mvs(truth: DepthImage, m: NoiseModel) -> DepthImage:
    """Log-depth Laplacian noise; sigma_mvs = d_hat * sigma_l."""
    if m.kind != "mvs":
        raise ValueError("noise model kind must be 'mvs'")
    cam = truth.camera
    sigma_l = np.asarray(m.sigma_l, dtype=float)
    if (sigma_l <= 0).any():
        raise ValueError("sigma_l must be strictly positive")
    rng = np.random.default_rng(m.seed)

    with np.errstate(divide="ignore", invalid="ignore"):
        log_d = np.where(truth.valid, np.log(np.maximum(truth.depth, 1e-12)), 0.0)
    d_hat = np.exp(log_d + _laplace(rng, sigma_l / np.sqrt(2.0)))
    valid = truth.valid & (d_hat > cam.near) & (d_hat < cam.far)
    sigma = np.where(valid, d_hat * sigma_l, NOISELESS_SIGMA)
    return DepthImage(np.where(valid, d_hat, 0.0), sigma, valid, cam, truth.pose)


def calibrate_gain(d_hat, sigma, d_true) -> float:
    """Scalar gain gamma = mean(|d_hat - d_true| / sigma).

    Multiplying all sigmas by gamma makes the averaged scalar Mahalanobis
    distance |e| / (gamma sigma) equal one on the calibration set.
    """
    d_hat = np.asarray(d_hat, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float).ravel()
    d_true = np.asarray(d_true, dtype=float).ravel()
    if d_hat.size == 0:
        raise ValueError("empty calibration set")
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    return float(np.mean(np.abs(d_hat - d_true) / sigma))
