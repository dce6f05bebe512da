"""SE(3) pose algebra and pinhole camera model.

Conventions used throughout the package:
  * quaternions are Hamiltonian, scalar-first (w, x, y, z), passive rotation;
    a pose T_AB maps points from frame B into frame A via p_A = R(q) p_B + t.
  * tangent vectors are 6-vectors (rotation first, translation second);
    exp/log use the split SO(3) x R^3 retraction, and optimization applies
    perturbations on the left: T <- exp(delta) o T (world-frame perturbation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign: nonnegative scalar part
    return -q if q[0] < 0.0 else q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return quat_normalize(q)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotvec_from_quat(q):
    q = quat_normalize(q)
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return (angle / sin_half) * q[1:]


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_jacobian_right_inv(phi):
    """Inverse right Jacobian of SO(3) at rotation vector phi."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    S = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * S + coef * (S @ S)


def so3_jacobian_left_inv(phi):
    return so3_jacobian_right_inv(-np.asarray(phi, dtype=float))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) plus translation [m]."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_matrix(R, t):
        return Pose(quat_from_rotvec(rotvec_from_mat(R)), t)

    def rotation_matrix(self):
        return quat_to_mat(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T


def rotvec_from_mat(R):
    # via quaternion for numerical robustness near pi
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return rotvec_from_quat(quat_normalize(q))


def compose(a: Pose, b: Pose) -> Pose:
    """T_AC = T_AB o T_BC."""
    return Pose(quat_mul(a.q, b.q), a.rotation_matrix() @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -(quat_to_mat(qi) @ p.t))


def exp(v) -> Pose:
    """Split retraction: rotation via Rodrigues on v[:3], translation v[3:]."""
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(quat_from_rotvec(v[:3]), v[3:])


def log(p: Pose):
    """Inverse of exp; rotation part requires angle < pi."""
    return np.concatenate([rotvec_from_quat(p.q), p.t])


def transform_point(T: Pose, p):
    p = np.asarray(p, dtype=float)
    return p @ T.rotation_matrix().T + T.t


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 20.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def ray_directions(self):
        """Unnormalized camera-frame ray directions, shape (H, W, 3), z = 1."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1
        )


def backproject(px, d, cam: PinholeCamera):
    """Pixel + projective depth -> camera-frame point d * ((u-cx)/fx, (v-cy)/fy, 1)."""
    u, v = float(px[0]), float(px[1])
    d = float(d)
    if not (cam.near < d < cam.far):
        raise ValueError(f"depth {d} outside ({cam.near}, {cam.far})")
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside image")
    return d * np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])


def project(p, cam: PinholeCamera):
    """Camera-frame point -> pixel coords; requires z > 0."""
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise ValueError("point behind camera")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
