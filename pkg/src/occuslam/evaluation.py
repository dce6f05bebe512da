"""Trajectory and reconstruction metrics against exact synthetic ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, quat_normalize, rotvec_from_mat, quat_from_rotvec

ASSOCIATION_TOL = 0.01  # [s] nearest-timestamp matching window


@dataclass
class Trajectory:
    timestamps: np.ndarray  # (N,) strictly increasing [s]
    poses: list  # list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) != self.timestamps.shape[0]:
            raise ValueError("timestamps and poses must align")
        if (np.diff(self.timestamps) <= 0).any():
            raise ValueError("timestamps must strictly increase")

    def positions(self):
        return np.array([p.t for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, tol: float = ASSOCIATION_TOL):
    """Indices (i_est, i_gt) of nearest-timestamp pairs within tol."""
    gi = np.searchsorted(gt.timestamps, est.timestamps)
    pairs = []
    for i, g in enumerate(gi):
        best, best_dt = None, tol
        for j in (g - 1, g):
            if 0 <= j < gt.timestamps.shape[0]:
                dt = abs(gt.timestamps[j] - est.timestamps[i])
                if dt <= best_dt:
                    best, best_dt = j, dt
        if best is not None:
            pairs.append((i, best))
    return pairs


def align_se3(est: Trajectory, gt: Trajectory) -> Pose:
    """Closed-form rigid (no scale) alignment A minimizing sum ||A p_est - p_gt||^2."""
    pairs = associate(est, gt)
    if len(pairs) < 3:
        raise ValueError("need at least 3 associated poses")
    P = np.array([est.poses[i].t for i, _ in pairs])
    Q = np.array([gt.poses[j].t for _, j in pairs])
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    s = np.linalg.svd(Pc, compute_uv=False)
    if s[1] < 1e-12 * max(s[0], 1.0):
        raise ValueError("degenerate (collinear) trajectory; alignment not unique")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mq - R @ mp
    return Pose(quat_from_rotvec(rotvec_from_mat(R)), t)


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of position differences after SE(3) alignment."""
    A = align_se3(est, gt)
    pairs = associate(est, gt)
    R, t = A.rotation_matrix(), A.t
    errs = [
        np.linalg.norm(R @ est.poses[i].t + t - gt.poses[j].t) for i, j in pairs
    ]
    return float(np.sqrt(np.mean(np.square(errs))))


def hilti_score(errors) -> float:
    """Per-waypoint position errors [m] -> points: <=1 cm earns the full
    per-waypoint share of 100, >=10 cm earns 0, linear in between."""
    errors = np.asarray(errors, dtype=float).reshape(-1)
    if errors.size == 0:
        return 0.0
    frac = np.clip((0.10 - errors) / 0.09, 0.0, 1.0)
    return float(frac.sum() * 100.0 / errors.size)


def voxel_downsample(points, voxel: float = 0.01):
    """Average points falling in the same voxel of the given size."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, points = keys[order], points[order]
    boundaries = np.any(np.diff(keys, axis=0) != 0, axis=1)
    group = np.concatenate([[0], np.cumsum(boundaries)])
    n_groups = group[-1] + 1
    sums = np.zeros((n_groups, 3))
    np.add.at(sums, group, points)
    counts = np.bincount(group, minlength=n_groups)
    return sums / counts[:, None]


def mesh_accuracy(est_vertices, gt_vertices, downsample: float = 0.01) -> float:
    """Mean nearest-neighbor distance est -> gt, both voxel-downsampled at 1 cm."""
    est = voxel_downsample(est_vertices, downsample)
    gt = voxel_downsample(gt_vertices, downsample)
    if est.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("empty vertex set")
    d, _ = cKDTree(gt).query(est)
    return float(np.mean(d))


def mesh_completeness(est_vertices, gt_vertices, thresh: float = 0.2,
                      downsample: float = 0.01) -> float:
    """Fraction of ground-truth vertices within thresh of an estimated vertex."""
    gt = voxel_downsample(gt_vertices, downsample)
    if gt.shape[0] == 0:
        raise ValueError("empty ground-truth vertex set")
    est = voxel_downsample(est_vertices, downsample)
    if est.shape[0] == 0:
        return 0.0
    d, _ = cKDTree(est).query(gt)
    return float(np.mean(d <= thresh))


def sample_gt_surface(scene, density: float, seed: int = 0):
    """Uniform surface samples of the scene primitives, area-weighted.

    Planes are sampled on their rectangle clipped to the scene bounds.  Points
    buried inside another primitive (scene sdf < -1e-6) are rejected so only
    the surface of the union remains.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    samples = []
    for prim in scene.primitives:
        if prim.kind == "sphere":
            area = 4.0 * np.pi * prim.radius**2
            n = rng.poisson(area * density)
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            samples.append(prim.center + prim.radius * v)
        elif prim.kind == "box":
            s = prim.size
            face_areas = np.array([s[1] * s[2], s[1] * s[2], s[0] * s[2], s[0] * s[2],
                                   s[0] * s[1], s[0] * s[1]])
            for f, area in enumerate(face_areas):
                n = rng.poisson(area * density)
                if n == 0:
                    continue
                axis = f // 2
                sign = 1.0 if f % 2 == 0 else -1.0
                pts = (rng.random((n, 3)) - 0.5) * s
                pts[:, axis] = sign * 0.5 * s[axis]
                samples.append(prim.center + pts)
        else:  # plane: rectangle spanned inside the scene bounds
            n_vec = prim.normal
            a = np.array([1.0, 0.0, 0.0])
            if abs(n_vec @ a) > 0.9:
                a = np.array([0.0, 1.0, 0.0])
            e1 = np.cross(n_vec, a)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(n_vec, e1)
            center = prim.offset * n_vec
            extent = np.linalg.norm(scene.bounds_max - scene.bounds_min)
            area = extent * extent
            n = rng.poisson(area * density)
            uv = (rng.random((n, 2)) - 0.5) * extent
            pts = center + uv[:, :1] * e1 + uv[:, 1:] * e2
            inside = np.all((pts >= scene.bounds_min) & (pts <= scene.bounds_max), axis=1)
            samples.append(pts[inside])
    if not samples:
        return np.zeros((0, 3))
    pts = np.concatenate(samples)
    keep = scene.sdf(pts) >= -1e-6
    return pts[keep]


def write_tum(path, traj: Trajectory):
    """TUM format: timestamp tx ty tz qx qy qz qw per line."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(traj.timestamps, traj.poses):
            q = p.q  # stored scalar-first; TUM wants scalar-last
            f.write(
                f"{ts:.9f} {p.t[0]:.9f} {p.t[1]:.9f} {p.t[2]:.9f} "
                f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n"
            )


def read_tum(path) -> Trajectory:
    ts, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            ts.append(vals[0])
            q = quat_normalize([vals[7], vals[4], vals[5], vals[6]])
            poses.append(Pose(q, np.array(vals[1:4])))
    return Trajectory(np.array(ts), poses)
