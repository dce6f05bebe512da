"""Submap lifecycle: spawning, covisibility bookkeeping, target selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeCamera, Pose, inverse, transform_point
from .submap import OccupancySubmap


def overlap_fraction(map: OccupancySubmap, T_WC: Pose, cam: PinholeCamera,
                     samples=(16, 12, 8)) -> float:
    """Fraction of stratified frustum samples landing in observed voxels.

    Samples a deterministic (nu, nv, nd) grid of stratum centers between the
    camera's near and far planes.  `samples` may be an integer sample budget
    or an explicit (nu, nv, nd) grid.
    """
    if np.isscalar(samples):
        n = int(samples)
        if n < 1:
            raise ValueError("need at least one sample")
        side = max(1, round(n ** (1.0 / 3.0)))
        nu = max(1, round(side * 4 / 3))
        nv = side
        nd = max(1, n // (nu * nv))
    else:
        nu, nv, nd = samples
    if nu * nv * nd < 1:
        raise ValueError("need at least one sample")
    u = (np.arange(nu) + 0.5) / nu * cam.width
    v = (np.arange(nv) + 0.5) / nv * cam.height
    d = cam.near + (np.arange(nd) + 0.5) / nd * (cam.far - cam.near)
    uu, vv, dd = np.meshgrid(u, v, d, indexing="ij")
    pts_c = np.stack(
        [(uu - cam.cx) / cam.fx * dd, (vv - cam.cy) / cam.fy * dd, dd], axis=-1
    ).reshape(-1, 3)

    T_MW = inverse(map.anchor)
    pts_m = transform_point(T_MW, transform_point(T_WC, pts_c))
    idx = np.floor(pts_m / map.resolution).astype(np.int64)
    _, cnt = map._lookup_many(idx)
    return float(np.count_nonzero(cnt > 0)) / pts_c.shape[0]


def should_spawn(fraction: float, eps_vol: float = 0.2) -> bool:
    """Spawn a new submap when the overlap drops strictly below eps_vol."""
    return fraction < eps_vol


@dataclass
class SubmapEntry:
    submap: OccupancySubmap
    anchor_state_index: int
    creation_frame_id: int


@dataclass
class SubmapRegistry:
    entries: list = field(default_factory=list)
    # covisibility: submap id -> {other submap id: co-observation count}
    covisibility: dict = field(default_factory=dict)
    landmark_owner: dict = field(default_factory=dict)  # landmark id -> submap id

    def add(self, submap, anchor_state_index, creation_frame_id) -> int:
        if self.entries and creation_frame_id <= self.entries[-1].creation_frame_id:
            raise ValueError("creation frame ids must strictly increase")
        self.entries.append(SubmapEntry(submap, anchor_state_index, creation_frame_id))
        sid = len(self.entries) - 1
        self.covisibility[sid] = {}
        return sid

    @property
    def latest(self) -> int:
        return len(self.entries) - 1

    def record_covisibility(self, observed_landmarks, landmark_to_submap=None):
        """Count co-observed landmarks between the latest submap and the
        submaps owning them; landmarks never seen before become owned by the
        latest submap."""
        latest = self.latest
        owners = landmark_to_submap if landmark_to_submap is not None else self.landmark_owner
        table = self.covisibility[latest]
        for lm in observed_landmarks:
            owner = owners.get(lm)
            if owner is None:
                owners[lm] = latest
                continue
            if owner == latest:
                continue
            table[owner] = table.get(owner, 0) + 1

    def covisible_candidates(self, latest=None, m_min: int = 100):
        """Covisible submaps with at least m_min co-observations, oldest first."""
        latest = self.latest if latest is None else latest
        table = self.covisibility.get(latest, {})
        return sorted(sid for sid, n in table.items() if n >= m_min and sid < latest)

    def select_target(self, latest=None, m_min: int = 100):
        """Oldest covisible submap with at least m_min co-observations."""
        candidates = self.covisible_candidates(latest, m_min)
        return candidates[0] if candidates else None

    def apply_updates(self, states):
        """Copy optimized anchor poses into the submaps; voxel data untouched."""
        for entry in self.entries:
            entry.submap.anchor = states.poses[entry.anchor_state_index]

    def summary(self):
        return {
            "submap_count": len(self.entries),
            "covisibility_edges": [
                {"from": sid, "to": other, "count": n}
                for sid, table in sorted(self.covisibility.items())
                for other, n in sorted(table.items())
            ],
        }


def visible_landmarks(landmarks, T_WC: Pose, cam: PinholeCamera, scene=None, occlusion_tol=0.05):
    """Indices of landmarks inside the frustum and (optionally) unoccluded.

    Occlusion is checked against the scene surface: a landmark is occluded if
    the scene intersects the camera ray noticeably before the landmark.
    """
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    T_CW = inverse(T_WC)
    p_c = transform_point(T_CW, landmarks)
    z = p_c[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p_c[:, 0] / z + cam.cx
        v = cam.fy * p_c[:, 1] / z + cam.cy
    vis = (z > cam.near) & (z < cam.far) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if scene is not None and vis.any():
        idx = np.flatnonzero(vis)
        for i in idx:
            origin = T_WC.t
            delta = landmarks[i] - origin
            dist = np.linalg.norm(delta)
            direction = delta / dist
            t = 0.0
            for _ in range(128):
                d = float(scene.sdf(origin + t * direction)[0])
                if d < 1e-4:
                    break
                t += d
                if t > dist - occlusion_tol:
                    break
            if t < dist - occlusion_tol:
                vis[i] = False
    return np.flatnonzero(vis)
