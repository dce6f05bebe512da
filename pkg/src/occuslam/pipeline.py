"""End-to-end synthetic runner: depth oracle -> fusion -> occupancy submaps ->
factor graph -> evaluation, driven by a JSON config.

Per frame the pipeline renders ground-truth depth, corrupts it under the
stereo and multi-view noise models, fuses the two, and integrates the fused
depth into the active submap at the current *estimated* pose.  Keyframes add
odometry relative-pose factors and frame-to-map occupancy-to-point factors;
submap spawns close the current submap with a map-to-map factor and trigger
an optimization.  Submap anchors are the keyframe states at declaration time,
so anchor corrections come for free with trajectory corrections.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .depth_fusion import fuse_images
from .depth_oracle import (
    DepthImage,
    NoiseModel,
    SyntheticScene,
    corrupt_mvs,
    corrupt_stereo,
    render_depth,
    scene_from_dict,
    sigma_field,
)
from .evaluation import (
    Trajectory,
    align_se3,
    ate_rmse,
    hilti_score,
    mesh_accuracy,
    mesh_completeness,
    sample_gt_surface,
    write_tum,
)
from .factor_graph import (
    FactorGraph,
    O2PFactor,
    OptimizeOptions,
    RelPoseFactor,
    StateVector,
    optimize,
)
from .geometry import PinholeCamera, Pose
from .submap import InverseSensorParams, OccupancySubmap, write_ply
from .submap_manager import (
    SubmapRegistry,
    overlap_fraction,
    should_spawn,
    visible_landmarks,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# o2p factors with fewer active points than this carry almost no constraint
# and are dropped instead of cluttering the graph
MIN_ACTIVE_POINTS = 10


@dataclass
class RunConfig:
    scene: dict
    camera: dict
    trajectory: dict
    stereo_noise: dict | None = None  # {"baseline": m, "sigma_u": field spec}
    mvs_noise: dict | None = None  # {"sigma_l": field spec}
    inverse_sensor: dict = field(default_factory=dict)
    resolution: float = 0.025
    drift: dict = field(default_factory=dict)  # rot/trans random walk per frame
    keyframe_every: int = 5
    eps_vol: float = 0.2
    m_min: int = 100
    o2p: bool = True
    frame_points: int = 200
    map_points: int = 1000
    num_landmarks: int = 300
    gt_surface_density: float = 400.0
    depth_source: str = "fused"  # fused | stereo | mvs | heuristic
    optimizer: dict = field(default_factory=dict)
    seed: int = 0

    @staticmethod
    def from_dict(data, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data)
        if "scene_file" in data:
            path = Path(data.pop("scene_file"))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"scene file not found: {path}")
            with open(path) as f:
                data["scene"] = json.load(f)
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"scene", "camera", "trajectory"} - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return RunConfig(**data)

    @staticmethod
    def from_json(path) -> "RunConfig":
        path = Path(path)
        with open(path) as f:
            return RunConfig.from_dict(json.load(f), base_dir=path.parent)


def _camera(cfg) -> PinholeCamera:
    return PinholeCamera(**cfg)


def _generate_trajectory(cfg, rate_default=10.0):
    """Ground-truth (timestamps, poses T_WC)."""
    kind = cfg.get("kind", "circle")
    rate = float(cfg.get("rate", rate_default))
    duration = float(cfg.get("duration", 10.0))
    n = max(2, int(round(duration * rate)))
    ts = np.arange(n) / rate

    if kind == "circle":
        center = np.asarray(cfg.get("center", [0.0, 0.0, 0.0]), dtype=float)
        radius = float(cfg.get("radius", 1.5))
        revolutions = float(cfg.get("revolutions", 1.0))
        pitch = float(cfg.get("pitch", 0.0))
        look = cfg.get("look", "outward")
        theta = 2.0 * np.pi * revolutions * ts / duration
        poses = []
        for th in theta:
            pos = center + radius * np.array([np.cos(th), np.sin(th), 0.0])
            fwd = np.array([np.cos(th), np.sin(th), 0.0])
            if look == "inward":
                fwd = -fwd
            elif look == "tangent":
                fwd = np.array([-np.sin(th), np.cos(th), 0.0])
            poses.append(_pose_looking(pos, fwd, pitch))
        return ts, poses

    if kind == "waypoints":
        pts = np.asarray(cfg["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ConfigError("waypoints need at least two points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        s = arc[-1] * ts / ts[-1]
        pos = np.column_stack(
            [np.interp(s, arc, pts[:, a]) for a in range(3)]
        )
        lookat = cfg.get("lookat")
        pitch = float(cfg.get("pitch", 0.0))
        poses = []
        for i in range(n):
            if lookat is not None:
                fwd = np.asarray(lookat, dtype=float) - pos[i]
            else:
                j = min(i + 1, n - 1)
                fwd = pos[j] - pos[i - 1 if i > 0 else 0]
            fwd = fwd / max(np.linalg.norm(fwd), 1e-12)
            poses.append(_pose_looking(pos[i], fwd, pitch))
        return ts, poses

    raise ConfigError(f"unknown trajectory kind {kind!r}")


def _pose_looking(position, forward, pitch=0.0):
    """Camera pose with +z along `forward` (horizontal), y down, optional pitch."""
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, f)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight up/down: pick an arbitrary right vector
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(f, x)
    R = np.column_stack([x, y, f])
    if pitch != 0.0:
        c, s = np.cos(pitch), np.sin(pitch)
        R = R @ np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return Pose(geo.quat_from_rotvec(geo.rotvec_from_mat(R)), position)


def _stream_rng(seed, frame, stream):
    streams = {"stereo": 1, "mvs": 2, "odom": 3, "landmarks": 4}
    return np.random.SeedSequence(entropy=(int(seed), int(frame), streams[stream]))


def select_points(img: DepthImage, n: int, grid=(10, 8)):
    """Lowest-uncertainty valid pixels on a stratified image grid.

    Returns (points (M, 3) in the camera frame, sigma (M,)), M <= n.
    """
    gv, gu = grid
    h, w = img.depth.shape
    vv, uu = np.nonzero(img.valid)
    if vv.size == 0:
        return np.zeros((0, 3)), np.zeros(0)
    cell = (vv * gv // h) * gu + (uu * gu // w)
    sig = img.sigma[vv, uu]
    per_cell = max(1, int(np.ceil(n / (gu * gv))))
    order = np.lexsort((sig, cell))
    cell_sorted = cell[order]
    rank = np.arange(order.size) - np.searchsorted(cell_sorted, cell_sorted)
    chosen = order[rank < per_cell]
    chosen = chosen[np.argsort(sig[chosen], kind="stable")][:n]
    u, v = uu[chosen], vv[chosen]
    d = img.depth[v, u]
    cam = img.camera
    pts = np.column_stack(
        [(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d]
    )
    return pts, img.sigma[v, u]


def heuristic_sigma(img: DepthImage) -> np.ndarray:
    """Quadratic model sigma = c d^2 with c matched to the mean predicted
    sigma/d^2 ratio, so the magnitude agrees and only the shape differs."""
    sigma = np.full_like(img.sigma, np.median(img.sigma))
    if img.valid.any():
        c = float(np.mean(img.sigma[img.valid] / img.depth[img.valid] ** 2))
        sigma = np.where(img.valid, c * img.depth**2, img.sigma)
    return sigma


@dataclass
class _SubmapRecord:
    points: list  # accumulated (point in submap frame, sigma) candidates


def run(config: RunConfig, out_dir, write_mesh: bool = True, o2p_override: bool | None = None):
    """Execute the pipeline; writes artifacts into out_dir and returns the
    summary dict (also written as metrics.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    use_o2p = config.o2p if o2p_override is None else o2p_override

    scene = scene_from_dict(config.scene)
    cam = _camera(config.camera)
    ts, gt_poses = _generate_trajectory(config.trajectory)
    n_frames = len(gt_poses)
    isp = InverseSensorParams(**config.inverse_sensor)
    opts = OptimizeOptions(**config.optimizer)
    seed = config.seed

    landmarks = sample_gt_surface(
        scene, density=_landmark_density(scene, config.num_landmarks), seed=seed + 991
    )
    if landmarks.shape[0] > config.num_landmarks:
        sel = np.random.default_rng(seed + 992).choice(
            landmarks.shape[0], config.num_landmarks, replace=False
        )
        landmarks = landmarks[np.sort(sel)]

    drift_rot = float(config.drift.get("rot_per_sqrt_frame", 0.0))
    drift_trans = float(config.drift.get("trans_per_sqrt_frame", 0.0))

    # estimator state
    states = StateVector([gt_poses[0]], [True])  # first keyframe fixed (gauge)
    factors = []
    kf_of_state = [0]  # state index -> frame id
    state_of_frame = {0: 0}
    registry = SubmapRegistry()
    submap_records = []
    reports = []

    active = OccupancySubmap(anchor=gt_poses[0], resolution=config.resolution)
    sid = registry.add(active, anchor_state_index=0, creation_frame_id=0)
    submap_records.append(_SubmapRecord(points=[]))

    est_current = gt_poses[0]
    causal_poses = [est_current]
    # frame id -> (keyframe state index, accumulated odometry from that keyframe)
    odo_from_kf = {0: (0, Pose.identity())}
    last_kf_state = 0
    odo_since_kf = Pose.identity()
    frames_since_kf = 0
    overlap_trace = []

    for k in range(1, n_frames):
        # odometry with injected random-walk drift
        T_rel_gt = geo.compose(geo.inverse(gt_poses[k - 1]), gt_poses[k])
        rng = np.random.default_rng(_stream_rng(seed, k, "odom"))
        eta = np.concatenate(
            [rng.normal(0.0, max(drift_rot, 1e-12), 3),
             rng.normal(0.0, max(drift_trans, 1e-12), 3)]
        )
        T_rel_meas = geo.compose(T_rel_gt, geo.exp(eta))
        est_current = geo.compose(est_current, T_rel_meas)
        odo_since_kf = geo.compose(odo_since_kf, T_rel_meas)
        frames_since_kf += 1
        odo_from_kf[k] = (last_kf_state, odo_since_kf)

        # sense: render at the true pose, estimate poses elsewhere
        truth = render_depth(scene, gt_poses[k], cam)
        truth.pose = est_current  # downstream consumers see the estimated pose
        stereo_img, mvs_img, integration_img = _make_depths(truth, config, seed, k)

        # spawn check against the active submap *before* integrating this frame;
        # acted on at the periodic keyframes so one low-overlap episode spawns
        # a single submap
        frac = overlap_fraction(active, est_current, cam)
        overlap_trace.append(frac)
        log.debug("frame %d submap %d overlap %.3f", k, sid, frac)
        spawn_now = (
            k % config.keyframe_every == 0
            and should_spawn(frac, config.eps_vol)
            and active.num_blocks > 0
        )

        is_keyframe = (k % config.keyframe_every == 0) or k == n_frames - 1
        if is_keyframe:
            states.poses.append(est_current)
            states.fixed.append(False)
            s_idx = len(states.poses) - 1
            state_of_frame[k] = s_idx
            kf_of_state.append(k)

            info = _odometry_information(drift_rot, drift_trans, max(frames_since_kf, 1))
            factors.append(RelPoseFactor(last_kf_state, s_idx, odo_since_kf, info))

            if use_o2p:
                pts, sig = select_points(stereo_img, config.frame_points)
                if pts.shape[0]:
                    # oldest covisible targets whose maps the points actually hit
                    added = 0
                    for target in registry.covisible_candidates(m_min=config.m_min):
                        if target == sid:
                            continue
                        fct = O2PFactor(
                            a=s_idx,
                            b=registry.entries[target].anchor_state_index,
                            submap=registry.entries[target].submap,
                            points=pts,
                            sigma_d=sig,
                            kind="frame",
                            l_min_mag=abs(isp.l_min),
                        )
                        n_active = fct.residual(states)[0].shape[0]
                        log.debug(
                            "frame-to-map factor kf %d -> submap %d: %d/%d points active",
                            s_idx, target, n_active, pts.shape[0],
                        )
                        if n_active >= MIN_ACTIVE_POINTS:
                            factors.append(fct)
                            added += 1
                            if added == 2:
                                break

            last_kf_state = s_idx
            odo_since_kf = Pose.identity()
            frames_since_kf = 0
            odo_from_kf[k] = (s_idx, Pose.identity())

            if spawn_now:
                if use_o2p:
                    _close_submap_with_factor(
                        registry, submap_records, sid, factors, config, isp, states
                    )
                # new submap anchored at the sensor frame declaring it
                active = OccupancySubmap(anchor=est_current, resolution=config.resolution)
                sid = registry.add(active, anchor_state_index=s_idx, creation_frame_id=k)
                submap_records.append(_SubmapRecord(points=[]))

                if use_o2p and any(isinstance(f, O2PFactor) for f in factors):
                    states, report = optimize(FactorGraph(states, factors), opts)
                    reports.append(report)
                    registry.apply_updates(states)
                    est_current = states.poses[last_kf_state]

        # integrate into the (possibly fresh) active submap at the estimated pose
        T_WM = states.poses[registry.entries[sid].anchor_state_index]
        T_MC = geo.compose(geo.inverse(T_WM), est_current)
        active.integrate_depth_image(T_MC, integration_img, isp)

        if is_keyframe:
            # bank fused points for the closing map-to-map factor
            pts, sig = select_points(integration_img, config.map_points)
            if pts.shape[0]:
                pts_m = geo.transform_point(T_MC, pts)
                submap_records[sid].points.append((pts_m, sig))

        # covisibility from physically visible landmarks
        if landmarks.shape[0]:
            vis = visible_landmarks(landmarks, gt_poses[k], cam, scene=scene)
            registry.record_covisibility([int(i) for i in vis])

        causal_poses.append(est_current)

    # close the still-open submap, then the final (non-causal) optimization
    if use_o2p:
        _close_submap_with_factor(registry, submap_records, sid, factors, config, isp, states)
    if use_o2p and any(isinstance(f, O2PFactor) for f in factors):
        # the o2p active sets and robust weights change between linearizations,
        # so a single solver call can terminate on a damped micro-step; restart
        # until the robust cost stabilizes
        cost_prev = None
        for _ in range(6):
            states, report = optimize(FactorGraph(states, factors), opts)
            reports.append(report)
            if cost_prev is not None and report["final_cost"] > (1.0 - 1e-3) * cost_prev:
                break
            cost_prev = report["final_cost"]
        registry.apply_updates(states)

    final_poses = []
    for k in range(n_frames):
        s_idx, rel = odo_from_kf[k]
        final_poses.append(geo.compose(states.poses[s_idx], rel))

    gt_traj = Trajectory(ts, gt_poses)
    causal_traj = Trajectory(ts, causal_poses)
    final_traj = Trajectory(ts, final_poses)

    write_tum(out / "trajectory_gt.tum", gt_traj)
    write_tum(out / "trajectory_causal.tum", causal_traj)
    write_tum(out / "trajectory_final.tum", final_traj)

    verts = _combined_mesh_vertices(registry, out if write_mesh else None)

    gt_vertices = sample_gt_surface(scene, config.gt_surface_density, seed=seed + 17)
    metrics = {
        "ate_rmse_causal": ate_rmse(causal_traj, gt_traj),
        "ate_rmse_final": ate_rmse(final_traj, gt_traj),
        "num_submaps": len(registry.entries),
        "num_keyframes": len(states.poses),
        "num_factors": len(factors),
    }
    if verts.shape[0] and gt_vertices.shape[0]:
        A = align_se3(final_traj, gt_traj)
        verts_aligned = geo.transform_point(A, verts)
        metrics["mesh_accuracy"] = mesh_accuracy(verts_aligned, gt_vertices)
        metrics["mesh_completeness"] = mesh_completeness(verts_aligned, gt_vertices)
        errs = _waypoint_errors(final_traj, gt_traj)
        metrics["hilti_score"] = hilti_score(errs)
    else:
        metrics["mesh_accuracy"] = None
        metrics["mesh_completeness"] = None
        metrics["hilti_score"] = None

    summary = {
        "metrics": metrics,
        "registry": registry.summary(),
        "overlap": {
            "min": float(np.min(overlap_trace)) if overlap_trace else None,
            "mean": float(np.mean(overlap_trace)) if overlap_trace else None,
        },
        "seed": seed,
        "o2p_enabled": use_o2p,
        "depth_source": config.depth_source,
        "frames": n_frames,
    }
    _dump_json(out / "metrics.json", summary)
    _dump_json(out / "optimizer_report.json", {"optimizations": reports})
    return summary


def _make_depths(truth: DepthImage, config: RunConfig, seed, frame):
    """(stereo image, mvs image, image selected for integration)."""
    if config.stereo_noise is None:
        stereo_img = truth
    else:
        nm = NoiseModel(
            "stereo",
            seed=_stream_rng(seed, frame, "stereo"),
            baseline=float(config.stereo_noise.get("baseline", 0.11)),
            sigma_u=sigma_field(config.stereo_noise["sigma_u"], truth),
        )
        stereo_img = corrupt_stereo(truth, nm)

    if config.mvs_noise is None:
        mvs_img = truth
    else:
        nm = NoiseModel(
            "mvs",
            seed=_stream_rng(seed, frame, "mvs"),
            sigma_l=sigma_field(config.mvs_noise["sigma_l"], truth),
        )
        mvs_img = corrupt_mvs(truth, nm)

    source = config.depth_source
    if source == "fused":
        integration = fuse_images(stereo_img, mvs_img).image
    elif source == "stereo":
        integration = stereo_img
    elif source == "mvs":
        integration = mvs_img
    elif source == "heuristic":
        integration = DepthImage(
            stereo_img.depth, heuristic_sigma(stereo_img), stereo_img.valid,
            stereo_img.camera, stereo_img.pose,
        )
        stereo_img = integration  # o2p factors see the heuristic sigmas too
    else:
        raise ConfigError(f"unknown depth source {source!r}")
    return stereo_img, mvs_img, integration


def _odometry_information(drift_rot, drift_trans, n_frames):
    sr = max(drift_rot, 1e-5) * np.sqrt(n_frames)
    st = max(drift_trans, 1e-5) * np.sqrt(n_frames)
    return np.diag([1.0 / sr**2] * 3 + [1.0 / st**2] * 3)


def _close_submap_with_factor(registry, records, sid, factors, config, isp, states):
    """Map-to-map factor from the closing submap's banked fused points."""
    rec = records[sid]
    if not rec.points:
        return
    pts = np.concatenate([p for p, _ in rec.points])
    sig = np.concatenate([s for _, s in rec.points])
    order = np.argsort(sig, kind="stable")[: config.map_points]
    # oldest covisible targets whose maps the banked points actually hit
    added = 0
    for target in registry.covisible_candidates(latest=sid, m_min=config.m_min):
        if target == sid:
            continue
        fct = O2PFactor(
            a=registry.entries[sid].anchor_state_index,
            b=registry.entries[target].anchor_state_index,
            submap=registry.entries[target].submap,
            points=pts[order],
            sigma_d=sig[order],
            kind="map",
            l_min_mag=abs(isp.l_min),
        )
        n_active = fct.residual(states)[0].shape[0]
        log.debug(
            "map-to-map factor submap %d -> submap %d: %d/%d points active",
            sid, target, n_active, order.size,
        )
        if n_active >= MIN_ACTIVE_POINTS:
            factors.append(fct)
            added += 1
            if added == 2:
                return


def _combined_mesh_vertices(registry, out_dir):
    """World-frame mesh vertices of all submaps; writes mesh.ply if out_dir."""
    all_verts, all_faces = [], []
    offset = 0
    for entry in registry.entries:
        v, f = entry.submap.extract_mesh()
        if v.shape[0] == 0:
            continue
        vw = geo.transform_point(entry.submap.anchor, v)
        all_verts.append(vw)
        all_faces.append(f + offset)
        offset += v.shape[0]
    if not all_verts:
        verts = np.zeros((0, 3))
        faces = np.zeros((0, 3), dtype=np.int64)
    else:
        verts = np.concatenate(all_verts)
        faces = np.concatenate(all_faces)
    if out_dir is not None:
        write_ply(Path(out_dir) / "mesh.ply", verts, faces)
    return verts


def _waypoint_errors(est: Trajectory, gt: Trajectory):
    A = align_se3(est, gt)
    R, t = A.rotation_matrix(), A.t
    return [
        float(np.linalg.norm(R @ pe.t + t - pg.t))
        for pe, pg in zip(est.poses, gt.poses)
    ]


def _landmark_density(scene, num_landmarks):
    probe = sample_gt_surface(scene, density=10.0, seed=1)
    area = max(probe.shape[0] / 10.0, 1.0)
    return num_landmarks / area


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def run_ablation(config: RunConfig, out_dir, variants=None):
    """Run the uncertainty/fusion ablation; returns the comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = variants or {
        "heuristic-sigma": "heuristic",
        "learned-sigma": "stereo",
        "fusion": "fused",
    }
    table = {}
    for name, source in variants.items():
        cfg = RunConfig(**{**config.__dict__, "depth_source": source})
        summary = run(cfg, out / name)
        m = summary["metrics"]
        table[name] = {
            "ate_rmse_causal": m["ate_rmse_causal"],
            "ate_rmse_final": m["ate_rmse_final"],
            "mesh_accuracy": m["mesh_accuracy"],
            "mesh_completeness": m["mesh_completeness"],
        }
    _dump_json(out / "ablation.json", table)
    return table
