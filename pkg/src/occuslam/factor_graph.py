"""Robust nonlinear least squares over frame poses and submap anchor poses.

Factors:
  * relative-pose factors between two pose states (6-vector split log residual,
    6x6 information matrix);
  * occupancy-to-point (o2p) factors constraining back-projected depth points
    to the L = 0 level set of a target submap, residual L / ||grad L|| with
    per-point weight 1 / (sigma_map^2 + sigma_d^2).

The solver is Levenberg-Marquardt on the manifold (left-multiplicative
retraction through exp) with iteratively reweighted robust least squares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geometry as geo
from .geometry import Pose
from .submap import OccupancySubmap

log = logging.getLogger(__name__)

_GRAD_EPS = 1e-9


class SolverFailure(RuntimeError):
    """Normal equations remained non-SPD after damping escalation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class StateVector:
    """Pose states (frame poses and submap anchors) with fixed/free flags."""

    poses: list
    fixed: list

    def __post_init__(self):
        if len(self.poses) != len(self.fixed):
            raise ValueError("poses and fixed flags must align")

    def free_indices(self):
        return [i for i, f in enumerate(self.fixed) if not f]

    def column_of(self):
        """state index -> column offset in the reduced parameter vector."""
        return {i: 6 * k for k, i in enumerate(self.free_indices())}

    def retracted(self, delta):
        """Apply left perturbations exp(delta_i) o T_i to the free states."""
        cols = self.column_of()
        poses = list(self.poses)
        for i, c in cols.items():
            poses[i] = geo.compose(geo.exp(delta[c : c + 6]), poses[i])
        return StateVector(poses, list(self.fixed))


def robust_weight(s, kind, c):
    """IRLS reweight factor rho'(s) for squared weighted residual s."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    if kind == "cauchy":
        return 1.0 / (1.0 + s / c**2)
    if kind == "tukey":
        return (1.0 - s / c**2) ** 2 if s < c**2 else 0.0
    raise ValueError(f"unknown robustifier {kind!r}")


def _rho(s, kind, c):
    if kind == "cauchy":
        return c**2 * np.log1p(s / c**2)
    if kind == "tukey":
        return (c**2 / 3.0) * (1.0 - (1.0 - s / c**2) ** 3) if s < c**2 else c**2 / 3.0
    raise ValueError(f"unknown robustifier {kind!r}")


def relpose_residual(T_WSr: Pose, T_WSc: Pose, T_rc_meas: Pose):
    """log( T_meas^-1 (T_WSr^-1 T_WSc) ), rotation-first 6-vector."""
    return geo.log(geo.compose(geo.inverse(T_rc_meas), geo.compose(geo.inverse(T_WSr), T_WSc)))


@dataclass
class RelPoseFactor:
    r: int  # reference state index
    c: int  # other state index
    T_rc_meas: Pose
    W: np.ndarray  # 6x6 information matrix, SPD

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float).reshape(6, 6)
        self._sqrt_info = np.linalg.cholesky(self.W).T  # raises if not SPD

    def residual(self, states):
        return relpose_residual(states.poses[self.r], states.poses[self.c], self.T_rc_meas)

    def _jacobians(self, states):
        """Analytic Jacobians of the raw residual wrt left perturbations."""
        A, B = states.poses[self.r], states.poses[self.c]
        R_A, R_B = A.rotation_matrix(), B.rotation_matrix()
        R_Mt = self.T_rc_meas.rotation_matrix().T
        C = R_Mt @ R_A.T
        e_rot = geo.rotvec_from_mat(C @ R_B)

        Jl_inv = geo.so3_jacobian_left_inv(e_rot)
        Jr_inv = geo.so3_jacobian_right_inv(e_rot)
        St_B = geo.skew(B.t)

        J_r = np.zeros((6, 6))
        J_c = np.zeros((6, 6))
        J_c[:3, :3] = Jl_inv @ C
        J_c[3:, :3] = -C @ St_B
        J_c[3:, 3:] = C
        J_r[:3, :3] = -Jr_inv @ R_B.T
        J_r[3:, :3] = C @ St_B
        J_r[3:, 3:] = -C
        return {self.r: J_r, self.c: J_c}

    def linearize(self, states):
        e = self._sqrt_info @ self.residual(states)
        jacs = {i: self._sqrt_info @ J for i, J in self._jacobians(states).items()}
        return e, jacs, 0.5 * float(e @ e)


@dataclass
class O2PFactor:
    """Points carried by state `a` constrained to the surface of the submap
    anchored at state `b`.  kind 'frame' caps points at 200, 'map' at 1000."""

    a: int
    b: int
    submap: OccupancySubmap
    points: np.ndarray  # (N, 3) in the frame of state a
    sigma_d: np.ndarray  # (N,) depth standard deviations [m]
    kind: str = "frame"
    l_min_mag: float = 5.015
    robustifier: str = "tukey"
    robust_c: float = 4.685

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.sigma_d = np.asarray(self.sigma_d, dtype=float).reshape(-1)
        if self.points.shape[0] != self.sigma_d.shape[0]:
            raise ValueError("points and sigma_d must align")
        limit = {"frame": 200, "map": 1000}.get(self.kind)
        if limit is None:
            raise ValueError(f"unknown o2p kind {self.kind!r}")
        if self.points.shape[0] > limit:
            raise ValueError(f"{self.kind}-to-map factor limited to {limit} points")
        if (self.sigma_d <= 0).any():
            raise ValueError("sigma_d must be strictly positive")

    def _evaluate(self, states):
        """Transformed points, residuals, weights and active mask."""
        T_WSa = states.poses[self.a]
        T_MW = geo.inverse(states.poses[self.b])
        p_W = geo.transform_point(T_WSa, self.points)
        p_M = geo.transform_point(T_MW, p_W)
        L, okL = self.submap.query_L_many(p_M)
        g, okg = self.submap.grad_L_many(p_M)
        gn = np.linalg.norm(g, axis=1)
        # points in saturated free space carry no surface information: their
        # residual L / ||grad L|| is unbounded while s = w e^2 stays below the
        # robust threshold by construction, so they must be gated out
        unsaturated = L > -0.95 * self.l_min_mag
        ok = okL & okg & (gn > _GRAD_EPS) & unsaturated
        gn_safe = np.where(ok, gn, 1.0)
        e = L / gn_safe
        sigma_map = self.l_min_mag / (3.0 * gn_safe)
        w = 1.0 / (sigma_map**2 + self.sigma_d**2)
        return p_W, p_M, T_MW, g, gn_safe, e, w, ok

    def residual(self, states):
        """(residual vector, diagonal weights) over active points."""
        _, _, _, _, _, e, w, ok = self._evaluate(states)
        return e[ok], w[ok]

    def linearize(self, states):
        p_W, p_M, T_MW, g, gn, e, w, ok = self._evaluate(states)
        if not ok.any():
            log.warning("o2p factor %d->%d inactive: all points dropped", self.a, self.b)
            return np.zeros(0), {}, 0.0

        p_W, g, gn, e, w = p_W[ok], g[ok], gn[ok], e[ok], w[ok]
        n = e.shape[0]
        R_MW = T_MW.rotation_matrix()
        nrm = g / gn[:, None]  # unit surface normals in map frame
        nR = nrm @ R_MW  # row i: n_i^T R_MW

        # d p_M / d delta_a = R_MW [ -skew(p_W) | I ]
        # d p_M / d delta_b = R_MW [  skew(p_W) | -I ]
        cross = np.cross(p_W, nR)  # n^T R (-skew(p_W)) = (p_W x (R^T n))^T
        J_a = np.concatenate([cross, nR], axis=1)
        J_b = -J_a

        sqrt_w = np.sqrt(w)
        s = w * e**2
        rw = np.array([robust_weight(si, self.robustifier, self.robust_c) for si in s])
        scale = sqrt_w * np.sqrt(rw)
        cost = 0.5 * sum(_rho(si, self.robustifier, self.robust_c) for si in s)

        res = scale * e
        jacs = {}
        if not states.fixed[self.a]:
            jacs[self.a] = scale[:, None] * J_a
        if not states.fixed[self.b]:
            jacs[self.b] = scale[:, None] * J_b
        return res, jacs, cost

    def cost(self, states):
        e, w = self.residual(states)
        return 0.5 * sum(
            _rho(wi * ei**2, self.robustifier, self.robust_c) for ei, wi in zip(e, w)
        )


def o2p_residual(factor: O2PFactor, states: StateVector, map_b: OccupancySubmap):
    """Spec surface: residuals and weight diagonal of an o2p factor against
    an explicit submap (must be the factor's target)."""
    if map_b is not factor.submap:
        raise ValueError("map_b does not match the factor's target submap")
    return factor.residual(states)


@dataclass
class OptimizeOptions:
    max_iterations: int = 50
    cost_decrease_tol: float = 1e-8
    step_tol: float = 1e-10
    init_lambda: float = 1e-4
    max_lambda: float = 1e12


@dataclass
class FactorGraph:
    states: StateVector
    factors: list = field(default_factory=list)

    def total_cost(self):
        c = 0.0
        for f in self.factors:
            if isinstance(f, RelPoseFactor):
                e = f._sqrt_info @ f.residual(self.states)
                c += 0.5 * float(e @ e)
            else:
                c += f.cost(self.states)
        return c


def _cost_of(states, factors):
    return FactorGraph(states, factors).total_cost()


def optimize(graph: FactorGraph, opts: OptimizeOptions | None = None):
    """Robust LM; returns (states, report).  Never increases the cost between
    accepted steps; raises SolverFailure if damping cannot make H SPD."""
    opts = opts or OptimizeOptions()
    states = graph.states
    factors = graph.factors
    if not factors:
        raise ValueError("factor graph has no factors")
    if not any(states.fixed):
        raise ValueError("gauge not fixed: at least one state must be held")

    cols = states.column_of()
    n_params = 6 * len(cols)
    lam = opts.init_lambda
    cost = _cost_of(states, factors)
    report = {"initial_cost": cost, "iterations": [], "termination": "max_iterations"}

    for it in range(opts.max_iterations):
        H = np.zeros((n_params, n_params))
        grad = np.zeros(n_params)
        for f in factors:
            res, jacs, _ = f.linearize(states)
            for i, Ji in jacs.items():
                if i not in cols:
                    continue
                ci = cols[i]
                grad[ci : ci + 6] += Ji.T @ res
                for j, Jj in jacs.items():
                    if j not in cols:
                        continue
                    cj = cols[j]
                    H[ci : ci + 6, cj : cj + 6] += Ji.T @ Jj

        accepted = False
        step_norm = 0.0
        while lam <= opts.max_lambda:
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                cho = scipy.linalg.cho_factor(damped, check_finite=False)
            except scipy.linalg.LinAlgError:
                lam *= 10.0
                continue
            delta = scipy.linalg.cho_solve(cho, -grad, check_finite=False)
            step_norm = float(np.linalg.norm(delta))
            if step_norm < opts.step_tol:
                accepted = False
                break
            candidate = states.retracted(delta)
            new_cost = _cost_of(candidate, factors)
            if new_cost < cost:
                states = candidate
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                report["iterations"].append(
                    {"iteration": it, "cost": cost, "lambda": lam, "step_norm": step_norm,
                     "accepted": True}
                )
                if rel < opts.cost_decrease_tol:
                    report["termination"] = "cost_decrease"
                break
            lam *= 4.0
        else:
            raise SolverFailure(
                "damping exceeded max_lambda without an SPD, cost-decreasing step",
                {"lambda": lam, "cost": cost, "iteration": it},
            )

        if not accepted:
            report["termination"] = "step_norm"
            break
        if report["termination"] == "cost_decrease":
            break

    report["final_cost"] = cost
    report["num_iterations"] = len(report["iterations"])
    return states, report


def jacobian_selftest(factor, states: StateVector, step: float = 1e-6):
    """Max relative deviation between analytic and central-difference Jacobians."""
    free = states.column_of()
    if isinstance(factor, RelPoseFactor):
        analytic = {
            i: factor._sqrt_info @ J for i, J in factor._jacobians(states).items() if i in free
        }
        def res_fn(st):
            return factor._sqrt_info @ factor.residual(st)
    else:
        # unit-weight, non-robust residual for o2p to isolate the geometry chain
        def res_fn(st):
            e, _ = factor.residual(st)
            return e
        _, jacs, _ = _plain_o2p_jacobians(factor, states)
        analytic = jacs

    worst = 0.0
    for i, Ja in analytic.items():
        Jn = np.zeros_like(Ja)
        for k in range(6):
            d = np.zeros(6 * len(states.column_of()))
            col = states.column_of()[i]
            d[col + k] = step
            rp = res_fn(states.retracted(d))
            d[col + k] = -step
            rm = res_fn(states.retracted(d))
            Jn[:, k] = (rp - rm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(Ja), np.abs(Jn)), 1.0)
        worst = max(worst, float(np.max(np.abs(Ja - Jn) / denom)))
    return worst


def _plain_o2p_jacobians(factor: O2PFactor, states: StateVector):
    """o2p Jacobians without weighting or robustification (selftest helper)."""
    p_W, p_M, T_MW, g, gn, e, w, ok = factor._evaluate(states)
    p_W, g, gn, e = p_W[ok], g[ok], gn[ok], e[ok]
    R_MW = T_MW.rotation_matrix()
    nrm = g / gn[:, None]
    nR = nrm @ R_MW
    cross = np.cross(p_W, nR)
    J_a = np.concatenate([cross, nR], axis=1)
    jacs = {}
    if not states.fixed[factor.a]:
        jacs[factor.a] = J_a
    if not states.fixed[factor.b]:
        jacs[factor.b] = -J_a
    return e, jacs, ok
