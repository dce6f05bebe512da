"""Sparse-voxel occupancy submap with uncertainty-weighted log-odds integration.

Voxels live in 8x8x8 blocks keyed by integer block coordinates; each voxel
stores the running mean of log-odds observations L and an observation count.
Integration is projective (voxel-centric): every candidate voxel center is
projected into the depth image and receives at most one update per image, so
the result is identical to a brute-force per-voxel evaluation of the inverse
sensor model.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .depth_oracle import DepthImage
from .geometry import Pose, inverse

BLOCK = 8
BLOCK_VOLUME = BLOCK**3

_MAGIC = b"OSUB"
_VERSION = 1


@dataclass
class InverseSensorParams:
    l_min: float = -5.015
    w_max: int = 100
    k_tau: float = 0.05  # surface thickness tau = max(k_tau * d, tau_min)
    tau_min: float | None = None  # [m]; defaults to 4 voxels
    free_space_stride: int = 1
    clamp_weight: bool = True  # weight numerator by min(count, w_max) vs raw count

    def __post_init__(self):
        if self.l_min >= 0:
            raise ValueError("l_min must be negative")
        if self.k_tau <= 0 or self.w_max < 1:
            raise ValueError("require k_tau > 0 and w_max >= 1")

    def tau_floor(self, resolution):
        return 4.0 * resolution if self.tau_min is None else self.tau_min


def inverse_sensor_model(d_r, sigma_d, tau, p: InverseSensorParams):
    """Piecewise-linear log-odds for signed ray distance d_r (positive behind
    the surface); None outside the integration band (d_r >= tau)."""
    if sigma_d <= 0 or tau <= 0:
        raise ValueError("require sigma_d > 0 and tau > 0")
    if d_r >= tau:
        return None
    if d_r < -3.0 * sigma_d:
        return p.l_min
    if d_r < 0.5 * tau:
        return abs(p.l_min) / (3.0 * sigma_d) * d_r
    return abs(p.l_min) * tau / (6.0 * sigma_d)


def update_voxel(L_prev, w_prev, l, w_max):
    """Running mean of log-odds; count saturates at w_max."""
    return (L_prev * w_prev + l) / (w_prev + 1), min(w_prev + 1, w_max)


def transform_components(R, t, x, y, z):
    """Apply a rigid transform componentwise with a fixed evaluation order."""
    xo = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yo = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zo = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    return xo, yo, zo


# local voxel offsets of one block, flat index = (lx * 8 + ly) * 8 + lz
_LOCAL = np.stack(
    np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), np.arange(BLOCK), indexing="ij"), axis=-1
).reshape(-1, 3)


class OccupancySubmap:
    """Occupancy map anchored at T_WM; voxel centers at (index + 0.5) * resolution."""

    def __init__(self, anchor: Pose | None = None, resolution: float = 0.025):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.anchor = anchor if anchor is not None else Pose.identity()
        self.resolution = float(resolution)
        self._blocks: dict[tuple, int] = {}
        cap = 64
        self._L = np.zeros((cap, BLOCK_VOLUME))
        self._count = np.zeros((cap, BLOCK_VOLUME), dtype=np.int64)
        self._key_index = None  # lazily built (sorted encoded keys, slots)

    # -- storage ---------------------------------------------------------

    @property
    def num_blocks(self):
        return len(self._blocks)

    def _grow(self, needed):
        cap = self._L.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        self._L = np.concatenate([self._L, np.zeros((new_cap - cap, BLOCK_VOLUME))])
        self._count = np.concatenate(
            [self._count, np.zeros((new_cap - cap, BLOCK_VOLUME), dtype=np.int64)]
        )

    def _slot_of(self, key, create=False):
        slot = self._blocks.get(key)
        if slot is None and create:
            slot = len(self._blocks)
            self._grow(slot + 1)
            self._blocks[key] = slot
            self._key_index = None
        return slot

    def voxel_state(self, idx):
        """(L, count) of voxel with integer index idx; (0.0, 0) if unallocated."""
        key = (idx[0] >> 3, idx[1] >> 3, idx[2] >> 3)
        slot = self._blocks.get(key)
        if slot is None:
            return 0.0, 0
        flat = ((idx[0] & 7) * BLOCK + (idx[1] & 7)) * BLOCK + (idx[2] & 7)
        return float(self._L[slot, flat]), int(self._count[slot, flat])

    def set_voxel(self, idx, L, count=1):
        """Directly set a voxel's log-odds and observation count (allocates the
        block).  Intended for constructing reference fields in tests/tools."""
        key = (int(idx[0]) >> 3, int(idx[1]) >> 3, int(idx[2]) >> 3)
        slot = self._slot_of(key, create=True)
        flat = ((int(idx[0]) & 7) * BLOCK + (int(idx[1]) & 7)) * BLOCK + (int(idx[2]) & 7)
        self._L[slot, flat] = L
        self._count[slot, flat] = count

    @staticmethod
    def _encode_keys(keys):
        # pack a block key into one int64 (21 bits per signed axis)
        off = np.int64(1) << 20
        return (
            ((keys[:, 0] + off) << 42) | ((keys[:, 1] + off) << 21) | (keys[:, 2] + off)
        )

    def _lookup_many(self, idx):
        """Vectorized (L, count) for (N, 3) integer voxel indices."""
        idx = np.asarray(idx, dtype=np.int64)
        L = np.zeros(idx.shape[0])
        cnt = np.zeros(idx.shape[0], dtype=np.int64)
        if not self._blocks:
            return L, cnt
        if self._key_index is None:
            keys = np.array(list(self._blocks.keys()), dtype=np.int64).reshape(-1, 3)
            enc = self._encode_keys(keys)
            order = np.argsort(enc)
            self._key_index = (enc[order], np.array(list(self._blocks.values()))[order])
        enc_sorted, slot_sorted = self._key_index
        flats = ((idx[:, 0] & 7) * BLOCK + (idx[:, 1] & 7)) * BLOCK + (idx[:, 2] & 7)
        enc_q = self._encode_keys(idx >> 3)
        pos = np.searchsorted(enc_sorted, enc_q)
        pos_c = np.minimum(pos, enc_sorted.shape[0] - 1)
        found = enc_sorted[pos_c] == enc_q
        slots = slot_sorted[pos_c[found]]
        L[found] = self._L[slots, flats[found]]
        cnt[found] = self._count[slots, flats[found]]
        return L, cnt

    def observed_index_bounds(self):
        """Inclusive (lo, hi) voxel-index bounds of allocated blocks, or None."""
        if not self._blocks:
            return None
        keys = np.array(list(self._blocks.keys()))
        return keys.min(axis=0) * BLOCK, (keys.max(axis=0) + 1) * BLOCK - 1

    def content_hash(self):
        h = hashlib.sha256()
        for key in sorted(self._blocks):
            slot = self._blocks[key]
            h.update(struct.pack("<3i", *key))
            h.update(self._L[slot].tobytes())
            h.update(self._count[slot].tobytes())
        return h.hexdigest()

    # -- integration -----------------------------------------------------

    def integrate_depth_image(self, T_MC: Pose, img: DepthImage, p: InverseSensorParams):
        """Project candidate voxel centers into the depth image and apply the
        inverse sensor model; each voxel is updated at most once per image."""
        cam = img.camera
        valid = img.valid
        if not valid.any():
            return
        r = self.resolution
        dmax = float(img.depth[valid].max())
        tau_floor = p.tau_floor(r)
        tau_max = max(p.k_tau * dmax, tau_floor)
        reach = dmax + tau_max

        # frustum AABB in map frame: camera origin plus the 4 corner rays at full reach
        R_MC = T_MC.rotation_matrix()
        corners_px = np.array(
            [[-0.5, -0.5], [cam.width - 0.5, -0.5], [-0.5, cam.height - 0.5],
             [cam.width - 0.5, cam.height - 0.5]]
        )
        rays = np.column_stack(
            [(corners_px[:, 0] - cam.cx) / cam.fx, (corners_px[:, 1] - cam.cy) / cam.fy,
             np.ones(4)]
        )
        pts = np.vstack([T_MC.t, (rays * reach) @ R_MC.T + T_MC.t])
        lo = np.floor((pts.min(axis=0) - r) / (BLOCK * r)).astype(np.int64)
        hi = np.floor((pts.max(axis=0) + r) / (BLOCK * r)).astype(np.int64)

        bx, by, bz = np.meshgrid(
            np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1),
            np.arange(lo[2], hi[2] + 1), indexing="ij",
        )
        keys = np.column_stack([bx.ravel(), by.ravel(), bz.ravel()])

        # conservative block cull on projected block centers
        T_CM = inverse(T_MC)
        R_CM, t_CM = T_CM.rotation_matrix(), T_CM.t
        bc_M = (keys + 0.5) * (BLOCK * r)
        bc_C = bc_M @ R_CM.T + t_CM
        bd = 0.5 * BLOCK * r * np.sqrt(3.0)
        z = bc_C[:, 2]
        keep = (z > -bd) & (z - bd < reach)
        far_enough = keep & (z >= bd)
        if far_enough.any():
            z_eff = np.maximum(z[far_enough] - bd, r)
            mu = cam.fx * bd / z_eff
            mv = cam.fy * bd / z_eff
            u = cam.fx * bc_C[far_enough, 0] / z[far_enough] + cam.cx
            v = cam.fy * bc_C[far_enough, 1] / z[far_enough] + cam.cy
            inside = (u >= -mu) & (u <= cam.width - 1 + mu) & (v >= -mv) & (v <= cam.height - 1 + mv)
            keep_idx = np.flatnonzero(far_enough)
            keep[keep_idx[~inside]] = False
        keys = keys[keep]
        if keys.size == 0:
            return

        # process blocks in cache-sized chunks; each voxel is touched at most
        # once per image, so chunk order does not affect the result
        chunk = 64
        for start in range(0, keys.shape[0], chunk):
            kc = keys[start : start + chunk]
            nb = kc.shape[0]
            # voxel centers, one flat axis per component; explicit component
            # transforms (not matmul) so the arithmetic matches a scalar
            # per-voxel evaluation bit for bit
            cx = ((kc[:, 0:1] * BLOCK + _LOCAL[None, :, 0]) + 0.5).reshape(-1) * r
            cy = ((kc[:, 1:2] * BLOCK + _LOCAL[None, :, 1]) + 0.5).reshape(-1) * r
            cz = ((kc[:, 2:3] * BLOCK + _LOCAL[None, :, 2]) + 0.5).reshape(-1) * r
            xc, yc, zc = transform_components(R_CM, t_CM, cx, cy, cz)

            with np.errstate(divide="ignore", invalid="ignore"):
                iu = np.rint(cam.fx * xc / zc + cam.cx).astype(np.int64)
                iv = np.rint(cam.fy * yc / zc + cam.cy).astype(np.int64)
            upd = (zc > 0.0) & (iu >= 0) & (iu < cam.width) & (iv >= 0) & (iv < cam.height)

            # narrow to surviving voxels before the per-voxel model arithmetic
            idx = np.flatnonzero(upd)
            iu, iv = iu[idx], iv[idx]
            vmask = valid[iv, iu]
            idx, iu, iv = idx[vmask], iu[vmask], iv[vmask]
            d = img.depth[iv, iu]
            sd = img.sigma[iv, iu]
            zc = zc[idx]
            tau = np.maximum(p.k_tau * d, tau_floor)
            d_r = zc - d
            band = d_r < tau
            idx, zc, d, sd = idx[band], zc[band], d[band], sd[band]
            tau, d_r = tau[band], d_r[band]
            if idx.size == 0:
                continue

            free = d_r < -3.0 * sd
            occ_hi = d_r >= 0.5 * tau
            l = np.where(
                free,
                p.l_min,
                np.where(occ_hi, abs(p.l_min) * tau / (6.0 * sd),
                         abs(p.l_min) / (3.0 * sd) * d_r),
            )
            if p.free_space_stride > 1:
                zi = np.floor(zc / r).astype(np.int64)
                keep = ~free | (zi % p.free_space_stride == 0)
                idx, l = idx[keep], l[keep]

            block_of = idx // BLOCK_VOLUME
            slots = np.full(nb, -1, dtype=np.int64)
            for i in np.unique(block_of):
                slots[i] = self._slot_of((int(kc[i, 0]), int(kc[i, 1]), int(kc[i, 2])),
                                         create=True)
            sidx = slots[block_of] * BLOCK_VOLUME + idx % BLOCK_VOLUME

            L_flat = self._L.reshape(-1)
            c_flat = self._count.reshape(-1)
            cnt = c_flat[sidx]
            wgt = np.minimum(cnt, p.w_max) if p.clamp_weight else cnt
            L_flat[sidx] = (L_flat[sidx] * wgt + l) / (wgt + 1)
            c_flat[sidx] = cnt + 1

    # -- queries ---------------------------------------------------------

    def query_L_many(self, points):
        """Trilinear interpolation of L at (N, 3) map-frame points.

        Returns (L, ok); ok is False wherever any of the 8 surrounding voxels
        is unobserved.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = pts / self.resolution - 0.5
        base = np.floor(g).astype(np.int64)
        frac = g - base

        L = np.zeros(pts.shape[0])
        ok = np.ones(pts.shape[0], dtype=bool)
        for corner in range(8):
            off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            Lc, cnt = self._lookup_many(base + off)
            w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
            L += w * Lc
            ok &= cnt > 0
        return L, ok

    def query_L(self, p_M):
        L, ok = self.query_L_many(np.asarray(p_M, dtype=float)[None, :])
        return float(L[0]) if ok[0] else None

    def grad_L_many(self, points):
        """Central-difference gradient of interpolated L, step = one voxel."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.resolution
        g = np.zeros_like(pts)
        ok = np.ones(pts.shape[0], dtype=bool)
        for ax in range(3):
            step = np.zeros(3)
            step[ax] = h
            Lp, okp = self.query_L_many(pts + step)
            Lm, okm = self.query_L_many(pts - step)
            g[:, ax] = (Lp - Lm) / (2.0 * h)
            ok &= okp & okm
        return g, ok

    def grad_L(self, p_M):
        g, ok = self.grad_L_many(np.asarray(p_M, dtype=float)[None, :])
        return g[0] if ok[0] else None

    def extract_mesh(self):
        """Marching-cubes iso-surface at L = 0 over observed voxels.

        Returns (vertices (V, 3) in the submap frame, triangles (F, 3)).
        Cells touching any unobserved voxel are skipped.
        """
        from skimage import measure

        bounds = self.observed_index_bounds()
        if bounds is None:
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
        lo, hi = bounds
        shape = tuple(hi - lo + 1)
        L = np.zeros(shape)
        observed = np.zeros(shape, dtype=bool)
        for key, slot in self._blocks.items():
            sl = tuple(
                slice(key[a] * BLOCK - lo[a], key[a] * BLOCK - lo[a] + BLOCK) for a in range(3)
            )
            L[sl] = self._L[slot].reshape(BLOCK, BLOCK, BLOCK)
            observed[sl] = self._count[slot].reshape(BLOCK, BLOCK, BLOCK) > 0
        r = self.resolution
        try:
            verts, faces, _, _ = measure.marching_cubes(L, level=0.0, spacing=(r, r, r),
                                                        mask=observed)
        except (ValueError, RuntimeError):
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)

        # drop vertices whose interpolation edge touches an unobserved voxel;
        # skimage's mask can still emit vertices at unobserved corners holding
        # the fill value (which equals the iso level)
        g = verts / r
        lo_idx = np.floor(g + 1e-9).astype(np.int64)
        hi_idx = np.ceil(g - 1e-9).astype(np.int64)
        keep = np.ones(verts.shape[0], dtype=bool)
        for endpoint in (lo_idx, hi_idx):
            inb = np.all((endpoint >= 0) & (endpoint < np.array(shape)), axis=1)
            keep &= inb
            e = np.clip(endpoint, 0, np.array(shape) - 1)
            keep &= observed[e[:, 0], e[:, 1], e[:, 2]]
        verts = verts + (lo + 0.5) * r
        if keep.all():
            return verts, faces.astype(np.int64)
        remap = -np.ones(keep.shape[0], dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        faces = remap[faces]
        faces = faces[(faces >= 0).all(axis=1)]
        return verts[keep], faces.astype(np.int64)

    # -- serialization ---------------------------------------------------

    def save(self, path):
        """Binary block dump: magic, version, resolution, anchor pose, blocks."""
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<d", self.resolution))
            f.write(struct.pack("<7d", *self.anchor.q, *self.anchor.t))
            f.write(struct.pack("<I", len(self._blocks)))
            for key in sorted(self._blocks):
                slot = self._blocks[key]
                f.write(struct.pack("<3i", *key))
                f.write(self._L[slot].astype("<f8").tobytes())
                f.write(self._count[slot].astype("<i8").tobytes())

    @staticmethod
    def load(path):
        with open(path, "rb") as f:
            if f.read(4) != _MAGIC:
                raise ValueError("not a submap file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != _VERSION:
                raise ValueError(f"unsupported submap version {version}")
            (res,) = struct.unpack("<d", f.read(8))
            vals = struct.unpack("<7d", f.read(56))
            m = OccupancySubmap(Pose(np.array(vals[:4]), np.array(vals[4:])), res)
            (nb,) = struct.unpack("<I", f.read(4))
            m._grow(nb)
            for slot in range(nb):
                key = struct.unpack("<3i", f.read(12))
                m._blocks[key] = slot
                m._L[slot] = np.frombuffer(f.read(8 * BLOCK_VOLUME), dtype="<f8")
                m._count[slot] = np.frombuffer(f.read(8 * BLOCK_VOLUME), dtype="<i8")
            return m


def write_ply(path, vertices, faces):
    """Binary little-endian PLY: float32 positions, uint32 triangle indices."""
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<u4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\n"
        "property list uchar uint vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertices.tobytes())
        if len(faces):
            counts = np.full((len(faces), 1), 3, dtype="<u1")
            rec = np.empty(len(faces), dtype=[("n", "<u1"), ("idx", "<u4", (3,))])
            rec["n"] = counts[:, 0]
            rec["idx"] = faces
            f.write(rec.tobytes())


def read_ply_vertices(path):
    """Read vertex positions back from a PLY written by write_ply."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    verts = np.frombuffer(data[end : end + 12 * nv], dtype="<f4").reshape(nv, 3)
    return verts.astype(float)
