"""Synthetic scenes: phantoms, contour generators, simulated matches and start poses.

This stands in for the image pipeline.  A phantom is a dense surface point
cloud with outward normals.  For a pose, the contour generator points are
the surface points whose normal is (nearly) orthogonal to the viewing ray.
Each of those is "matched" along the image contour normal, either to the
projection of the same material point under the ground-truth pose (inlier,
plus noise) or to something else (outlier).

Seed splitting
--------------
All randomness descends from one root seed.  A stream is addressed by a
tuple of non-negative integers and realised as
``np.random.SeedSequence(root, spawn_key=(stream, *keys))`` (see
``derive_rng``).  Stream ids are the ``STREAM_*`` constants below.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadParams, DegenerateProjection, NoContour, SamplingFailed
from .geometry import EPS_DEPTH, Array, PinholeCamera, RigidTransform, box_corners, compose, mtre, rodrigues
from .ppc import CorrespondenceSet

STREAM_SCENE = 0
STREAM_STARTS = 1
STREAM_REGISTER = 2
STREAM_CORPUS = 3
STREAM_PHANTOM = 4

SCENE_FORMAT = "ppclearn-scenes"
SCENE_VERSION = 1


def derive_seed(root: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))


def derive_rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


# --- phantoms -------------------------------------------------------------------

@dataclass(eq=False)
class Phantom:
    """Surface samples in the volume frame.

    ``structure`` is 0 for the registered structure and ``k >= 1`` for the
    k-th distractor replica, which is a copy shifted by ``replica_offsets[k-1]``.
    """

    points: Array
    normals: Array
    structure: Array
    voi: tuple[Array, Array]
    replica_offsets: Array
    kind: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self._target_idx = np.flatnonzero(self.structure == 0)
        self._target_pts = np.ascontiguousarray(self.points[self._target_idx])
        self._target_nrm = np.ascontiguousarray(self.normals[self._target_idx])
        # cached terms for the rotated contour test in contour_indices
        self._pts_t = np.ascontiguousarray(self._target_pts.T)
        self._nrm_t = np.ascontiguousarray(self._target_nrm.T)
        self._n_dot_p = np.einsum("ij,ij->i", self._target_pts, self._target_nrm)
        self._p_sq = np.einsum("ij,ij->i", self._target_pts, self._target_pts)
        self._points_t = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).T)
        self._normals_t = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64).T)

    @property
    def target_mask(self) -> Array:
        return self.structure == 0

    @property
    def corners(self) -> Array:
        return box_corners(*self.voi)


def _allocate(areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    raw = areas / areas.sum() * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    return counts


def _box_surface(center, size, n, rng):
    sx, sy, sz = size
    areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy]
    pts, nrm = [], []
    for face, k in enumerate(_allocate(areas, n)):
        axis, sign = face // 2, (1.0 if face % 2 == 0 else -1.0)
        u = rng.uniform(-0.5, 0.5, size=(k, 3)) * np.asarray(size)
        u[:, axis] = sign * 0.5 * size[axis]
        nn = np.zeros((k, 3))
        nn[:, axis] = sign
        pts.append(u)
        nrm.append(nn)
    return np.vstack(pts) + np.asarray(center), np.vstack(nrm)


def _cylinder_surface(center, radius, height, axis, n, rng, caps=True):
    areas = [2 * math.pi * radius * height] + ([math.pi * radius**2] * 2 if caps else [])
    counts = _allocate(areas, n)
    th = rng.uniform(0, 2 * math.pi, counts[0])
    h = rng.uniform(-height / 2, height / 2, counts[0])
    local = [np.column_stack([radius * np.cos(th), radius * np.sin(th), h])]
    lnrm = [np.column_stack([np.cos(th), np.sin(th), np.zeros_like(th)])]
    if caps:
        for k, sign in zip(counts[1:], (1.0, -1.0)):
            rr = radius * np.sqrt(rng.uniform(0, 1, k))
            a = rng.uniform(0, 2 * math.pi, k)
            local.append(np.column_stack([rr * np.cos(a), rr * np.sin(a), np.full(k, sign * height / 2)]))
            lnrm.append(np.tile([0.0, 0.0, sign], (k, 1)))
    pts, nrm = np.vstack(local), np.vstack(lnrm)
    # local z is the cylinder axis
    perm = {"x": [2, 0, 1], "y": [1, 2, 0], "z": [0, 1, 2]}[axis]
    return pts[:, perm] + np.asarray(center), nrm[:, perm]


def _sphere_surface(center, radius, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v + np.asarray(center), v


PHANTOM_DEFAULTS = {
    "box": {"size": [40.0, 30.0, 25.0], "n_points": 6000},
    "cylinder": {"radius": 15.0, "height": 40.0, "n_points": 6000},
    "sphere": {"radius": 20.0, "n_points": 6000},
    "vertebra": {"body_radius": 16.0, "body_height": 22.0, "power": 2.0, "n_points": 12000},
    "blocky": {"body_radius": 16.0, "body_height": 22.0, "n_points": 12000},
}


def make_phantom(kind: str, params: dict | None = None, seed: int = 0) -> Phantom:
    """Build a phantom.

    Kinds: ``box``, ``cylinder`` (axis z), ``sphere`` and ``vertebra`` (a
    union of superellipsoids with the spine axis along y).  ``replicas`` adds copies
    shifted by ``k * replica_spacing`` along ``replica_axis`` for every
    integer ``k`` in the list, e.g. ``[-1, 1]``.
    """
    if kind not in PHANTOM_DEFAULTS:
        raise BadParams(f"unknown phantom kind {kind!r}; expected one of {sorted(PHANTOM_DEFAULTS)}")
    p = {**PHANTOM_DEFAULTS[kind], "replicas": [], "replica_spacing": 30.0, "replica_axis": "y", **(params or {})}
    n = int(p["n_points"])
    if n < 100:
        raise BadParams("n_points must be at least 100")
    rng = np.random.default_rng(seed)
    if kind == "box":
        size = np.asarray(p["size"], dtype=np.float64)
        if size.shape != (3,) or np.any(size <= 0):
            raise BadParams("box size must be three positive lengths")
        pts, nrm = _box_surface(np.zeros(3), size, n, rng)
    elif kind == "cylinder":
        if p["radius"] <= 0 or p["height"] <= 0:
            raise BadParams("cylinder radius and height must be positive")
        pts, nrm = _cylinder_surface(np.zeros(3), p["radius"], p["height"], "z", n, rng)
    elif kind == "sphere":
        if p["radius"] <= 0:
            raise BadParams("sphere radius must be positive")
        pts, nrm = _sphere_surface(np.zeros(3), p["radius"], n, rng)
    elif kind == "blocky":
        pts, nrm = _blocky_vertebra_surface(p, n, rng)
    else:
        pts, nrm = _vertebra_surface(p, n, rng)
    pts = np.asarray(pts, dtype=np.float64)
    voi = (pts.min(axis=0), pts.max(axis=0))
    axis = {"x": 0, "y": 1, "z": 2}[p["replica_axis"]]
    offsets = []
    for k in p["replicas"]:
        off = np.zeros(3)
        off[axis] = float(k) * float(p["replica_spacing"])
        offsets.append(off)
    offsets = np.array(offsets).reshape(-1, 3)
    all_pts, all_nrm, struct = [pts], [nrm], [np.zeros(len(pts), dtype=int)]
    for i, off in enumerate(offsets, start=1):
        all_pts.append(pts + off)
        all_nrm.append(nrm.copy())
        struct.append(np.full(len(pts), i))
    return Phantom(np.vstack(all_pts), np.vstack(all_nrm), np.concatenate(struct), voi, offsets, kind, p)


def _superellipsoid_surface(center, radii, n, rng, power=2.0):
    """Area-uniform samples on ``sum(|x_i / a_i|^power) = 1`` (``power=2``: ellipsoid).

    Directions are pushed radially onto the surface and thinned by rejection
    on the area element ``r^2 / (u . normal)``.
    """
    a = np.asarray(radii, dtype=np.float64)
    pts, nrms = [], []
    have = 0
    while have < n:
        u = rng.normal(size=(4 * (n - have) + 64, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = np.sum(np.abs(u / a) ** power, axis=1) ** (-1.0 / power)
        x = u * r[:, None]
        g = np.sign(x) * np.abs(x / a) ** (power - 1.0) / a
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        dens = r**2 / np.maximum(np.sum(u * g, axis=1), 1e-6)
        keep = rng.random(len(u)) * (dens.max() * 1.05) < dens
        pts.append(x[keep])
        nrms.append(g[keep])
        have += int(keep.sum())
    return np.vstack(pts)[:n] + np.asarray(center), np.vstack(nrms)[:n]


def _inside_superellipsoid(x, center, radii, power=2.0, margin=1e-9):
    return np.sum(np.abs((x - np.asarray(center)) / np.asarray(radii)) ** power, axis=1) < 1.0 - margin


def _vertebra_surface(p, n, rng):
    """Union of superellipsoids: body, pedicles, lamina, spinous and transverse processes.

    ``power`` sets how box-like the parts are (2 gives ellipsoids).  Samples
    of one part that fall inside another part are dropped, so only the outer
    surface of the union remains.
    """
    r = float(p["body_radius"])
    h = float(p["body_height"])
    pw = float(p.get("power", 2.0))
    if r <= 0 or h <= 0:
        raise BadParams("vertebra body radius and height must be positive")
    if pw < 2.0:
        raise BadParams("vertebra power must be >= 2")
    # +z is anterior, y is the spine axis
    parts = [
        ((0.0, 0.0, 0.0), (r, 0.5 * h, 0.85 * r)),                     # body
        ((0.55 * r, 0.0, -0.9 * r), (0.28 * r, 0.28 * h, 0.55 * r)),    # pedicles
        ((-0.55 * r, 0.0, -0.9 * r), (0.28 * r, 0.28 * h, 0.55 * r)),
        ((0.0, 0.0, -1.45 * r), (0.75 * r, 0.3 * h, 0.3 * r)),          # lamina
        ((0.0, -0.15 * h, -1.45 * r - 14.0), (3.5, 0.3 * h, 13.0)),     # spinous process
        ((r + 4.0, 0.0, -1.3 * r), (10.0, 0.18 * h, 3.5)),              # transverse processes
        ((-r - 4.0, 0.0, -1.3 * r), (10.0, 0.18 * h, 3.5)),
    ]
    areas = [_ellipsoid_area(ax) for _, ax in parts]
    pts, nrm = [], []
    # oversample so that at least n points survive the union trimming
    for i, ((c, ax), k) in enumerate(zip(parts, _allocate(areas, int(1.5 * n)))):
        a, b = _superellipsoid_surface(c, ax, k, rng, pw)
        keep = np.ones(len(a), dtype=bool)
        for j, (c2, ax2) in enumerate(parts):
            if j != i:
                keep &= ~_inside_superellipsoid(a, c2, ax2, pw)
        pts.append(a[keep])
        nrm.append(b[keep])
    pts, nrm = np.vstack(pts), np.vstack(nrm)
    sel = np.sort(rng.permutation(len(pts))[:n])
    return pts[sel], nrm[sel]


def _blocky_vertebra_surface(p, n, rng):
    r = float(p["body_radius"])
    h = float(p["body_height"])
    parts = [
        ("cyl", (0.0, 0.0, 0.0), r, h),
        ("box", (0.0, 0.0, -r - 6.0), (0.9 * r, 0.45 * h, 12.0)),
        ("box", (0.0, -0.1 * h, -r - 12.0 - 10.0), (6.0, 0.5 * h, 20.0)),
        ("box", (r + 6.0, 0.0, -r - 6.0), (14.0, 0.3 * h, 6.0)),
        ("box", (-r - 6.0, 0.0, -r - 6.0), (14.0, 0.3 * h, 6.0)),
    ]
    areas = []
    for part in parts:
        if part[0] == "cyl":
            areas.append(2 * math.pi * part[2] * part[3] + 2 * math.pi * part[2] ** 2)
        else:
            sx, sy, sz = part[2]
            areas.append(2 * (sx * sy + sy * sz + sx * sz))
    pts, nrm = [], []
    for part, k in zip(parts, _allocate(areas, n)):
        if part[0] == "cyl":
            a, b = _cylinder_surface(part[1], part[2], part[3], "y", k, rng)
        else:
            a, b = _box_surface(part[1], np.asarray(part[2]), k, rng)
        pts.append(a)
        nrm.append(b)
    return np.vstack(pts), np.vstack(nrm)


def _ellipsoid_area(radii):
    # Knud Thomsen's approximation; only used to split the point budget
    a, b, c = radii
    q = 1.6075
    return 4 * math.pi * (((a * b) ** q + (a * c) ** q + (b * c) ** q) / 3.0) ** (1.0 / q)


# --- contours and correspondences ---------------------------------------------

def contour_mask(points_cam: Array, normals_cam: Array, camera: PinholeCamera, tol_rad: float) -> Array:
    """Surface points whose normal is within ``tol_rad`` of orthogonal to the viewing ray."""
    rays = points_cam - camera.source
    dot = np.einsum("ij,ij->i", normals_cam, rays)
    return dot * dot <= math.sin(tol_rad) ** 2 * np.einsum("ij,ij->i", rays, rays)


def contour_points(phantom: Phantom, camera: PinholeCamera, T: RigidTransform, tol_rad: float = math.radians(5.0)) -> Array:
    """Camera-frame contour generator points of the registered structure."""
    idx = contour_indices(phantom, camera, T, tol_rad)
    return T.apply(phantom.points[idx])


def contour_indices(phantom, camera, T, tol_rad) -> Array:
    # same test as contour_mask, evaluated in the volume frame:
    # ray = R (p + a) with a = R^T (t - source)
    a = T.rotation.T @ (T.translation - camera.source)
    dot = phantom._n_dot_p + a @ phantom._nrm_t
    ray_sq = phantom._p_sq + 2.0 * (a @ phantom._pts_t) + a @ a
    idx = phantom._target_idx[dot * dot <= math.sin(tol_rad) ** 2 * ray_sq]
    if len(idx) == 0:
        raise NoContour("no contour generator points for this pose")
    return idx


@dataclass
class CorrSimConfig:
    """Matching simulator settings.

    Lengths are detector millimetres at the finest resolution level; a level
    with scale ``k`` divides ``sigma_d`` and ``search_range`` by ``k``.
    """

    sigma_d: float = 0.3
    outlier_rate: float = 0.0
    outlier_mode: str = "uniform"
    ngc_inlier: tuple[float, float] = (0.8, 0.1)
    ngc_outlier: tuple[float, float] = (0.3, 0.2)
    contour_tol_deg: float = 5.0
    search_range: float | None = None
    uniform_range: float = 20.0
    max_points: int | None = 1024
    matching: str = "oracle"
    edge_cell: float = 0.62
    noise_length: float | None = None
    seed: int = 0

    def validate(self) -> list[str]:
        out = []
        if not 0.0 <= self.outlier_rate <= 1.0:
            out.append("outlier_rate: must lie in [0, 1]")
        if self.sigma_d < 0:
            out.append("sigma_d: must be >= 0")
        if self.outlier_mode not in ("uniform", "distractor"):
            out.append("outlier_mode: must be 'uniform' or 'distractor'")
        if not 0 <= self.contour_tol_deg < 90:
            out.append("contour_tol_deg: must lie in [0, 90)")
        if self.search_range is not None and self.search_range <= 0:
            out.append("search_range: must be positive or null")
        if self.matching not in ("oracle", "edge"):
            out.append("matching: must be 'oracle' or 'edge'")
        if self.noise_length is not None and self.noise_length <= 0:
            out.append("noise_length: must be positive or null")
        if self.edge_cell <= 0:
            out.append("edge_cell: must be positive")
        if self.max_points is not None and self.max_points < 6:
            out.append("max_points: must be >= 6 or null")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngc_inlier"] = list(self.ngc_inlier)
        d["ngc_outlier"] = list(self.ngc_outlier)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CorrSimConfig:
        d = dict(d)
        for k in ("ngc_inlier", "ngc_outlier"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


STATUS_OK = 0
STATUS_NO_CONTOUR = 1
STATUS_DEGENERATE = 2


@dataclass(eq=False)
class CorrBatch:
    """Correspondence sets for B poses, zero-padded to a common length M.

    ``mask[b, i]`` marks real rows; ``status[b]`` is one of the ``STATUS_*``
    codes and rows of a failed item are all masked out.
    """

    w: Array
    p: Array
    n: Array
    d: Array
    ngc: Array
    mask: Array
    inlier: Array
    index: Array
    status: Array

    def __len__(self) -> int:
        return len(self.status)

    @property
    def counts(self) -> Array:
        return self.mask.sum(axis=1)

    def item(self, b: int) -> CorrespondenceSet:
        if self.status[b] == STATUS_NO_CONTOUR:
            raise NoContour("no contour generator points for this pose")
        if self.status[b] == STATUS_DEGENERATE:
            raise DegenerateProjection("point at or behind the source")
        k = int(self.mask[b].sum())
        return CorrespondenceSet(self.w[b, :k].copy(), self.p[b, :k].copy(), self.n[b, :k].copy(),
                                 self.d[b, :k].copy(), self.ngc[b, :k].copy(),
                                 self.inlier[b, :k].copy(), self.index[b, :k].copy())


def _contour_masks(phantom: Phantom, camera: PinholeCamera, R: Array, t: Array, tol_rad: float,
                   terms: tuple | None = None) -> Array:
    """Contour test for every target point; ``terms`` may supply permuted phantom terms."""
    n_dot_p, nrm_t, p_sq, pts_t = terms or (phantom._n_dot_p, phantom._nrm_t, phantom._p_sq, phantom._pts_t)
    a = np.einsum("bji,bj->bi", R, t - camera.source)
    dot = n_dot_p + a @ nrm_t
    ray_sq = p_sq + 2.0 * (a @ pts_t) + np.einsum("bi,bi->b", a, a)[:, None]
    return dot * dot <= math.sin(tol_rad) ** 2 * ray_sq


def _rot(R: Array, V, t: Array | None = None) -> list:
    """Rotate component arrays ``V = (x, y, z)`` by per-item rotations ``R`` (B, 3, 3)."""
    out = []
    for i in range(3):
        r = R[:, i, :, None]
        c = r[:, 0] * V[0] + r[:, 1] * V[1] + r[:, 2] * V[2]
        if t is not None:
            c += t[:, i, None]
        out.append(c)
    return out


def _dot(U, V) -> Array:
    return U[0] * V[0] + U[1] * V[1] + U[2] * V[2]


def _local(camera: PinholeCamera, V) -> list:
    rel = [V[i] - camera.source[i] for i in range(3)]
    return [_dot(e, rel) for e in camera.basis]


def _project_local(camera: PinholeCamera, loc, clamp: bool = False) -> tuple[Array, Array]:
    z = np.maximum(loc[2], EPS_DEPTH) if clamp else loc[2]
    f = camera.focal_length / z
    return loc[0] * f + camera.principal_point[0], loc[1] * f + camera.principal_point[1]


@dataclass(eq=False)
class MatchField:
    """Random per-point quantities of one simulated image.

    Arrays are indexed by position in ``phantom._target_idx``.  Because the
    draws are tied to material points instead of calls, simulating the same
    pose twice gives the same matches, as re-reading a fixed image would.
    ``order`` ranks the points by a random priority; the ``max_points``
    subset of a contour is its highest-priority members.
    """

    order: Array
    eta: Array
    u_out: Array
    u_off: Array
    u_rep: Array
    z_ngc: Array
    edges: EdgeImage | None = None
    _terms: tuple | None = field(default=None, repr=False)
    _proj: tuple | None = field(default=None, repr=False)

    def contour_terms(self, phantom: Phantom) -> tuple:
        """Phantom terms of the contour test, permuted into priority order (cached)."""
        if self._terms is None or self._terms[0] is not phantom:
            o = self.order
            self._terms = (phantom, phantom._n_dot_p[o], np.ascontiguousarray(phantom._nrm_t[:, o]),
                           phantom._p_sq[o], np.ascontiguousarray(phantom._pts_t[:, o]))
        return self._terms[1:]

    def reference_projections(self, phantom: Phantom, camera: PinholeCamera, T_gt: RigidTransform) -> tuple:
        """Pose-independent detector positions per target point (cached).

        Returns ``(gu, gv, ru, rv)``: each point under ``T_gt`` and its drawn
        distractor replica under ``T_gt`` (``ru``/``rv`` are None without replicas).
        """
        key = (phantom, camera, T_gt)
        if self._proj is None or any(a is not b for a, b in zip(self._proj[0], key)):
            Rg, tg = T_gt.rotation[None], T_gt.translation[None]
            vol = [c[None] for c in phantom._target_pts.T]
            gu, gv = _project_local(camera, _local(camera, _rot(Rg, vol, tg)), clamp=True)
            ru = rv = None
            if len(phantom.replica_offsets):
                shift = phantom.replica_offsets[self.u_rep]
                rep = [vol[i] + shift[None, :, i] for i in range(3)]
                ru, rv = (x[0] for x in _project_local(camera, _local(camera, _rot(Rg, rep, tg)), clamp=True))
            self._proj = (key, (gu[0], gv[0], ru, rv))
        return self._proj[1]


@dataclass(eq=False)
class EdgeImage:
    """Rasterised ground-truth contours of every structure in the scene.

    ``grid[i, j]`` is set when a projected contour point of any structure
    falls within one cell of cell ``(i, j)``; ``origin`` is the detector
    position of cell ``(0, 0)``.
    """

    grid: Array
    origin: Array
    cell: float

    def first_hit(self, pu: Array, pv: Array, ou: Array, ov: Array, limit: float) -> Array:
        """Offset of the nearest edge cell along ``p + s * o`` with ``|s| <= limit`` (NaN if none)."""
        grid = self.grid
        k = int(limit // self.cell)
        steps = np.zeros(2 * k + 1)
        steps[1::2] = np.arange(1, k + 1)
        steps[2::2] = -np.arange(1, k + 1)
        steps *= self.cell
        H, W = grid.shape
        arrs = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (pu, pv, ou, ov)))
        shape = arrs[0].shape
        pu, pv, ou, ov = (a.ravel() for a in arrs)
        out = np.full(pu.size, np.nan)
        todo = np.flatnonzero(np.isfinite(pu) & np.isfinite(pv) & np.isfinite(ou) & np.isfinite(ov))
        # walk outward from the start; rays leave the work list at their first hit
        for s in steps:
            if not todo.size:
                break
            iu = np.floor((pu[todo] + s * ou[todo] - self.origin[0]) / self.cell)
            iv = np.floor((pv[todo] + s * ov[todo] - self.origin[1]) / self.cell)
            inside = (iu >= 0) & (iu < H) & (iv >= 0) & (iv < W)
            hit = np.zeros(todo.size, dtype=bool)
            hit[inside] = grid[iu[inside].astype(np.int64), iv[inside].astype(np.int64)]
            out[todo[hit]] = s
            todo = todo[~hit]
        return out.reshape(shape)


def render_edges(phantom: Phantom, camera: PinholeCamera, T_gt: RigidTransform, tol_rad: float,
                 cell: float) -> EdgeImage:
    pts = T_gt.apply(phantom.points)
    sel = contour_mask(pts, T_gt.apply_vector(phantom.normals), camera, tol_rad)
    uv = camera.project_points(pts[sel])
    ok = np.all(np.isfinite(uv), axis=1)
    uv = uv[ok]
    margin = 4 * cell
    origin = uv.min(axis=0) - margin
    shape = tuple(np.ceil((uv.max(axis=0) + margin - origin) / cell).astype(int) + 1)
    ij = np.floor((uv - origin) / cell).astype(int)
    grid = np.zeros(shape, dtype=bool)
    grid[ij[:, 0], ij[:, 1]] = True
    # close one-cell gaps between neighbouring samples
    grid = ndimage.binary_dilation(grid, structure=np.ones((3, 3), dtype=bool))
    return EdgeImage(grid, origin, float(cell))


NOISE_WAVES = 64


def draw_field(phantom: Phantom, rng: np.random.Generator, camera: PinholeCamera | None = None,
               T_gt: RigidTransform | None = None, cfg: CorrSimConfig | None = None,
               level_scale: float = 1.0) -> MatchField:
    """Draw one simulated image; ``edge`` matching also needs the camera, pose and config."""
    n = len(phantom._target_idx)
    n_rep = max(1, len(phantom.replica_offsets))
    # fixed draw order keeps streams aligned across configurations
    prio = rng.random(n)
    field_ = MatchField(np.argsort(prio, kind="stable"), rng.normal(size=n), rng.random(n),
                        rng.uniform(-1.0, 1.0, size=n), rng.integers(0, n_rep, size=n), rng.normal(size=n))
    if cfg is not None and cfg.noise_length is not None:
        # smooth unit-variance field over the surface (random Fourier features of a Gaussian kernel)
        k = NOISE_WAVES
        omega = rng.normal(scale=1.0 / cfg.noise_length, size=(k, 3))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=k)
        field_.eta = math.sqrt(2.0 / k) * np.cos(phantom._target_pts @ omega.T + phase).sum(axis=1)
    if cfg is not None and cfg.matching == "edge":
        if camera is None or T_gt is None:
            raise BadParams("edge matching needs the camera and ground-truth pose")
        field_.edges = render_edges(phantom, camera, T_gt, math.radians(cfg.contour_tol_deg),
                                    cfg.edge_cell / level_scale)
    return field_


def simulate_batch(
    phantom: Phantom,
    camera: PinholeCamera,
    R: Array,
    t: Array,
    T_gt: RigidTransform,
    cfg: CorrSimConfig,
    field: MatchField,
    level_scale: float = 1.0,
) -> CorrBatch:
    """Simulate matches for the poses ``(R[b], t[b])`` against one image ``field``.

    Item ``b`` depends only on its own pose, never on the rest of the batch.
    """
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 3)
    B = len(R)
    keep = _contour_masks(phantom, camera, R, t, math.radians(cfg.contour_tol_deg),
                          field.contour_terms(phantom))
    rows, cols = np.nonzero(keep)
    counts = np.bincount(rows, minlength=B)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(rows)) - first[rows]
    if cfg.max_points is not None:
        sel = slot < cfg.max_points
        rows, cols, slot = rows[sel], cols[sel], slot[sel]
        counts = np.minimum(counts, cfg.max_points)
    M = max(1, int(counts.max()))
    mask = np.zeros((B, M), dtype=bool)
    mask[rows, slot] = True
    tpos = np.zeros((B, M), dtype=int)
    tpos[rows, slot] = field.order[cols]
    status = np.where(counts == 0, STATUS_NO_CONTOUR, STATUS_OK)
    index = phantom._target_idx[tpos]
    eta, u_out, u_off, z_ngc = (a[tpos] for a in (field.eta, field.u_out, field.u_off, field.z_ngc))

    vol = list(phantom._points_t[:, index])
    w = _rot(R, vol, t)
    ns = _rot(R, list(phantom._normals_t[:, index]))
    loc = _local(camera, w)
    bad = np.any(mask & ~(loc[2] > EPS_DEPTH), axis=1) & (status == STATUS_OK)
    status[bad] = STATUS_DEGENERATE
    mask[status != STATUS_OK] = False
    loc[2] = np.where(mask, loc[2], 1.0)
    pu, pv = _project_local(camera, loc)
    gu_all, gv_all, ru_all, rv_all = field.reference_projections(phantom, camera, T_gt)
    gu, gv = gu_all[tpos], gv_all[tpos]

    E = camera.basis
    ou, ov = _dot(E[0], ns), _dot(E[1], ns)
    on = np.maximum(np.sqrt(ou * ou + ov * ov), 1e-12)
    ou /= on
    ov /= on
    true_off = ou * (gu - pu) + ov * (gv - pv)
    rng_lim = math.inf if cfg.search_range is None else cfg.search_range / level_scale
    unif_lim = cfg.uniform_range / level_scale if math.isinf(rng_lim) else rng_lim
    inlier = u_out >= cfg.outlier_rate
    off = np.where(inlier, true_off + (cfg.sigma_d / level_scale) * eta, 0.0)
    random_off = unif_lim * u_off
    outl = ~inlier
    if cfg.outlier_mode == "distractor" and len(phantom.replica_offsets):
        ru, rv = ru_all[tpos], rv_all[tpos]
        snap = ou * (ru - pu) + ov * (rv - pv)
        off = np.where(outl, np.where(np.abs(snap) <= rng_lim, snap, random_off), off)
    else:
        off = np.where(outl, random_off, off)
    missed = inlier & (np.abs(true_off) > rng_lim)
    if field.edges is not None:
        # a nearer edge along the search line wins over the true one
        lim = min(rng_lim, unif_lim)
        near = field.edges.first_hit(pu, pv, ou, ov, lim)
        found = ~np.isnan(near)
        wrong = inlier & found & ((np.abs(near) < np.abs(true_off) - 2.0 * field.edges.cell) | missed)
        off = np.where(wrong, near + (cfg.sigma_d / level_scale) * eta, off)
        missed &= ~found
        inlier &= ~wrong
    off = np.where(missed, random_off, off)
    inlier = inlier & ~missed & mask

    # matched detector point, its viewing ray, and the lifted contour tangent (-ov, ou)
    qu = pu + off * ou - camera.principal_point[0]
    qv = pv + off * ov - camera.principal_point[1]
    f = camera.focal_length
    ray = [qu * E[0, i] + qv * E[1, i] + f * E[2, i] for i in range(3)]
    P3 = [ray[i] + camera.source[i] for i in range(3)]
    t3 = [-ov * E[0, i] + ou * E[1, i] for i in range(3)]
    nrm = [ray[1] * t3[2] - ray[2] * t3[1], ray[2] * t3[0] - ray[0] * t3[2], ray[0] * t3[1] - ray[1] * t3[0]]
    nn = np.sqrt(_dot(nrm, nrm))
    # orient normals along the outward image normal of the contour
    o3 = [ou * E[0, i] + ov * E[1, i] for i in range(3)]
    sign = np.sign(_dot(nrm, o3))
    scale = np.where(sign == 0, 1.0, sign) / nn
    nrm = [c * scale for c in nrm]
    d = _dot(nrm, [P3[i] - w[i] for i in range(3)])

    mu = np.where(inlier, cfg.ngc_inlier[0], cfg.ngc_outlier[0])
    sd = np.where(inlier, cfg.ngc_inlier[1], cfg.ngc_outlier[1])
    ngc = np.clip(mu + sd * z_ngc, -1.0, 1.0)
    zero = ~mask
    w, P3, nrm = (np.stack(v, axis=-1) for v in (w, P3, nrm))
    for arr in (w, P3, nrm):
        arr[zero] = 0.0
    d[zero] = 0.0
    ngc[zero] = 0.0
    return CorrBatch(w, P3, nrm, d, ngc, mask, inlier, index, status)


def simulate_correspondences(
    phantom: Phantom,
    camera: PinholeCamera,
    T_current: RigidTransform,
    T_gt: RigidTransform,
    cfg: CorrSimConfig,
    rng: np.random.Generator,
    level_scale: float = 1.0,
) -> CorrespondenceSet:
    """Matches for one pose against a fresh image drawn from ``rng``.

    Raises ``NoContour`` or ``DegenerateProjection``.
    """
    batch = simulate_batch(phantom, camera, T_current.rotation[None], T_current.translation[None], T_gt, cfg,
                           draw_field(phantom, rng), level_scale)
    return batch.item(0)


# --- start poses -----------------------------------------------------------------

@dataclass
class StartPoseSpec:
    count: int = 600
    mtre_range: tuple[float, float] = (0.0, 30.0)
    bin_width: float = 1.0
    seed: int = 0

    @property
    def n_bins(self) -> int:
        lo, hi = self.mtre_range
        return int(round((hi - lo) / self.bin_width))

    def validate(self) -> list[str]:
        out = []
        lo, hi = self.mtre_range
        if not (0 <= lo < hi):
            out.append("mtre_range: must satisfy 0 <= lo < hi")
        elif self.bin_width <= 0 or abs(self.n_bins * self.bin_width - (hi - lo)) > 1e-9:
            out.append("bin_width: must divide the mTRE range")
        elif self.count % self.n_bins:
            out.append("count: must be divisible by the number of bins")
        return out


def offset_pose(T_gt: RigidTransform, center: Array, omega: Array, nu: Array) -> RigidTransform:
    """Rotate by ``omega`` about ``center`` (camera frame) and translate by ``nu``, after ``T_gt``."""
    R = rodrigues(omega)
    delta = RigidTransform(R, center - R @ center + nu)
    return compose(delta, T_gt)


def gen_start_poses(spec: StartPoseSpec, camera: PinholeCamera, targets: Array, T_gt: RigidTransform,
                    rng: np.random.Generator | None = None, max_retries: int = 1000) -> list[RigidTransform]:
    """Start poses with mTRE spread uniformly, ``count / n_bins`` per bin.

    Each pose draws a random rotation axis and translation direction and
    scales the offset by bisection until the mTRE hits a value drawn
    uniformly inside its bin.
    """
    problems = spec.validate()
    if problems:
        raise BadParams("; ".join(problems))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    center = T_gt.apply(targets).mean(axis=0)
    radius = float(np.sqrt(np.mean(np.sum((T_gt.apply(targets) - center) ** 2, axis=1)))) or 1.0
    lo0 = spec.mtre_range[0]
    per_bin = spec.count // spec.n_bins
    poses = []
    for k in range(spec.n_bins):
        lo, hi = lo0 + k * spec.bin_width, lo0 + (k + 1) * spec.bin_width
        for _ in range(per_bin):
            for _attempt in range(max_retries):
                goal = rng.uniform(lo, hi)
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                tdir = rng.normal(size=3)
                tdir /= np.linalg.norm(tdir)
                omega = axis * rng.uniform(0.0, 1.0) / radius
                nu = tdir * rng.uniform(0.0, 1.0)
                pose = _scale_to_mtre(T_gt, center, omega, nu, targets, goal)
                if pose is not None:
                    err = mtre(pose, T_gt, targets)
                    if lo <= err < hi and err > 0 and _in_front(camera, pose, targets):
                        poses.append(pose)
                        break
            else:
                raise SamplingFailed(f"could not sample a start pose in bin [{lo}, {hi})")
    return poses


def _in_front(camera, pose, targets) -> bool:
    return bool(np.all(camera.local(pose.apply(targets))[:, 2] > 1.0))


def _scale_to_mtre(T_gt, center, omega, nu, targets, goal, max_angle=0.9 * math.pi):
    wn = float(np.linalg.norm(omega))
    t_max = max_angle / wn if wn > 0 else 1e6

    def f(t):
        return mtre(offset_pose(T_gt, center, t * omega, t * nu), T_gt, targets)

    hi = 1.0
    while f(hi) < goal:
        hi *= 2.0
        if hi > t_max:
            hi = t_max
            if f(hi) < goal:
                return None
            break
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) < goal:
            lo = mid
        else:
            hi = mid
    return offset_pose(T_gt, center, lo * omega, lo * nu)


# --- cases -----------------------------------------------------------------------

@dataclass(eq=False)
class CaseRecord:
    """One registration scene: phantom recipe, camera, ground truth, targets and start poses."""

    case_id: str
    phantom_kind: str
    phantom_params: dict
    phantom_seed: int
    camera: PinholeCamera
    T_gt: RigidTransform
    targets: Array
    starts: list[RigidTransform] = field(default_factory=list)
    index: int = 0
    _phantom: Phantom | None = field(default=None, repr=False)

    @property
    def phantom(self) -> Phantom:
        if self._phantom is None:
            self._phantom = make_phantom(self.phantom_kind, self.phantom_params, self.phantom_seed)
        return self._phantom

    @property
    def corners(self) -> Array:
        return self.phantom.corners

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "index": self.index,
            "phantom": {"kind": self.phantom_kind, "params": self.phantom_params, "seed": self.phantom_seed},
            "camera": self.camera.to_dict(),
            "T_gt": self.T_gt.to_list(),
            "targets": self.targets.tolist(),
            "starts": [s.to_list() for s in self.starts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CaseRecord:
        ph = d["phantom"]
        return cls(
            d["case_id"], ph["kind"], ph["params"], int(ph["seed"]),
            PinholeCamera.from_dict(d["camera"]),
            RigidTransform.from_matrix(d["T_gt"]),
            np.asarray(d["targets"], dtype=np.float64),
            [RigidTransform.from_matrix(s) for s in d.get("starts", [])],
            int(d.get("index", 0)),
        )


def make_case(index: int, root_seed: int, kind: str = "vertebra", params: dict | None = None,
              camera: PinholeCamera | None = None, n_targets: int = 32) -> CaseRecord:
    """A randomised scene: AP or lateral view, jittered pose and phantom size."""
    rng = derive_rng(root_seed, STREAM_SCENE, index)
    camera = camera or PinholeCamera()
    p = dict(params or {})
    if kind in ("vertebra", "blocky"):
        p.setdefault("body_radius", float(rng.uniform(13.0, 19.0)))
        p.setdefault("body_height", float(rng.uniform(18.0, 26.0)))
        p.setdefault("replicas", [-1, 1])
        p.setdefault("replica_spacing", float(p["body_height"] + rng.uniform(6.0, 10.0)))
    else:
        rng.uniform(size=3)
    lateral = index % 2 == 1
    base = rodrigues([0.0, math.pi / 2, 0.0]) if lateral else np.eye(3)
    jitter = rodrigues(rng.normal(scale=math.radians(6.0), size=3))
    center = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(700, 800)])
    T_gt = RigidTransform(jitter @ base, center)
    phantom_seed = int(derive_seed(root_seed, STREAM_PHANTOM, index).generate_state(1)[0])
    case = CaseRecord(f"case{index:03d}", kind, p, phantom_seed, camera, T_gt, np.zeros((0, 3)), [], index)
    lo, hi = case.phantom.voi
    case.targets = rng.uniform(lo, hi, size=(n_targets, 3))
    return case


def gen_scenes(n_cases: int, root_seed: int, kind: str = "vertebra", params: dict | None = None,
               first_index: int = 0) -> list[CaseRecord]:
    return [make_case(first_index + i, root_seed, kind, params) for i in range(n_cases)]


def add_start_poses(cases: list[CaseRecord], spec: StartPoseSpec, root_seed: int) -> None:
    for case in cases:
        rng = derive_rng(root_seed, STREAM_STARTS, case.index, spec.seed)
        case.starts = gen_start_poses(spec, case.camera, case.targets, case.T_gt, rng)


def save_cases(cases: list[CaseRecord], path, root_seed: int, sim: CorrSimConfig | None = None) -> None:
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "root_seed": root_seed,
        "sim": (sim or CorrSimConfig()).to_dict(),
        "cases": [c.to_dict() for c in cases],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_cases(path) -> tuple[list[CaseRecord], int, CorrSimConfig]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SCENE_FORMAT:
        raise BadParams(f"{path}: not a scene file")
    if doc.get("version") != SCENE_VERSION:
        raise BadParams(f"{path}: unsupported scene version {doc.get('version')}")
    return [CaseRecord.from_dict(c) for c in doc["cases"]], int(doc["root_seed"]), CorrSimConfig.from_dict(doc["sim"])
