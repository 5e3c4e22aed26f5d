"""Multi-resolution registration loop and the method variants.

Variants
--------
PPC      lam = 0, weights = NGC thresholded at 0.1, MCCR, no depth motion on the coarsest level
PPC-R    lam = 0.01, weights = 2.0 * PPC weights, least squares
PPC-RM   lam = 0.01, weights = 0.25 * PPC weights, least squares
PPC-L    lam = 0.01, weights from the per-level network, least squares
PPC-L+   PPC-L on all but the finest level, PPC there
PPC-RM+  PPC-RM on all but the finest level, PPC there
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffreg import TrainingSample
from .errors import DegenerateProjection, PpcError, UnknownVariant
from .geometry import (EPS_DEPTH, PIXEL_SIZE_MM, Array, RigidTransform, mrpd, mtre, project, projection_error,
                       rodrigues_batch)
from .ppc import (CorrespondenceSet, build_batch, build_system, depth_basis, restrict_depth, solve_mccr,
                  solve_mccr_batch, solve_weighted, solve_weighted_batch, update_pose)
from .simscene import (STATUS_OK, STREAM_CORPUS, STREAM_REGISTER, CaseRecord, CorrBatch, CorrSimConfig, derive_rng,
                       draw_field, simulate_batch)
from .weightnet import WeightModel

LEVEL_SCALES = (0.25, 0.5, 1.0)
NGC_THRESHOLD = 0.1
VARIANTS = ("PPC", "PPC-R", "PPC-RM", "PPC-L", "PPC-L+", "PPC-RM+")


@dataclass(frozen=True)
class LevelConfig:
    scale: float
    lam: float
    weight_source: str           # "ngc_threshold" | "scaled_ngc" | "network"
    weight_scale: float = 1.0
    solver: str = "LS"           # "LS" | "MCCR"
    depth_restricted: bool = False
    max_iterations: int = 15
    stop_rotation: float = 1e-3  # rad
    stop_translation: float = 0.05  # mm


@dataclass(frozen=True)
class VariantConfig:
    name: str
    levels: tuple[LevelConfig, ...]

    @property
    def uses_network(self) -> bool:
        return any(lv.weight_source == "network" for lv in self.levels)


def _ppc_level(scale: float, coarsest: bool) -> LevelConfig:
    return LevelConfig(scale, 0.0, "ngc_threshold", 1.0, "MCCR", depth_restricted=coarsest)


def variant_config(name: str, scales=LEVEL_SCALES) -> VariantConfig:
    if name not in VARIANTS:
        raise UnknownVariant(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")
    scales = tuple(scales)
    levels = []
    for i, sc in enumerate(scales):
        coarsest, finest = i == 0, i == len(scales) - 1
        base = name.rstrip("+")
        if name.endswith("+") and finest or base == "PPC":
            levels.append(_ppc_level(sc, coarsest))
        elif base == "PPC-R":
            levels.append(LevelConfig(sc, 0.01, "scaled_ngc", 2.0))
        elif base == "PPC-RM":
            levels.append(LevelConfig(sc, 0.01, "scaled_ngc", 0.25))
        else:
            levels.append(LevelConfig(sc, 0.01, "network"))
    return VariantConfig(name, tuple(levels))


def ngc_weights(ngc: Array, threshold: float = NGC_THRESHOLD) -> Array:
    ngc = np.asarray(ngc, dtype=np.float64)
    return np.where(ngc >= threshold, ngc, 0.0)


def level_weights(level: LevelConfig, cs: CorrespondenceSet, model: WeightModel | None) -> Array:
    if level.weight_source == "network":
        if model is None:
            raise ValueError("variant needs a network model for this level")
        return model.weights(cs)
    return level.weight_scale * ngc_weights(cs.ngc)


def estimate_motion(level: LevelConfig, cs: CorrespondenceSet, s: Array, camera, solver: str | None = None,
                    depth_restricted: bool | None = None) -> tuple[Array, Array]:
    """One motion estimate; returns ``(dv, centroid)``."""
    sys = build_system(cs)
    if level.depth_restricted if depth_restricted is None else depth_restricted:
        sys = restrict_depth(sys, camera.direction)
    if (solver or level.solver) == "MCCR":
        dv = solve_mccr(sys, s, lam=level.lam)
    else:
        dv = solve_weighted(sys, s, level.lam)
    return dv, sys.centroid


@dataclass
class IterationRecord:
    level: int
    dv: Array
    pe: float
    mrpd: float
    weight_mean: float
    weight_min: float
    weight_max: float
    n_corr: int


@dataclass
class RegistrationTrace:
    case_id: str
    start_index: int
    variant: str
    initial_mtre: float
    initial_mrpd: float
    iterations: list[IterationRecord] = field(default_factory=list)
    final_pose: RigidTransform | None = None
    final_mrpd: float = math.nan
    final_mtre: float = math.nan
    level_end_mrpd: list[float] = field(default_factory=list)
    level_iterations: list[int] = field(default_factory=list)
    status: str = "ok"

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


STATUS_NAMES = {0: "ok", 1: "lost", 2: "lost", 3: "singular", 4: "diverged"}
_SINGULAR, _DIVERGED = 3, 4
BATCH_SIZE = 16


def _project_many(camera, R: Array, t: Array, X: Array) -> tuple[Array, Array]:
    """Project volume points ``X`` (K, 3) under B poses; returns (B, K, 2) and a per-item validity flag."""
    loc = (np.matmul(X, R.transpose(0, 2, 1)) + t[:, None, :] - camera.source) @ camera.basis.T
    ok = np.all(loc[..., 2] > EPS_DEPTH, axis=1)
    z = np.where(loc[..., 2] > EPS_DEPTH, loc[..., 2], 1.0)
    return camera.focal_length * loc[..., :2] / z[..., None] + camera.principal_point, ok


def batch_metrics(camera, R: Array, t: Array, T_gt: RigidTransform, corners: Array, targets: Array):
    """Projection error on ``corners`` and mRPD on ``targets`` for B poses at once."""
    pc, ok1 = _project_many(camera, R, t, corners)
    pe = np.mean(np.linalg.norm(pc - project(camera, T_gt, corners), axis=-1), axis=1)
    pt, ok2 = _project_many(camera, R, t, targets)
    q = pt - camera.principal_point
    E = camera.basis
    dirs = q[..., :1] * E[0] + q[..., 1:2] * E[1] + camera.focal_length * E[2]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    rel = T_gt.apply(targets) - camera.source
    perp = rel - np.sum(rel * dirs, axis=-1, keepdims=True) * dirs
    rpd = np.mean(np.linalg.norm(perp, axis=-1), axis=1)
    ok = ok1 & ok2
    return np.where(ok, pe, np.inf), np.where(ok, rpd, np.inf), ok


def batch_weights(level: LevelConfig, batch: CorrBatch, model: WeightModel | None) -> Array:
    s = np.zeros(batch.mask.shape)
    if level.weight_source == "network":
        if model is None:
            raise ValueError("variant needs a network model for this level")
        for b in np.flatnonzero(batch.status == STATUS_OK):
            cs = batch.item(b)
            s[b, :len(cs)] = model.weights(cs)
        return s
    return np.where(batch.mask, level.weight_scale * ngc_weights(batch.ngc), 0.0)


def _orthonormalize(R: Array) -> Array:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    neg = np.linalg.det(out) < 0
    if neg.any():
        u[neg, :, -1] *= -1.0
        out[neg] = u[neg] @ vt[neg]
    return out


def register_starts(case: CaseRecord, start_indices, variant: VariantConfig, models: dict | None = None,
                    sim: CorrSimConfig | None = None, root_seed: int = 0,
                    batch_size: int = BATCH_SIZE) -> list[RegistrationTrace]:
    """Register several start poses of one case, advancing them in lockstep.

    Each (case, level) pair has one simulated image (``draw_field``) shared by
    all starts and variants, so identical poses always get identical matches
    and a start's result never depends on which other starts share its batch.
    """
    sim = sim or CorrSimConfig()
    models = models or {}
    starts = [int(i) for i in start_indices]
    cam, T_gt = case.camera, case.T_gt
    phantom, corners, targets = case.phantom, case.corners, case.targets
    R = np.stack([case.starts[i].rotation for i in starts]).reshape(-1, 3, 3)
    t = np.stack([case.starts[i].translation for i in starts]).reshape(-1, 3)
    traces = [
        RegistrationTrace(case.case_id, i, variant.name, mtre(case.starts[i], T_gt, targets),
                          mrpd(cam, case.starts[i], T_gt, targets))
        for i in starts
    ]
    status = np.zeros(len(starts), dtype=int)
    for li, level in enumerate(variant.levels):
        model = models.get(li)
        basis = depth_basis(cam.direction) if level.depth_restricted else None
        field = draw_field(phantom, derive_rng(root_seed, STREAM_REGISTER, case.index, li, sim.seed), cam, T_gt, sim,
                           level.scale)
        active = status == STATUS_OK
        done = np.zeros(len(starts), dtype=int)
        for it in range(level.max_iterations):
            ids = np.flatnonzero(active)
            for lo in range(0, len(ids), batch_size):
                chunk = ids[lo:lo + batch_size]
                batch = simulate_batch(phantom, cam, R[chunk], t[chunk], T_gt, sim, field, level.scale)
                s = batch_weights(level, batch, model)
                A, b, c = build_batch(batch.w, batch.n, batch.d, batch.mask)
                if basis is not None:
                    A = A @ basis
                if level.solver == "MCCR":
                    x, ok = solve_mccr_batch(A, b, s, batch.mask, level.lam)
                else:
                    x, ok = solve_weighted_batch(A, b, s, level.lam, batch.counts)
                dv = x if basis is None else x @ basis.T
                st = np.where(batch.status != STATUS_OK, batch.status, np.where(ok, STATUS_OK, _SINGULAR))
                good = st == STATUS_OK
                st[good & ~np.all(np.isfinite(dv), axis=1)] = _DIVERGED
                good = st == STATUS_OK
                Rd = rodrigues_batch(np.where(good[:, None], dv[:, :3], 0.0))
                Rn = _orthonormalize(Rd @ R[chunk])
                tn = (np.matmul(Rd, (t[chunk] - c)[..., None])[..., 0] + c + dv[:, 3:])
                fin = np.all(np.isfinite(Rn), axis=(1, 2)) & np.all(np.isfinite(tn), axis=1)
                st[good & ~fin] = _DIVERGED
                good = st == STATUS_OK
                R[chunk[good]] = Rn[good]
                t[chunk[good]] = tn[good]
                pe, rpd, _ = batch_metrics(cam, Rn, tn, T_gt, corners, targets)
                for k, j in enumerate(chunk):
                    if not good[k]:
                        status[j] = st[k]
                        active[j] = False
                        continue
                    n = int(batch.mask[k].sum())
                    sk = s[k, :n]
                    traces[j].iterations.append(IterationRecord(
                        li, dv[k], float(pe[k]), float(rpd[k]), float(sk.mean()), float(sk.min()), float(sk.max()), n))
                    done[j] += 1
                    if np.linalg.norm(dv[k, :3]) < level.stop_rotation and np.linalg.norm(dv[k, 3:]) < level.stop_translation:
                        active[j] = False
        for j, tr in enumerate(traces):
            if status[j] == STATUS_OK:
                tr.level_iterations.append(int(done[j]))
                tr.level_end_mrpd.append(_safe_mrpd(cam, RigidTransform(R[j], t[j]), T_gt, targets))
    for j, tr in enumerate(traces):
        tr.status = STATUS_NAMES[int(status[j])]
        tr.final_pose = RigidTransform(R[j], t[j])
        if tr.status == "ok":
            tr.final_mrpd = _safe_mrpd(cam, tr.final_pose, T_gt, targets)
            tr.final_mtre = mtre(tr.final_pose, T_gt, targets)
        else:
            tr.final_mrpd = math.inf
            tr.final_mtre = math.inf
    return traces


def _safe_mrpd(cam, T, T_gt, targets) -> float:
    try:
        return mrpd(cam, T, T_gt, targets)
    except DegenerateProjection:
        return math.inf


def register_case(case: CaseRecord, start_index: int, variant: VariantConfig, models: dict | None = None,
                  sim: CorrSimConfig | None = None, root_seed: int = 0) -> RegistrationTrace:
    """Register a single start pose; see ``register_starts``."""
    return register_starts(case, [start_index], variant, models, sim, root_seed)[0]


def _run_case(args):
    case, starts, variant, models, sim, root_seed = args
    return register_starts(case, starts, variant, models, sim, root_seed)


def run_cases(cases: list[CaseRecord], variant: VariantConfig, models: dict | None = None,
              sim: CorrSimConfig | None = None, root_seed: int = 0, jobs: int = 1,
              starts: list[int] | None = None) -> list[RegistrationTrace]:
    """Register every (case, start) pair; output order never depends on ``jobs``."""
    tasks = [
        (case, list(starts) if starts is not None else list(range(len(case.starts))), variant, models, sim, root_seed)
        for case in cases
    ]
    if jobs <= 1:
        out = [_run_case(t) for t in tasks]
    else:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(jobs) as pool:
            out = pool.map(_run_case, tasks, chunksize=1)
    return [tr for part in out for tr in part]


# --- single-iteration experiment and training corpus -------------------------------

def make_samples(cases: list[CaseRecord], sim: CorrSimConfig, level: int, scale: float, root_seed: int,
                 starts: list[int] | None = None) -> list[TrainingSample]:
    """Precompute correspondences at each start pose for one resolution level.

    Start poses whose contour is empty or degenerate are skipped.
    """
    out = []
    for case in cases:
        idx = list(starts) if starts is not None else list(range(len(case.starts)))
        field = draw_field(case.phantom, derive_rng(root_seed, STREAM_CORPUS, case.index, level, sim.seed),
                           case.camera, case.T_gt, sim, scale)
        for lo in range(0, len(idx), BATCH_SIZE):
            chunk = idx[lo:lo + BATCH_SIZE]
            R = np.stack([case.starts[i].rotation for i in chunk])
            t = np.stack([case.starts[i].translation for i in chunk])
            batch = simulate_batch(case.phantom, case.camera, R, t, case.T_gt, sim, field, scale)
            for k, i in enumerate(chunk):
                if batch.status[k] == STATUS_OK:
                    out.append(TrainingSample(batch.item(k), case.camera, case.starts[i], case.T_gt, case.corners,
                                              level, case.case_id))
    return out


def single_iteration_experiment(samples: list[TrainingSample], variant: VariantConfig,
                                models: dict | None = None, points: int = 1024, seed: int = 0) -> list[tuple[float, float]]:
    """One coarsest-level least-squares step per sample; PE pairs in pixels."""
    level = variant.levels[0]
    model = (models or {}).get(0)
    rng = np.random.default_rng(seed)
    out = []
    for smp in samples:
        cs = smp.corr
        if len(cs) > points:
            cs = cs.subset(np.sort(rng.choice(len(cs), size=points, replace=False)))
        before = projection_error(smp.camera, smp.T_hat, smp.T_gt, smp.targets)
        s = level_weights(level, cs, model)
        try:
            dv, c = estimate_motion(level, cs, s, smp.camera, solver="LS")
            after = projection_error(smp.camera, update_pose(smp.T_hat, dv, c), smp.T_gt, smp.targets)
        except PpcError:
            after = math.inf
        out.append((before / PIXEL_SIZE_MM, after / PIXEL_SIZE_MM))
    return out


# --- result streams ----------------------------------------------------------------

RESULT_FIELDS = ["case_id", "start_index", "variant", "initial_mtre", "initial_mrpd", "final_mrpd", "final_mtre",
                 "iterations", "coarse_iterations", "coarse_mrpd", "status"]


def trace_row(t: RegistrationTrace) -> dict:
    return {
        "case_id": t.case_id,
        "start_index": t.start_index,
        "variant": t.variant,
        "initial_mtre": t.initial_mtre,
        "initial_mrpd": t.initial_mrpd,
        "final_mrpd": t.final_mrpd,
        "final_mtre": t.final_mtre,
        "iterations": t.n_iterations,
        "coarse_iterations": t.level_iterations[0] if t.level_iterations else 0,
        "coarse_mrpd": t.level_end_mrpd[0] if t.level_end_mrpd else math.inf,
        "status": t.status,
    }


def write_results_csv(traces, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        wr.writeheader()
        for t in traces:
            row = trace_row(t)
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_results_json(traces, path) -> None:
    rows = [trace_row(t) for t in traces]
    for r in rows:
        for k, v in r.items():
            if isinstance(v, float) and not math.isfinite(v):
                r[k] = None
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")
