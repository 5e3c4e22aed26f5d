"""Training objective: one PPC registration step scored by projection error.

The objective maps network parameters to the projection error after a
single weighted motion estimate:

    s = M(features)                       network weights
    dv = (A_s^T A_s + N lam I)^-1 A_s^T b_s    closed-form solve
    T = dT(dv) . T_hat                    Rodrigues update about the centroid
    e = mean_j |P_T(q_j) - P_Tgt(q_j)|     projection error

and its gradient is propagated by hand through each stage.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import DivergedTraining, EmptySet
from .geometry import Array, PinholeCamera, RigidTransform, project, rodrigues, rodrigues_derivatives
from .ppc import CorrespondenceSet, build_system, normal_equations, update_pose
from .weightnet import NetworkParams, WeightModel, _forward, backward, compute_features, init_params

log = logging.getLogger(__name__)


@dataclass(eq=False)
class TrainingSample:
    """Correspondences precomputed at ``T_hat`` plus the data needed to score a step."""

    corr: CorrespondenceSet
    camera: PinholeCamera
    T_hat: RigidTransform
    T_gt: RigidTransform
    targets: Array
    level: int = 0
    case_id: str = ""


@dataclass
class TrainConfig:
    lam: float = 0.01
    points_per_sample: int = 1024
    batch_size: int = 8
    epochs: int = 30
    steps_per_epoch: int | None = None
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment_translate: bool = True
    augment_rotate: bool = True
    augment_hflip: bool = True
    translate_range: float = 20.0
    train_global_factor: bool = True


def _target_grad(camera: PinholeCamera, X: Array, g_proj: Array) -> Array:
    """Gradient of a loss w.r.t. camera-frame points given its gradient w.r.t. their projections."""
    loc = camera.local(X)
    inv = 1.0 / loc[:, 2]
    f = camera.focal_length
    g_loc = np.empty_like(loc)
    g_loc[:, 0] = f * g_proj[:, 0] * inv
    g_loc[:, 1] = f * g_proj[:, 1] * inv
    g_loc[:, 2] = -f * (g_proj[:, 0] * loc[:, 0] + g_proj[:, 1] * loc[:, 1]) * inv * inv
    return g_loc @ camera.basis


def step_error(sample: TrainingSample, s: Array, lam: float, want_grad: bool = False):
    """Projection error after one weighted solve; optionally also ``d e / d s``."""
    cs = sample.corr
    sys = build_system(cs)
    H, g = normal_equations(sys, s, lam)
    fac = scipy.linalg.cho_factor(H)
    x = scipy.linalg.cho_solve(fac, g)
    omega, nu = x[:3], x[3:]
    c = sys.centroid
    R = rodrigues(omega)
    y = sample.T_hat.apply(sample.targets) - c
    X = y @ R.T + c + nu
    u = sample.camera.project_points(X) - project(sample.camera, sample.T_gt, sample.targets)
    norms = np.linalg.norm(u, axis=1)
    e = float(norms.mean())
    if not want_grad:
        return e
    m = len(norms)
    # subgradient 0 for coincident projections
    safe = np.where(norms > 0, norms, 1.0)
    g_u = np.where(norms[:, None] > 0, u / safe[:, None], 0.0) / m
    g_X = _target_grad(sample.camera, X, g_u)
    g_nu = g_X.sum(axis=0)
    g_R = g_X.T @ y
    g_omega = np.einsum("kab,ab->k", rodrigues_derivatives(omega), g_R)
    g_x = np.concatenate([g_omega, g_nu])
    # adjoint of x = H^-1 g with H = A_s^T A_s + N lam I, g = A_s^T b_s
    g_g = scipy.linalg.cho_solve(fac, g_x)
    a_gg = sys.A @ g_g
    g_s = 2.0 * np.asarray(s) * a_gg * (sys.b - sys.A @ x)
    return e, g_s


def objective(params: NetworkParams, sample: TrainingSample, lam: float = 0.01, feature_scale: float = 1.0) -> float:
    s = _forward(params, compute_features(sample.corr, feature_scale))["s"]
    return step_error(sample, s, lam)


def objective_and_grad(
    params: NetworkParams,
    sample: TrainingSample,
    lam: float = 0.01,
    feature_scale: float = 1.0,
    train_global_factor: bool = True,
) -> tuple[float, NetworkParams]:
    feats = compute_features(sample.corr, feature_scale)
    cache = _forward(params, feats)
    e, g_s = step_error(sample, cache["s"], lam, want_grad=True)
    grads, _ = backward(params, feats, g_s, cache)
    if not train_global_factor:
        grads.rho = 0.0
    return e, grads


def grad_objective(params, sample, lam=0.01, feature_scale=1.0, train_global_factor=True) -> NetworkParams:
    return objective_and_grad(params, sample, lam, feature_scale, train_global_factor)[1]


# --- augmentation -------------------------------------------------------------

def _transform_sample(sample: TrainingSample, G: Array, t: Array, V: Array | None = None) -> TrainingSample:
    """Apply ``x -> G x + t`` to camera-frame content; ``V`` reflects the volume frame too."""
    cs = sample.corr
    corr = CorrespondenceSet(cs.w @ G.T + t, cs.p @ G.T + t, cs.n @ G.T, cs.d.copy(), cs.ngc.copy(), cs.inlier, cs.index)

    def move(T):
        rot = G @ T.rotation
        tr = G @ T.translation + t
        if V is not None:
            rot = rot @ V
        return RigidTransform(rot, tr)

    targets = sample.targets if V is None else sample.targets @ V.T
    return replace(sample, corr=corr, T_hat=move(sample.T_hat), T_gt=move(sample.T_gt), targets=targets)


def translate_inplane(sample: TrainingSample, t2) -> TrainingSample:
    """Shift the scene parallel to the detector by ``t2`` (mm)."""
    t = sample.camera.in_plane(np.asarray(t2, dtype=np.float64))
    return _transform_sample(sample, np.eye(3), t)


def rotate_inplane(sample: TrainingSample, phi: float) -> TrainingSample:
    """Rotate the scene about the principal axis through the source."""
    cam = sample.camera
    E = cam.basis
    c, s = math.cos(phi), math.sin(phi)
    local = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    G = E.T @ local @ E
    return _transform_sample(sample, G, cam.source - G @ cam.source)


def hflip(sample: TrainingSample) -> TrainingSample:
    """Mirror across the plane spanned by the image vertical axis and the principal direction."""
    cam = sample.camera
    u = cam.basis[0]
    G = np.eye(3) - 2.0 * np.outer(u, u)
    return _transform_sample(sample, G, cam.source - G @ cam.source, V=np.diag([-1.0, 1.0, 1.0]))


def augment(sample: TrainingSample, op: str, value=None) -> TrainingSample:
    if op == "translate":
        return translate_inplane(sample, value)
    if op == "rotate_inplane":
        return rotate_inplane(sample, value)
    if op == "hflip":
        return hflip(sample)
    raise ValueError(f"unknown augmentation {op!r}")


def random_augment(sample: TrainingSample, rng: np.random.Generator, cfg: TrainConfig) -> TrainingSample:
    # draws are made unconditionally so toggles do not shift the random stream
    phi = rng.uniform(-math.pi, math.pi)
    t2 = rng.uniform(-cfg.translate_range, cfg.translate_range, size=2)
    flip = rng.random() < 0.5
    if cfg.augment_rotate:
        sample = rotate_inplane(sample, phi)
    if cfg.augment_translate:
        sample = translate_inplane(sample, t2)
    if cfg.augment_hflip and flip:
        sample = hflip(sample)
    return sample


# --- training -----------------------------------------------------------------

def feature_scale_for(samples: list[TrainingSample]) -> float:
    """RMS distance of surface points from their set centroid."""
    acc = [np.mean(np.sum((s.corr.w - s.corr.centroid) ** 2, axis=1)) for s in samples]
    return float(np.sqrt(np.mean(acc)))


def _subsample(sample: TrainingSample, k: int, rng: np.random.Generator) -> TrainingSample:
    n = len(sample.corr)
    if n <= k:
        return sample
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return replace(sample, corr=sample.corr.subset(idx))


def split_by_case(samples: list[TrainingSample], fraction: float) -> tuple[list, list]:
    """Hold out the last ``round(fraction * n_cases)`` cases whole; returns ``(train, validation)``."""
    ids = sorted({s.case_id for s in samples})
    n_val = int(round(len(ids) * fraction))
    held = set(ids[len(ids) - n_val:]) if n_val else set()
    return [s for s in samples if s.case_id not in held], [s for s in samples if s.case_id in held]


def mean_loss(params, samples, lam, feature_scale) -> float:
    return float(np.mean([objective(params, s, lam, feature_scale) for s in samples]))


def train_level(
    cfg: TrainConfig,
    samples: list[TrainingSample],
    validation: list[TrainingSample] | None = None,
    level: int = 0,
    log_rows: list | None = None,
    init: NetworkParams | None = None,
) -> WeightModel:
    """Adam on the mean one-step projection error for one resolution level."""
    if not samples:
        raise EmptySet(f"no training samples for level {level}")
    seq = np.random.SeedSequence(cfg.seed, spawn_key=(level,))
    init_seed, data_seed = (int(x.generate_state(1)[0]) for x in seq.spawn(2))
    rng = np.random.default_rng(data_seed)
    params = init if init is not None else init_params(init_seed)
    scale = feature_scale_for(samples)
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    n_batches = cfg.steps_per_epoch or max(1, math.ceil(len(samples) / cfg.batch_size))
    best = (math.inf, theta.copy(), -1)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for b in range(n_batches):
            pick = [order[(b * cfg.batch_size + j) % len(order)] for j in range(cfg.batch_size)]
            params = params.with_flat(theta)
            loss, grad = 0.0, np.zeros_like(theta)
            for i in pick:
                smp = random_augment(_subsample(samples[i], cfg.points_per_sample, rng), rng, cfg)
                e, g = objective_and_grad(params, smp, cfg.lam, scale, cfg.train_global_factor)
                loss += e
                grad += g.flat()
            loss /= len(pick)
            grad /= len(pick)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergedTraining(f"non-finite loss at level {level}, step {step}")
            step += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            mhat = m / (1 - cfg.beta1 ** step)
            vhat = v / (1 - cfg.beta2 ** step)
            theta = theta - cfg.step_size * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            if log_rows is not None:
                log_rows.append({"step": step, "level": level, "loss": loss, "grad_norm": float(np.linalg.norm(grad)), "seed": cfg.seed})
        params = params.with_flat(theta)
        if validation:
            val = mean_loss(params, validation, cfg.lam, scale)
        else:
            val = loss
        log.info("level %d epoch %d validation loss %.4f", level, epoch, val)
        if not math.isfinite(val):
            raise DivergedTraining(f"non-finite validation loss at level {level}")
        if val < best[0]:
            best = (val, theta.copy(), epoch)
    final = params.with_flat(best[1])
    return WeightModel(final, scale, level, cfg.seed, {"best_epoch": best[2], "best_validation_loss": best[0], "lam": cfg.lam})


def train(
    cfg: TrainConfig,
    corpus: dict[int, list[TrainingSample]],
    validation: dict[int, list[TrainingSample]] | None = None,
    log_rows: list | None = None,
) -> dict[int, WeightModel]:
    """Train one model per resolution level."""
    return {
        level: train_level(cfg, samples, (validation or {}).get(level), level, log_rows)
        for level, samples in sorted(corpus.items())
    }


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["step", "level", "loss", "grad_norm", "seed"], lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({**r, "loss": repr(r["loss"]), "grad_norm": repr(r["grad_norm"])})


def manual_step(sample: TrainingSample, s: Array, lam: float) -> RigidTransform:
    """Pose after one weighted solve, composed from the public building blocks."""
    from .ppc import solve_weighted

    sys = build_system(sample.corr)
    return update_pose(sample.T_hat, solve_weighted(sys, s, lam), sys.centroid)


# --- corpus files -----------------------------------------------------------------

CORPUS_FORMAT = "ppclearn-corpus"
CORPUS_VERSION = 1


def save_samples(samples: list[TrainingSample], path) -> None:
    """Write precomputed samples to one ``.npz`` file (no pickled objects)."""
    if not samples:
        raise EmptySet("no samples to save")
    cs = [s.corr for s in samples]
    counts = np.array([len(c) for c in cs])
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "cameras": [s.camera.to_dict() for s in samples],
        "case_ids": [s.case_id for s in samples],
        "levels": [s.level for s in samples],
    }
    np.savez(
        path,
        header=np.array(json.dumps(header)),
        counts=counts,
        w=np.concatenate([c.w for c in cs]),
        p=np.concatenate([c.p for c in cs]),
        n=np.concatenate([c.n for c in cs]),
        d=np.concatenate([c.d for c in cs]),
        ngc=np.concatenate([c.ngc for c in cs]),
        inlier=np.concatenate([c.inlier if c.inlier is not None else np.zeros(len(c), bool) for c in cs]),
        index=np.concatenate([c.index if c.index is not None else -np.ones(len(c), int) for c in cs]),
        T_hat=np.stack([s.T_hat.matrix for s in samples]),
        T_gt=np.stack([s.T_gt.matrix for s in samples]),
        targets=np.stack([s.targets for s in samples]),
    )


def load_samples(path) -> list[TrainingSample]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CORPUS_FORMAT or header.get("version") != CORPUS_VERSION:
            raise ValueError(f"{path}: not a corpus file of version {CORPUS_VERSION}")
        arrays = {k: z[k] for k in z.files}
    bounds = np.concatenate([[0], np.cumsum(arrays["counts"])])
    out = []
    for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        cs = CorrespondenceSet(*(arrays[f][lo:hi] for f in ("w", "p", "n", "d", "ngc", "inlier", "index")))
        out.append(TrainingSample(cs, PinholeCamera.from_dict(header["cameras"][k]),
                                  RigidTransform.from_matrix(arrays["T_hat"][k]),
                                  RigidTransform.from_matrix(arrays["T_gt"][k]), arrays["targets"][k],
                                  int(header["levels"][k]), header["case_ids"][k]))
    return out
