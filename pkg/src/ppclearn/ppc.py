"""Point-to-plane correspondence (PPC) systems and their solvers.

Every correspondence contributes one linear equation in the differential
motion ``dv = (omega, nu)``, expressed in the camera frame shifted to the
centroid ``c`` of the surface points.  Row ``i`` is ``((w_i - c) x n_i, n_i)``
and the right-hand side is the signed distance ``d_i = n_i . (x - w_i)`` for
any point ``x`` on the plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import EmptySet, SingularSystem
from .geometry import Array, RigidTransform, compose, delta_transform

COND_LIMIT = 1e12
MCCR_MAD_SCALE = 1.4826


@dataclass(eq=False)
class CorrespondenceSet:
    """Columnar storage of N correspondences.

    ``inlier`` and ``index`` are diagnostics only (ground-truth labels and
    the phantom point each row came from); they are never model inputs.
    """

    w: Array
    p: Array
    n: Array
    d: Array
    ngc: Array
    inlier: Array | None = None
    index: Array | None = None

    def __post_init__(self):
        if len(self.w) == 0:
            raise EmptySet("correspondence set is empty")

    def __len__(self) -> int:
        return len(self.w)

    @property
    def centroid(self) -> Array:
        return self.w.mean(axis=0)

    def subset(self, idx) -> CorrespondenceSet:
        return CorrespondenceSet(
            self.w[idx], self.p[idx], self.n[idx], self.d[idx], self.ngc[idx],
            None if self.inlier is None else self.inlier[idx],
            None if self.index is None else self.index[idx],
        )


@dataclass(eq=False)
class PpcSystem:
    """Linear system ``A dv = b`` in the centroid-shifted frame.

    ``basis`` is ``None`` for the full 6-DoF system.  A restricted system
    keeps the full ``A`` but is solved for ``x`` in ``dv = basis @ x``,
    i.e. with the matrix ``A @ basis`` whose columns span the free motions.
    """

    A: Array
    b: Array
    centroid: Array
    basis: Array | None = None

    def __len__(self) -> int:
        return len(self.b)

    @property
    def reduced(self) -> Array:
        return self.A if self.basis is None else self.A @ self.basis

    def embed(self, x: Array) -> Array:
        return x if self.basis is None else self.basis @ x


def build_system(cs: CorrespondenceSet) -> PpcSystem:
    if len(cs) == 0:
        raise EmptySet("cannot build a system from zero correspondences")
    c = cs.centroid
    wt = cs.w - c
    A = np.hstack([np.cross(wt, cs.n), cs.n])
    return PpcSystem(A, np.array(cs.d, dtype=np.float64), c)


def depth_basis(direction=(0.0, 0.0, 1.0)) -> Array:
    """6x5 basis of motions without translation along ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    if np.array_equal(d, [0.0, 0.0, 1.0]):
        q = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    else:
        q = scipy.linalg.null_space(d[None, :])
    basis = np.zeros((6, 5))
    basis[:3, :3] = np.eye(3)
    basis[3:, 3:] = q
    return basis


def restrict_depth(sys: PpcSystem, direction=(0.0, 0.0, 1.0)) -> PpcSystem:
    """Remove translation along ``direction`` from the unknowns."""
    return PpcSystem(sys.A, sys.b, sys.centroid, depth_basis(direction))


def normal_equations(sys: PpcSystem, s: Array, lam: float) -> tuple[Array, Array]:
    """``H = A_s^T A_s + N lam I`` and ``g = A_s^T b_s`` with ``A_s = diag(s) A``."""
    A = sys.reduced
    s2 = np.square(np.asarray(s, dtype=np.float64))
    As2 = A * s2[:, None]
    H = As2.T @ A
    H[np.diag_indices_from(H)] += len(sys) * lam
    return H, As2.T @ sys.b


def solve_weighted(sys: PpcSystem, s: Array, lam: float) -> Array:
    """Regularized weighted least squares; returns the 6-vector ``dv``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    H, g = normal_equations(sys, s, lam)
    if not np.all(np.isfinite(H)):
        raise SingularSystem("non-finite normal equations")
    if lam == 0:
        ev = np.linalg.eigvalsh(H)
        if not ev[0] > ev[-1] / COND_LIMIT:
            raise SingularSystem("normal equations are numerically singular")
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    x = scipy.linalg.solve_triangular(L.T, scipy.linalg.solve_triangular(L, g, lower=True, check_finite=False),
                                      lower=False, check_finite=False)
    return sys.embed(x)


def solve_mccr(sys: PpcSystem, s: Array, sigma: float | None = None, iters: int = 10, lam: float = 0.0) -> Array:
    """Maximum-correntropy estimate by Gaussian-kernel IRLS.

    With ``sigma=None`` the kernel width is refreshed each round as
    ``1.4826 * median(|r|)``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if sigma is not None and not sigma > 0:
        raise ValueError("sigma must be positive")
    s = np.asarray(s, dtype=np.float64)
    dv = solve_weighted(sys, s, lam)
    used = s > 0
    for _ in range(iters):
        r = sys.A @ dv - sys.b
        if sigma is not None:
            width = sigma
        else:
            width = MCCR_MAD_SCALE * float(np.median(np.abs(r[used] if used.any() else r)))
        if not width > 0:
            break
        k = np.exp(-(r * r) / (2.0 * width * width))
        try:
            dv = solve_weighted(sys, s * k, lam)
        except SingularSystem:
            # kernel collapsed onto too few rows; keep the last estimate
            break
    return dv


def camera_motion(dv: Array, centroid: Array) -> RigidTransform:
    """Conjugate a centroid-frame motion back to the camera frame."""
    delta = delta_transform(dv)
    c = np.asarray(centroid, dtype=np.float64)
    return RigidTransform(delta.rotation, c - delta.rotation @ c + delta.translation)


def update_pose(T_hat: RigidTransform, dv: Array, centroid: Array) -> RigidTransform:
    """Left-multiplicative pose update ``T = dT . T_hat``."""
    return compose(camera_motion(dv, centroid), T_hat)


# --- batched variants ------------------------------------------------------------
#
# The registration loop advances many start poses in lockstep.  These mirror
# the single-system functions above on zero-padded (B, M, ...) stacks; item b
# never depends on the other items.

def build_batch(w: Array, n: Array, d: Array, mask: Array) -> tuple[Array, Array, Array]:
    """Rows ``A`` (B, M, 6), right-hand sides ``b`` (B, M) and centroids (B, 3)."""
    cnt = np.maximum(mask.sum(axis=1), 1)
    c = (w * mask[..., None]).sum(axis=1) / cnt[:, None]
    wt = w - c[:, None, :]
    A = np.concatenate([np.cross(wt, n), n], axis=-1)
    A[~mask] = 0.0
    return A, np.where(mask, d, 0.0), c


def solve_weighted_batch(A: Array, b: Array, s: Array, lam: float, counts: Array) -> tuple[Array, Array]:
    """Batched ``solve_weighted``; returns ``(x, ok)`` with ``ok[i]`` False for singular items.

    ``A`` may already be restricted to a motion basis (last axis k <= 6).
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    s2 = np.square(s)
    As2 = A * s2[..., None]
    At = As2.transpose(0, 2, 1)
    H = np.matmul(At, A)
    k = H.shape[-1]
    H[:, np.arange(k), np.arange(k)] += (np.asarray(counts, dtype=np.float64) * lam)[:, None]
    g = np.matmul(At, b[..., None])[..., 0]
    ok = np.all(np.isfinite(H), axis=(1, 2))
    Hs = np.where(ok[:, None, None], H, np.eye(k))
    ev = np.linalg.eigvalsh(Hs)
    if lam == 0:
        ok &= ev[:, 0] > ev[:, -1] / COND_LIMIT
    else:
        ok &= ev[:, 0] > 0
    Hs = np.where(ok[:, None, None], Hs, np.eye(k))
    x = np.linalg.solve(Hs, np.where(ok[:, None], g, 0.0)[..., None])[..., 0]
    return x, ok


def _masked_median(v: Array, used: Array) -> Array:
    """Row-wise median of ``v`` over ``used`` entries (NaN for empty rows)."""
    filled = np.where(used, v, np.inf)
    srt = np.sort(filled, axis=1)
    cnt = used.sum(axis=1)
    lo = np.clip((cnt - 1) // 2, 0, None)
    hi = np.clip(cnt // 2, 0, None)
    rows = np.arange(len(v))
    med = 0.5 * (srt[rows, lo] + srt[rows, hi])
    return np.where(cnt > 0, med, np.nan)


def solve_mccr_batch(A: Array, b: Array, s: Array, mask: Array, lam: float = 0.0, iters: int = 10,
                     sigma: float | None = None) -> tuple[Array, Array]:
    """Batched ``solve_mccr``; items that hit a degenerate round keep their last estimate."""
    counts = mask.sum(axis=1)
    x, ok = solve_weighted_batch(A, b, s, lam, counts)
    live = ok.copy()
    used = (s > 0) & mask
    used = np.where(used.any(axis=1, keepdims=True), used, mask)
    for _ in range(iters):
        if not live.any():
            break
        r = np.matmul(A, x[..., None])[..., 0] - b
        width = np.full(len(x), float(sigma)) if sigma is not None else MCCR_MAD_SCALE * _masked_median(np.abs(r), used)
        live &= width > 0
        wsafe = np.where(live, width, 1.0)
        kern = np.exp(-(r * r) / (2.0 * wsafe[:, None] ** 2))
        x_new, ok_new = solve_weighted_batch(A, b, s * kern, lam, counts)
        live &= ok_new
        x = np.where(live[:, None], x_new, x)
    return x, ok
