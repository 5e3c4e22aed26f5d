"""PointNet-style correspondence weighting network in plain numpy.

Architecture: a per-point MLP (8-64-128), feature-wise max pooling to a
global descriptor, concatenation with the local descriptor (256), a second
per-point MLP (256-64-1), the rescaled softsign and a global positive factor
``exp(rho)``.  Hidden layers use ReLU; there is no normalization layer.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySet, ModelFormatError
from .geometry import Array
from .ppc import CorrespondenceSet

MLP1_SIZES = (8, 64, 128)
MLP2_SIZES = (256, 64, 1)
MODEL_FORMAT = "ppclearn-weightnet"
MODEL_VERSION = 1


def modified_softsign(x):
    """Softsign remapped from (-1, 1) to (0, 1)."""
    return (x / (1.0 + np.abs(x)) + 1.0) * 0.5


@dataclass(eq=False)
class MlpParams:
    weights: list[Array]
    biases: list[Array]


@dataclass(eq=False)
class NetworkParams:
    mlp1: MlpParams
    mlp2: MlpParams
    rho: float = 0.0

    @property
    def global_factor(self) -> float:
        return float(np.exp(self.rho))

    def named_arrays(self) -> dict[str, Array]:
        out = {}
        for name, mlp in (("mlp1", self.mlp1), ("mlp2", self.mlp2)):
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}.{i}.weight"] = w
                out[f"{name}.{i}.bias"] = b
        return out

    def flat(self) -> Array:
        parts = [a.ravel() for a in self.named_arrays().values()]
        return np.concatenate(parts + [np.array([self.rho])])

    def with_flat(self, vec: Array) -> NetworkParams:
        """New params with the same shapes, filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        mlps = []
        for mlp in (self.mlp1, self.mlp2):
            ws, bs = [], []
            for w, b in zip(mlp.weights, mlp.biases):
                ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
                pos += w.size
                bs.append(vec[pos:pos + b.size].reshape(b.shape).copy())
                pos += b.size
            mlps.append(MlpParams(ws, bs))
        if pos + 1 != vec.size:
            raise ValueError("flat vector has the wrong length")
        return NetworkParams(mlps[0], mlps[1], float(vec[pos]))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.named_arrays().values()) + 1


def init_params(seed: int) -> NetworkParams:
    """He-normal weights, zero biases, unit global factor."""
    rng = np.random.default_rng(seed)

    def mlp(sizes):
        ws = [rng.normal(0.0, np.sqrt(2.0 / m), size=(m, k)) for m, k in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(k) for k in sizes[1:]]
        return MlpParams(ws, bs)

    return NetworkParams(mlp(MLP1_SIZES), mlp(MLP2_SIZES), 0.0)


def forward(params: NetworkParams, feats: Array) -> Array:
    """Weights for an (N, 8) feature array; same arithmetic as the training pass, without its cache."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptySet("network input must be a non-empty (N, 8) array")
    (w0, w1), (b0, b1) = params.mlp1.weights, params.mlp1.biases
    (w2, w3), (b2, b3) = params.mlp2.weights, params.mlp2.biases
    k = w1.shape[1]
    h = feats @ w0
    h += b0
    np.maximum(h, 0.0, out=h)
    z = h @ w1
    z += b1
    np.maximum(z, 0.0, out=z)
    y = z @ w2[:k]
    y += z.max(axis=0) @ w2[k:] + b2
    np.maximum(y, 0.0, out=y)
    x = (y @ w3)[:, 0] + b3[0]
    return modified_softsign(x) * np.exp(params.rho)


def _forward(params: NetworkParams, feats: Array) -> dict:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise EmptySet("network input must be a non-empty (N, 8) array")
    (w0, w1), (b0, b1) = params.mlp1.weights, params.mlp1.biases
    (w2, w3), (b2, b3) = params.mlp2.weights, params.mlp2.biases
    k = w1.shape[1]
    z1 = feats @ w0 + b0
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ w1 + b1
    local = np.maximum(z2, 0.0)
    glob = local.max(axis=0)
    z3 = local @ w2[:k] + (glob @ w2[k:] + b2)
    h3 = np.maximum(z3, 0.0)
    x = (h3 @ w3)[:, 0] + b3[0]
    s = modified_softsign(x) * np.exp(params.rho)
    return dict(feats=feats, z1=z1, h1=h1, z2=z2, local=local, glob=glob, z3=z3, h3=h3, x=x, s=s)


def backward(params: NetworkParams, feats: Array, upstream: Array, cache: dict | None = None) -> tuple[NetworkParams, Array]:
    """Reverse-mode gradients of ``sum(upstream * forward(params, feats))``.

    Returns a ``NetworkParams`` holding the parameter gradients and the
    gradient with respect to the input features.  Max pooling routes the
    gradient to the first (lowest-index) maximising point.
    """
    c = cache if cache is not None else _forward(params, feats)
    g_s = np.asarray(upstream, dtype=np.float64)
    (w0, w1), (w2, w3) = params.mlp1.weights, params.mlp2.weights
    k = w1.shape[1]

    g_rho = float(g_s @ c["s"])
    g_x = g_s * np.exp(params.rho) * 0.5 / (1.0 + np.abs(c["x"])) ** 2
    g_w3 = c["h3"].T @ g_x[:, None]
    g_b3 = np.array([g_x.sum()])
    g_z3 = np.outer(g_x, w3[:, 0]) * (c["z3"] > 0)
    col = g_z3.sum(axis=0)
    g_w2 = np.vstack([c["local"].T @ g_z3, np.outer(c["glob"], col)])
    g_b2 = col
    g_local = g_z3 @ w2[:k].T
    arg = np.argmax(c["local"], axis=0)
    g_local[arg, np.arange(k)] += w2[k:] @ col
    g_z2 = g_local * (c["z2"] > 0)
    g_w1 = c["h1"].T @ g_z2
    g_b1 = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ w1.T) * (c["z1"] > 0)
    g_w0 = c["feats"].T @ g_z1
    g_b0 = g_z1.sum(axis=0)
    g_feats = g_z1 @ w0.T
    grads = NetworkParams(MlpParams([g_w0, g_w1], [g_b0, g_b1]), MlpParams([g_w2, g_w3], [g_b2, g_b3]), g_rho)
    return grads, g_feats


def compute_features(cs: CorrespondenceSet, scale: float) -> Array:
    """Per-correspondence features ``(w - c, n, d, ngc)`` with lengths divided by ``scale``."""
    wt = (cs.w - cs.centroid) / scale
    return np.hstack([wt, cs.n, (cs.d / scale)[:, None], np.asarray(cs.ngc)[:, None]])


@dataclass(eq=False)
class WeightModel:
    """Trained network for one resolution level plus its feature scaling."""

    params: NetworkParams
    feature_scale: float = 1.0
    level: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def weights(self, cs: CorrespondenceSet) -> Array:
        return forward(self.params, compute_features(cs, self.feature_scale))


def _encode(a: Array) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(rec: dict) -> Array:
    if rec.get("dtype") != "<f8":
        raise ModelFormatError(f"unsupported dtype {rec.get('dtype')!r}")
    raw = base64.b64decode(rec["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).astype(np.float64)


def model_to_dict(model: WeightModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": {"mlp1": list(MLP1_SIZES), "mlp2": list(MLP2_SIZES)},
        "level": model.level,
        "seed": model.seed,
        "feature_scale": float(model.feature_scale).hex(),
        "rho": float(model.params.rho).hex(),
        "arrays": {k: _encode(v) for k, v in model.params.named_arrays().items()},
        "meta": model.meta,
    }


def model_from_dict(d: dict) -> WeightModel:
    if d.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a weightnet model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')}")
    sizes = d["layer_sizes"]
    if tuple(sizes["mlp1"]) != MLP1_SIZES or tuple(sizes["mlp2"]) != MLP2_SIZES:
        raise ModelFormatError("layer sizes do not match this network")
    arrays = {k: _decode(v) for k, v in d["arrays"].items()}
    try:
        mlps = [
            MlpParams([arrays[f"{m}.{i}.weight"] for i in range(2)], [arrays[f"{m}.{i}.bias"] for i in range(2)])
            for m in ("mlp1", "mlp2")
        ]
    except KeyError as exc:
        raise ModelFormatError(f"missing array {exc}") from exc
    params = NetworkParams(mlps[0], mlps[1], float.fromhex(d["rho"]))
    return WeightModel(params, float.fromhex(d["feature_scale"]), int(d["level"]), int(d["seed"]), d.get("meta", {}))


def save_model(model: WeightModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path) -> WeightModel:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def load_models(directory) -> dict[int, WeightModel]:
    """Load ``level<k>.json`` files from a model directory."""
    models = {}
    for p in sorted(Path(directory).glob("level*.json")):
        m = load_model(p)
        models[m.level] = m
    return models
