"""Benchmark metrics: success rates, capture ranges, PE histograms, convergence summaries.

A registration succeeds when its final mRPD is at most 2 mm and succeeds
grossly at 10 mm.  The capture range is the largest ``m`` such that every
initial-mTRE bin in ``[0, m)`` reaches a 95 % success rate; an empty bin
counts as failing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput
from .geometry import Array

SUCCESS_MM = 2.0
GROSS_SUCCESS_MM = 10.0
CR_RATE = 0.95


@dataclass
class EvalRecord:
    case_id: str
    variant: str
    initial_mtre: float
    final_mrpd: float
    final_mtre: float = math.nan
    iterations: int = 0
    coarse_iterations: int = 0
    coarse_mrpd: float = math.inf
    start_index: int = 0
    status: str = "ok"
    success: bool = field(init=False)
    gross_success: bool = field(init=False)

    def __post_init__(self):
        # failed runs carry inf/NaN errors; NaN compares False so they never succeed
        self.success = bool(self.final_mrpd <= SUCCESS_MM)
        self.gross_success = bool(self.final_mrpd <= GROSS_SUCCESS_MM)

    @classmethod
    def from_trace(cls, t) -> EvalRecord:
        return cls(t.case_id, t.variant, t.initial_mtre, t.final_mrpd, t.final_mtre, t.n_iterations,
                   t.level_iterations[0] if t.level_iterations else 0,
                   t.level_end_mrpd[0] if t.level_end_mrpd else math.inf, t.start_index, t.status)

    @classmethod
    def from_row(cls, row: dict) -> EvalRecord:
        def num(key, default=math.nan):
            v = row.get(key)
            return default if v in (None, "", "None") else float(v)

        return cls(str(row["case_id"]), str(row["variant"]), num("initial_mtre"), num("final_mrpd", math.inf),
                   num("final_mtre"), int(num("iterations", 0)), int(num("coarse_iterations", 0)),
                   num("coarse_mrpd", math.inf), int(num("start_index", 0)), str(row.get("status") or "ok"))


def read_results_csv(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        return [EvalRecord.from_row(r) for r in csv.DictReader(fh)]


def read_results_json(path) -> list[EvalRecord]:
    return [EvalRecord.from_row(r) for r in json.loads(Path(path).read_text())]


def read_results(path) -> list[EvalRecord]:
    return read_results_json(path) if str(path).endswith(".json") else read_results_csv(path)


def bin_success(initial: Array, ok: Array, bin_width: float, n_bins: int) -> tuple[Array, Array]:
    """Per-bin (successes, totals) over ``[k w, (k+1) w)`` for ``k < n_bins``."""
    initial = np.asarray(initial, dtype=np.float64)
    ok = np.asarray(ok, dtype=bool)
    idx = np.floor(initial / bin_width).astype(np.int64)
    inside = (idx >= 0) & (idx < n_bins)
    totals = np.bincount(idx[inside], minlength=n_bins)
    hits = np.bincount(idx[inside], weights=ok[inside].astype(float), minlength=n_bins).astype(np.int64)
    return hits, totals


def capture_range(initial: Array, ok: Array, bin_width: float = 1.0, max_range: float | None = None,
                  rate: float = CR_RATE) -> float:
    """Largest ``m`` (a multiple of ``bin_width``) with every bin below ``m`` at least ``rate`` successful."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    initial = np.asarray(initial, dtype=np.float64)
    if max_range is None:
        max_range = math.ceil(initial.max() / bin_width) * bin_width if len(initial) else 0.0
    n_bins = int(round(max_range / bin_width))
    hits, totals = bin_success(initial, ok, bin_width, n_bins)
    passing = (totals > 0) & (hits >= rate * totals)
    first_fail = np.flatnonzero(~passing)
    m = first_fail[0] if len(first_fail) else n_bins
    return float(m * bin_width)


@dataclass
class MetricSummary:
    variant: str
    n: int
    sr: float
    gsr: float
    cr: float
    gcr: float
    mrpd_mean: float
    mrpd_std: float
    mean_iterations: float
    bin_width: float
    bin_sr: list = field(default_factory=list)
    bin_gsr: list = field(default_factory=list)
    bin_count: list = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        for k in ("bin_sr", "bin_gsr", "bin_count"):
            d.pop(k)
        return d


def compute_metrics(records: list[EvalRecord], bin_width: float = 1.0, max_range: float | None = None) -> MetricSummary:
    """SR, GSR, CR, GCR and the mRPD mean/std over 2 mm successes."""
    if not records:
        raise EmptyInput("no registration records")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    init = np.array([r.initial_mtre for r in records], dtype=np.float64)
    final = np.array([r.final_mrpd for r in records], dtype=np.float64)
    ok = np.array([r.success for r in records])
    gok = np.array([r.gross_success for r in records])
    if max_range is None:
        max_range = math.ceil(init.max() / bin_width) * bin_width
    n_bins = int(round(max_range / bin_width))
    hits, totals = bin_success(init, ok, bin_width, n_bins)
    ghits, _ = bin_success(init, gok, bin_width, n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        bin_sr = np.where(totals > 0, hits / np.maximum(totals, 1), math.nan)
        bin_gsr = np.where(totals > 0, ghits / np.maximum(totals, 1), math.nan)
    good = final[ok]
    variants = sorted({r.variant for r in records})
    return MetricSummary(
        variant=variants[0] if len(variants) == 1 else ",".join(variants),
        n=len(records),
        sr=float(ok.mean()),
        gsr=float(gok.mean()),
        cr=capture_range(init, ok, bin_width, max_range),
        gcr=capture_range(init, gok, bin_width, max_range),
        mrpd_mean=float(good.mean()) if len(good) else math.nan,
        mrpd_std=float(good.std()) if len(good) else math.nan,
        mean_iterations=float(np.mean([r.iterations for r in records])),
        bin_width=float(bin_width),
        bin_sr=[float(x) for x in bin_sr],
        bin_gsr=[float(x) for x in bin_gsr],
        bin_count=[int(x) for x in totals],
    )


def pe_histogram(pairs, bin_edges) -> tuple[Array, Array]:
    """Counts of initial and resulting PE (pixels) over ``bin_edges``.

    Values beyond the outer edges are counted in the first or last bin, so
    both histograms always sum to the number of pairs.
    """
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyInput("no PE pairs")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be strictly increasing with at least two entries")
    lo, hi = edges[0], np.nextafter(edges[-1], -np.inf)
    clipped = np.clip(pairs, lo, hi)
    h0, _ = np.histogram(clipped[:, 0], bins=edges)
    h1, _ = np.histogram(clipped[:, 1], bins=edges)
    return h0, h1


@dataclass
class ConvergenceBin:
    lo: float
    hi: float
    count: int
    quartiles: tuple | None  # (q1, median, q3) of coarse-level mRPD; None when no successes

    @property
    def present(self) -> bool:
        return self.quartiles is not None


@dataclass
class ConvergenceSummary:
    variant: str
    bins: list[ConvergenceBin]
    mean_iterations: float
    n_success: int


def convergence_summary(records: list[EvalRecord], mtre_bins) -> ConvergenceSummary:
    """Quartiles of the mRPD at the end of the coarsest level per initial-mTRE bin, successes only.

    ``mean_iterations`` is the mean coarsest-level iteration count over the
    same successful registrations.
    """
    if not records:
        raise EmptyInput("no registration records")
    edges = np.asarray(mtre_bins, dtype=np.float64)
    good = [r for r in records if r.success]
    init = np.array([r.initial_mtre for r in good])
    coarse = np.array([r.coarse_mrpd for r in good])
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (init >= lo) & (init < hi) if len(good) else np.zeros(0, dtype=bool)
        vals = coarse[sel]
        q = tuple(float(x) for x in np.percentile(vals, [25, 50, 75])) if len(vals) else None
        bins.append(ConvergenceBin(float(lo), float(hi), int(len(vals)), q))
    iters = float(np.mean([r.coarse_iterations for r in good])) if good else math.nan
    variants = sorted({r.variant for r in records})
    return ConvergenceSummary(",".join(variants), bins, iters, len(good))


def group_by_variant(records: list[EvalRecord]) -> dict[str, list[EvalRecord]]:
    out: dict[str, list[EvalRecord]] = {}
    for r in records:
        out.setdefault(r.variant, []).append(r)
    return dict(sorted(out.items()))


# --- report writers ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_metrics_csv(summaries: list[MetricSummary], path) -> None:
    fields = list(MetricSummary.__dataclass_fields__)
    fields = [f for f in fields if not f.startswith("bin_") or f == "bin_width"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for s in summaries:
            wr.writerow({k: _fmt(v) for k, v in s.row().items()})


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def write_summary_json(summaries: list[MetricSummary], path, extra: dict | None = None) -> None:
    doc = {"metrics": [_jsonable(asdict(s)) for s in summaries]}
    if extra:
        doc.update(_jsonable(extra))
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_bin_table(summaries: list[MetricSummary], path) -> None:
    """Per-bin SR/GSR for every variant, one row per (variant, bin)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "bin_lo", "bin_hi", "count", "sr", "gsr"])
        for s in summaries:
            for k, (sr, gsr, n) in enumerate(zip(s.bin_sr, s.bin_gsr, s.bin_count)):
                wr.writerow([s.variant, _fmt(k * s.bin_width), _fmt((k + 1) * s.bin_width), n, _fmt(sr), _fmt(gsr)])


def write_histogram_csv(edges, h_initial, h_result, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["bin_lo", "bin_hi", "initial", "result"])
        for lo, hi, a, b in zip(edges[:-1], edges[1:], h_initial, h_result):
            wr.writerow([_fmt(float(lo)), _fmt(float(hi)), int(a), int(b)])


def write_convergence_csv(summaries: list[ConvergenceSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "bin_lo", "bin_hi", "count", "q1", "median", "q3", "mean_coarse_iterations"])
        for s in summaries:
            for b in s.bins:
                q = b.quartiles or (math.nan, math.nan, math.nan)
                wr.writerow([s.variant, _fmt(b.lo), _fmt(b.hi), b.count, *(_fmt(x) for x in q), _fmt(s.mean_iterations)])


def text_bars(labels, values, width: int = 40) -> str:
    """A plain-text horizontal bar chart."""
    values = [0.0 if (v is None or not math.isfinite(v)) else float(v) for v in values]
    top = max(values) if values and max(values) > 0 else 1.0
    pad = max((len(str(x)) for x in labels), default=0)
    return "\n".join(f"{str(lab):>{pad}} | {'#' * int(round(width * v / top))} {v:g}" for lab, v in zip(labels, values))
