"""Command-line entry point.

Subcommands, in pipeline order::

    gen-scenes       random phantom scenes (no start poses yet)
    gen-starts       add mTRE-stratified start poses to a scene file
    precompute-corr  training correspondences, one .npz per resolution level
    train            one weighting network per level
    register         run a variant over every (case, start) pair
    evaluate         SR / CR / GSR / GCR tables and plot-ready data
    report           print a text summary of an evaluation
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, validate_config
from .diffreg import CORPUS_VERSION, load_samples, save_samples, split_by_case, train_level, write_train_log
from .errors import BadParams, ConfigError, ModelFormatError, PpcError
from .evaluation import (compute_metrics, convergence_summary, group_by_variant, pe_histogram, read_results,
                         text_bars, write_bin_table, write_convergence_csv, write_histogram_csv, write_metrics_csv,
                         write_summary_json)
from .pipeline import (VARIANTS, make_samples, run_cases, single_iteration_experiment, variant_config,
                       write_results_csv, write_results_json)
from .simscene import SCENE_VERSION, add_start_poses, gen_scenes, load_cases, save_cases
from .weightnet import MODEL_VERSION, load_models, save_model

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_RUNTIME = 5

log = logging.getLogger("ppclearn")


class InputError(Exception):
    """A named input file is missing or unreadable."""


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file or directory")
    return p


def _load_cases(path):
    try:
        return load_cases(_need(path))
    except BadParams as exc:
        raise InputError(str(exc)) from exc


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.root_seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    return cfg


def _check(cfg: RunConfig) -> None:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def _jobs(cfg: RunConfig) -> int:
    return cfg.jobs or os.cpu_count() or 1


# --- commands -------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    for key in ("n_cases", "kind", "first_index"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg.scenes, key, v)
    _check(cfg)
    cases = gen_scenes(cfg.scenes.n_cases, cfg.root_seed, cfg.scenes.kind, cfg.scenes.params or None,
                       cfg.scenes.first_index)
    save_cases(cases, args.out, cfg.root_seed, cfg.sim)
    log.info("wrote %d scenes to %s", len(cases), args.out)
    return EXIT_OK


def cmd_gen_starts(args) -> int:
    cfg = _config(args)
    cases, root, sim = _load_cases(args.scenes)
    spec = cfg.starts
    if args.count is not None:
        spec.count = args.count
    if args.range is not None:
        spec.mtre_range = tuple(args.range)
    if args.bin_width is not None:
        spec.bin_width = args.bin_width
    problems = [f"starts.{m}" for m in spec.validate()]
    if problems:
        raise ConfigError("invalid start-pose settings:\n  " + "\n  ".join(problems))
    add_start_poses(cases, spec, root)
    save_cases(cases, args.out, root, sim)
    log.info("wrote %d start poses per case to %s", spec.count, args.out)
    return EXIT_OK


def cmd_precompute_corr(args) -> int:
    cfg = _config(args)
    cases, root, sim = _load_cases(args.cases)
    if not any(c.starts for c in cases):
        raise InputError(f"{args.cases}: no start poses (run gen-starts first)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = args.levels if args.levels is not None else list(range(len(cfg.levels)))
    for level in levels:
        if not 0 <= level < len(cfg.levels):
            raise ConfigError(f"levels: level {level} does not exist (have {len(cfg.levels)})")
        samples = make_samples(cases, sim, level, cfg.levels[level], root)
        save_samples(samples, out / f"level{level}.npz")
        log.info("level %d: %d samples", level, len(samples))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    _check(cfg)
    corpus = Path(_need(args.corpus))
    files = sorted(corpus.glob("level*.npz"))
    if not files:
        raise InputError(f"{corpus}: no level*.npz corpus files")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list = []
    for f in files:
        samples = load_samples(f)
        level = samples[0].level
        train, val = split_by_case(samples, cfg.corpus.validation_fraction)
        model = train_level(cfg.train, train, val or None, level, rows)
        save_model(model, out / f"level{level}.json")
        log.info("level %d: best validation loss %.4f", level, model.meta["best_validation_loss"])
    write_train_log(rows, out / "train_log.csv")
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _config(args)
    _check(cfg)
    variant = variant_config(args.variant, cfg.levels)
    cases, root, sim = _load_cases(args.cases)
    models = None
    if variant.uses_network:
        if not args.models:
            raise ConfigError(f"variant {args.variant} needs --models")
        models = load_models(_need(args.models))
        missing = [i for i, lv in enumerate(variant.levels) if lv.weight_source == "network" and i not in models]
        if missing:
            raise ModelFormatError(f"{args.models}: no model for level(s) {missing}")
    if args.single_iteration:
        samples = make_samples(cases, sim, 0, cfg.levels[0], root)
        pairs = single_iteration_experiment(samples, variant, models)
        with open(args.out, "w") as fh:
            fh.write("initial_pe,result_pe\n")
            for a, b in pairs:
                fh.write(f"{a!r},{b!r}\n")
        return EXIT_OK
    traces = run_cases(cases, variant, models, sim, root, jobs=_jobs(cfg))
    if str(args.out).endswith(".json"):
        write_results_json(traces, args.out)
    else:
        write_results_csv(traces, args.out)
    log.info("wrote %d results to %s", len(traces), args.out)
    return EXIT_OK


def _read_pe(path) -> list[tuple[float, float]]:
    rows = Path(_need(path)).read_text().splitlines()[1:]
    return [tuple(float(x) for x in r.split(",")) for r in rows if r.strip()]


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    bw = args.bin_width or cfg.bin_width
    records = [r for p in args.inputs for r in read_results(_need(p))]
    groups = group_by_variant(records)
    if not groups:
        raise InputError("no result records in the inputs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    top = max(cfg.starts.mtre_range[1], max(r.initial_mtre for r in records))
    hi = float(bw * round(top / bw + 0.4999))
    summaries = [compute_metrics(recs, bw, hi) for recs in groups.values()]
    write_metrics_csv(summaries, out / "metrics.csv")
    write_bin_table(summaries, out / "bins.csv")
    edges = [bw * k for k in range(int(round(hi / bw)) + 1)]
    conv = [convergence_summary(recs, edges) for recs in groups.values()]
    write_convergence_csv(conv, out / "convergence.csv")
    extra = {"mean_coarse_iterations": {c.variant: c.mean_iterations for c in conv}}
    if args.pe:
        pairs = _read_pe(args.pe)
        pe_edges = [float(k) for k in range(0, 41)]
        h0, h1 = pe_histogram(pairs, pe_edges)
        write_histogram_csv(pe_edges, h0, h1, out / "pe_histogram.csv")
        extra["pe_reduced_fraction"] = sum(b < a for a, b in pairs) / len(pairs)
    write_summary_json(summaries, out / "summary.json", extra)
    return EXIT_OK


def cmd_report(args) -> int:
    import json

    doc = json.loads(Path(_need(Path(args.input) / "summary.json" if Path(args.input).is_dir() else args.input)).read_text())
    lines = [f"{'variant':10s} {'mRPD [mm]':>14s} {'SR %':>6s} {'CR':>5s} {'GSR %':>6s} {'GCR':>5s}"]
    for m in doc["metrics"]:
        acc = "n/a" if m["mrpd_mean"] is None else f"{m['mrpd_mean']:.2f}+-{m['mrpd_std']:.2f}"
        lines.append(f"{m['variant']:10s} {acc:>14s} {100 * m['sr']:6.1f} {m['cr']:5g} {100 * m['gsr']:6.1f} {m['gcr']:5g}")
    lines.append("")
    lines.append("success rate")
    lines.append(text_bars([m["variant"] for m in doc["metrics"]], [m["sr"] for m in doc["metrics"]]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ppclearn", description="Learned correspondence weighting for 2-D/3-D registration.")
    p.add_argument("--version", action="version",
                   version=f"ppclearn {__version__} (scene format {SCENE_VERSION}, corpus format {CORPUS_VERSION}, "
                           f"model format {MODEL_VERSION})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scenes", parents=[common], help="generate phantom scenes")
    s.add_argument("--n-cases", type=int)
    s.add_argument("--kind")
    s.add_argument("--first-index", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("gen-starts", parents=[common], help="add start poses to a scene file")
    s.add_argument("--scenes", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--bin-width", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_starts)

    s = sub.add_parser("precompute-corr", parents=[common], help="precompute training correspondences")
    s.add_argument("--cases", required=True)
    s.add_argument("--levels", type=int, nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_precompute_corr)

    s = sub.add_parser("train", parents=[common], help="train the per-level weighting networks")
    s.add_argument("--corpus", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("register", parents=[common], help="register every start pose with one variant")
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--cases", required=True)
    s.add_argument("--models")
    s.add_argument("--single-iteration", action="store_true",
                   help="one coarsest-level step per start; writes PE pairs in pixels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("evaluate", parents=[common], help="compute metrics from result files")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--pe", help="PE pairs from register --single-iteration")
    s.add_argument("--bin-width", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="print an evaluation summary")
    s.add_argument("--in", dest="input", required=True, help="evaluate output directory or summary.json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ppclearn: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ModelFormatError, OSError) as exc:
        print(f"ppclearn: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PpcError as exc:
        print(f"ppclearn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, TypeError) as exc:
        print(f"ppclearn: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
