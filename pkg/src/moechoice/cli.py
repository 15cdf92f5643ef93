"""Command-line pipeline: simulate, preprocess, fit, benchmark, analyze.

Settings resolve as flags > ``--config`` JSON > built-in defaults. A config
file may hold keys at top level or inside a block named after the
subcommand. Every run writes ``manifest.json`` echoing the resolved settings.

Exit codes: 0 success, 2 usage or input error, 3 non-convergence or no
successful benchmark row.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    discount_response_curve,
    feature_means,
    reference_observation,
    segment_elasticity_report,
    shapley_attribution,
)
from .data import (
    ChoiceDataError,
    SplitIndices,
    flag_outliers,
    impute_missing,
    ingest_csv,
    stratified_split,
    transform_features,
    write_csv,
)
from .estimation import EstimationError, FitConfig, InnerOptConfig, fit_family, select_k_by_cv
from .evaluation import FAMILIES, run_benchmark
from .models import MnlParams, MoeParams
from .serialize import dump_json, fit_result_to_dict, load_json, load_model
from .synthgen import PRESETS, generate

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 2, 3
OUTPUT_ENV = "MOECHOICE_OUTPUT_DIR"
logger = logging.getLogger("moechoice")


class UsageError(Exception):
    pass


DEFAULTS = {
    "simulate": {"preset": "four-segment", "n": 20000, "obs_per_consumer": 1, "seed": 0},
    "preprocess": {"data": None, "schema": None, "impute": True, "max_missing": 0.20, "outliers": "flag",
                   "transforms": [], "ratios": [0.70, 0.15, 0.15], "strat_column": None, "seed": 0},
    "fit": {"data": None, "schema": None, "split": None, "family": "moe", "k": None,
            "k_candidates": [1, 2, 3, 4], "folds": 5, "tol": 1e-6, "max_iter": 500, "restarts": 5,
            "inner": "newton", "draws": 100, "seed": 0},
    "benchmark": {"data": None, "schema": None, "split": None, "ratios": [0.70, 0.15, 0.15],
                  "families": list(FAMILIES), "k_candidates": [1, 2, 3, 4], "restarts": 5, "draws": 100,
                  "tol": 1e-6, "seed": 0},
    "analyze": {"data": None, "schema": None, "model": None, "segment_names": None,
                "discount_grid": [0.05, 0.10, 0.15, 0.20, 0.25], "knee": 0.20, "shapley": True,
                "obs": 0, "alt": 0, "cross": False, "seed": 0},
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moechoice", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"moechoice {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file with settings (flags override it)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./moechoice_out)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("--data", help="dataset CSV")
            sp.add_argument("--schema", help="schema JSON (default: schema.json next to the data)")

    s = sub.add_parser("simulate", help="generate a synthetic market")
    common(s, data=False)
    s.add_argument("--preset", choices=sorted(PRESETS), default=None)
    s.add_argument("--n", type=int, default=None, help="number of consumers")
    s.add_argument("--obs-per-consumer", type=int, default=None, dest="obs_per_consumer")

    s = sub.add_parser("preprocess", help="impute, flag outliers, transform and split")
    common(s)
    s.add_argument("--no-impute", dest="impute", action="store_false", default=None)
    s.add_argument("--max-missing", type=float, default=None, dest="max_missing")
    s.add_argument("--outliers", choices=["keep", "flag", "drop"], default=None)
    s.add_argument("--log", type=_names, default=None, help="columns to log-transform")
    s.add_argument("--standardize", type=_names, default=None)
    s.add_argument("--onehot", type=_names, default=None)
    s.add_argument("--moving-average", type=_names, default=None, dest="moving_average",
                   help="COLUMN:WINDOW entries")
    s.add_argument("--ratios", type=_floats, default=None)
    s.add_argument("--strat-column", default=None, dest="strat_column")

    s = sub.add_parser("fit", help="estimate one model family")
    common(s)
    s.add_argument("--split", help="split JSON; the model is fitted on its train part")
    s.add_argument("--family", choices=list(FAMILIES), default=None)
    s.add_argument("--k", default=None, help="number of experts/classes or 'select'")
    s.add_argument("--k-candidates", type=_ints, default=None, dest="k_candidates")
    s.add_argument("--folds", type=int, default=None)
    s.add_argument("--tol", type=float, default=None, help="relative log-likelihood tolerance")
    s.add_argument("--max-iter", type=int, default=None, dest="max_iter")
    s.add_argument("--restarts", type=int, default=None)
    s.add_argument("--inner", choices=["newton", "gradient", "adam"], default=None)
    s.add_argument("--draws", type=int, default=None, help="mixed logit simulation draws")

    s = sub.add_parser("benchmark", help="compare MNL, MXL, LCM and MoE on a split")
    common(s)
    s.add_argument("--split", help="split JSON (otherwise made from --ratios)")
    s.add_argument("--ratios", type=_floats, default=None)
    s.add_argument("--families", type=_names, default=None)
    s.add_argument("--k-candidates", type=_ints, default=None, dest="k_candidates")
    s.add_argument("--restarts", type=int, default=None)
    s.add_argument("--draws", type=int, default=None)
    s.add_argument("--tol", type=float, default=None)

    s = sub.add_parser("analyze", help="segment elasticities, discount response, Shapley attribution")
    common(s)
    s.add_argument("--model", help="model.json written by fit")
    s.add_argument("--segment-names", type=_names, default=None, dest="segment_names")
    s.add_argument("--discount-grid", type=_floats, default=None, dest="discount_grid")
    s.add_argument("--knee", type=float, default=None)
    s.add_argument("--shapley", dest="shapley", action="store_true", default=None)
    s.add_argument("--no-shapley", dest="shapley", action="store_false")
    s.add_argument("--obs", type=int, default=None, help="observation index for Shapley attribution")
    s.add_argument("--alt", type=int, default=None, help="target alternative for Shapley attribution")
    s.add_argument("--cross", action="store_true", default=None, help="add mean cross-elasticity matrix")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            file_cfg = load_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        block = {k: v for k, v in file_cfg.items() if not isinstance(v, dict) or k not in DEFAULTS}
        block.update(file_cfg.get(command, {}))
        unknown = set(block) - set(cfg) - {"out"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(block)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        if command == "preprocess" and key in ("log", "standardize", "onehot", "moving_average"):
            continue
        cfg[key] = value
    if command == "preprocess":
        cfg["transforms"] = list(cfg["transforms"]) + _transform_flags(args)
    cfg["out"] = str(cfg.get("out") or os.environ.get(OUTPUT_ENV) or "moechoice_out")
    return cfg


def _transform_flags(args) -> list[dict]:
    ops = []
    for col in args.log or []:
        ops.append({"op": "log", "column": col})
    for col in args.onehot or []:
        ops.append({"op": "onehot", "column": col})
    for item in args.moving_average or []:
        col, _, w = item.partition(":")
        if not w.isdigit():
            raise UsageError(f"--moving-average expects COLUMN:WINDOW, got {item!r}")
        ops.append({"op": "moving_average", "column": col, "window": int(w)})
    for col in args.standardize or []:
        ops.append({"op": "standardize", "column": col})
    return ops


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list[str], inputs=()) -> None:
    manifest = {
        "tool": "moechoice", "version": __version__, "command": command, "config": cfg,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if p and Path(p).exists()},
        "outputs": sorted(outputs),
    }
    dump_json(manifest, out / "manifest.json")


def _load(cfg: dict):
    if not cfg.get("data"):
        raise UsageError("--data is required")
    data = Path(cfg["data"])
    schema = Path(cfg["schema"]) if cfg.get("schema") else data.parent / "schema.json"
    if not data.exists():
        raise UsageError(f"no such dataset: {data}")
    if not schema.exists():
        raise UsageError(f"no schema file: {schema}")
    return ingest_csv(data, schema), [str(data), str(schema)]


def _fit_config(cfg: dict, k=2) -> FitConfig:
    return FitConfig(rel_ll_tol=cfg.get("tol", 1e-6), max_em_iters=cfg.get("max_iter", 500), seed=cfg["seed"],
                     k_experts=k, k_candidates=tuple(cfg.get("k_candidates", (1, 2, 3, 4))),
                     cv_folds=cfg.get("folds", 5), n_restarts=cfg.get("restarts", 5),
                     mxl_draws=cfg.get("draws", 100),
                     inner_opt=InnerOptConfig(method=cfg.get("inner", "newton")))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> int:
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    if cfg["obs_per_consumer"] < 1:
        raise UsageError("--obs-per-consumer must be at least 1")
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    kwargs = {"n_consumers": cfg["n"], "seed": cfg["seed"]}
    if cfg["preset"] == "four-segment":
        kwargs["n_obs_per_consumer"] = cfg["obs_per_consumer"]
    elif cfg["obs_per_consumer"] != 1:
        raise UsageError("--obs-per-consumer is only supported by the 'four-segment' preset")
    ds, truth = generate(PRESETS[cfg["preset"]](**kwargs))
    dump_json(write_csv(ds, out / "data.csv"), out / "schema.json")
    truth.to_json(out / "truth.json")
    _write_manifest(out, "simulate", cfg, ["data.csv", "schema.json", "truth.json"])
    logger.info("wrote %d observations to %s", len(ds), out)
    return EXIT_OK


def cmd_preprocess(cfg: dict) -> int:
    ds, inputs = _load(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ratios = cfg["ratios"]
    if len(ratios) != 3:
        raise UsageError("--ratios needs three values")
    if cfg["outliers"] not in ("keep", "flag", "drop"):
        raise UsageError("--outliers must be keep, flag or drop")
    n_in = len(ds)
    if cfg["impute"]:
        ds = impute_missing(ds, cfg["max_missing"])
    notes: list[str] = []
    flagged: list[int] = []
    if cfg["outliers"] != "keep":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            flagged = flag_outliers(ds)
        notes = [str(w.message) for w in caught]
    if cfg["outliers"] == "drop" and flagged:
        ds = ds.subset(np.setdiff1d(np.arange(len(ds)), flagged))
    if cfg["transforms"]:
        ds = transform_features(ds, cfg["transforms"])
    split = stratified_split(ds, ratios, cfg["strat_column"], seed=cfg["seed"])
    dump_json(write_csv(ds, out / "data.csv"), out / "schema.json")
    dump_json(split.to_dict(), out / "split.json")
    impute = [h for h in ds.history if h.get("step") == "impute"]
    report = {
        "n_input": n_in, "n_output": len(ds),
        "dropped_columns": impute[-1]["dropped"] if impute else [],
        "imputed_cells": impute[-1]["filled"] if impute else {},
        "outlier_policy": cfg["outliers"], "outlier_indices": [int(i) for i in flagged],
        "outlier_notes": notes, "history": ds.history,
    }
    dump_json(report, out / "preprocess_report.json")
    _write_manifest(out, "preprocess", cfg, ["data.csv", "schema.json", "split.json", "preprocess_report.json"],
                    inputs)
    return EXIT_OK


def _train_part(ds, cfg):
    if not cfg.get("split"):
        return ds
    split = SplitIndices.from_dict(load_json(cfg["split"]))
    return ds.subset(split.train)


def cmd_fit(cfg: dict) -> int:
    family, k = cfg["family"], cfg["k"]
    if family in ("mnl", "mxl") and k is not None:
        raise UsageError(f"--k does not apply to family {family!r}")
    if k is None:
        k = 2
    select = str(k) == "select"
    if not select:
        try:
            k = int(k)
        except ValueError:
            raise UsageError(f"--k must be an integer or 'select', got {k!r}")
        if k < 1:
            raise UsageError("--k must be at least 1")
    if cfg["folds"] < 2:
        raise UsageError("--folds must be at least 2")
    ds, inputs = _load(cfg)
    if cfg.get("split"):
        inputs.append(cfg["split"])
    train = _train_part(ds, cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["model.json", "fit_log.json"]
    fc = _fit_config(cfg)
    if select:
        K, table = select_k_by_cv(train, cfg["k_candidates"], cfg["folds"], fc, family=family)
        dump_json({"family": family, "candidates": cfg["k_candidates"], "folds": cfg["folds"],
                   "selected_k": K, "rows": table}, out / "cv_table.json")
        outputs.append("cv_table.json")
        k = K
    fc = _fit_config(cfg, k=k)
    result = fit_family(train, family, fc)
    doc = fit_result_to_dict(result)
    doc["family"] = family
    doc["config"] = fc.to_dict()
    dump_json(doc, out / "model.json")
    dump_json({"ll_trace": doc["ll_trace"], "restarts": doc["restarts"], "iterations": doc["iterations"],
               "converged": doc["converged"]}, out / "fit_log.json")
    _write_manifest(out, "fit", cfg, outputs, inputs)
    if not result.converged:
        logger.warning("fit did not converge; artifacts written")
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_benchmark(cfg: dict) -> int:
    unknown = set(cfg["families"]) - set(FAMILIES)
    if unknown:
        raise UsageError(f"unknown families {sorted(unknown)}")
    ds, inputs = _load(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["metrics.json", "metrics.csv"]
    if cfg.get("split"):
        split = SplitIndices.from_dict(load_json(cfg["split"]))
        inputs.append(cfg["split"])
    else:
        if len(cfg["ratios"]) != 3:
            raise UsageError("--ratios needs three values")
        split = stratified_split(ds, cfg["ratios"], seed=cfg["seed"])
        dump_json(split.to_dict(), out / "split.json")
        outputs.append("split.json")
    report = run_benchmark(ds, split, _fit_config(cfg), families=tuple(cfg["families"]))
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    _write_manifest(out, "benchmark", cfg, outputs, inputs)
    for fam, secs in report.timings.items():
        logger.info("%s fitted in %.1f s", fam, secs)
    if all(r.error is not None for r in report.rows):
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    if not cfg.get("model"):
        raise UsageError("--model is required")
    try:
        params = load_model(cfg["model"])
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load model {cfg['model']}: {exc}")
    if not isinstance(params, (MoeParams, MnlParams)):
        raise UsageError(f"analysis requires an MoE or MNL model, got {params.family!r}")
    ds, inputs = _load(cfg)
    inputs.append(cfg["model"])
    if list(params.feature_names or ds.alt_feature_names) != ds.alt_feature_names:
        raise UsageError("model attributes do not match the dataset columns")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    K = params.n_experts if isinstance(params, MoeParams) else 1
    names = cfg["segment_names"]
    if names is not None and len(names) != K:
        raise UsageError(f"--segment-names needs {K} names")
    report = segment_elasticity_report(ds, params, names, with_cross=cfg["cross"])
    dump_json(report.to_dict(), out / "segments.json")
    report.to_csv(out / "segments.csv")
    outputs = ["segments.json", "segments.csv"]
    if "discount" in ds.alt_feature_names:
        curve = discount_response_curve(params, reference_observation(ds), cfg["discount_grid"],
                                        knee=cfg["knee"], segment_names=names)
        dump_json(curve.to_dict(), out / "discount_response.json")
        curve.to_csv(out / "discount_response.csv")
        outputs += ["discount_response.json", "discount_response.csv"]
    if cfg["shapley"]:
        if not 0 <= cfg["obs"] < len(ds):
            raise UsageError(f"--obs must be in [0, {len(ds)})")
        if not 0 <= cfg["alt"] < ds.n_alternatives:
            raise UsageError(f"--alt must be in [0, {ds.n_alternatives})")
        att = shapley_attribution(ds[cfg["obs"]], params, cfg["alt"], feature_means(ds))
        doc = att.to_dict()
        doc["observation"] = cfg["obs"]
        doc["baseline"] = "dataset attribute means"
        dump_json(doc, out / "attribution.json")
        outputs.append("attribution.json")
    _write_manifest(out, "analyze", cfg, outputs, inputs)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "preprocess": cmd_preprocess, "fit": cmd_fit,
            "benchmark": cmd_benchmark, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"moechoice {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChoiceDataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"moechoice {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EstimationError as exc:
        print(f"moechoice {args.command}: estimation failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
