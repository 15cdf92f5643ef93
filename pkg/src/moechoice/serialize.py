"""Versioned JSON (de)serialization for fitted parameters and fit results."""
from __future__ import annotations

import json
import math

import numpy as np

from .models import LcmParams, MnlParams, ModelParams, MoeParams, MxlParams

FORMAT_VERSION = 1


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def params_to_dict(params: ModelParams) -> dict:
    """Family-tagged dictionary with plain lists; arrays keep their shapes."""
    d = {"format_version": FORMAT_VERSION, "family": params.family,
         "feature_names": list(params.feature_names) if params.feature_names else None}
    if isinstance(params, MnlParams):
        d.update(beta=_floats(params.beta), asc=_floats(params.asc))
    elif isinstance(params, MxlParams):
        # -inf log-std (a degenerate coefficient) is stored as null
        d.update(mean=_floats(params.mean),
                 log_std=[None if math.isinf(v) else v for v in _floats(params.log_std)],
                 asc=_floats(params.asc), draws=int(params.draws), seed=int(params.seed),
                 lognormal_price=bool(params.lognormal_price), price_index=int(params.price_index))
    elif isinstance(params, LcmParams):
        d.update(class_logits=_floats(params.class_logits), betas=_floats(params.betas),
                 ascs=_floats(params.ascs))
    elif isinstance(params, MoeParams):
        d.update(gamma=_floats(params.gamma), gamma_shape=list(params.gamma.shape),
                 betas=_floats(params.betas), ascs=_floats(params.ascs),
                 covariate_names=list(params.covariate_names) if params.covariate_names else None,
                 expert_order="ascending price coefficient")
    else:
        raise TypeError(f"unknown parameter type {type(params).__name__}")
    return d


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
    family = d.get("family")
    names = d.get("feature_names")
    if family == "mnl":
        return MnlParams(d["beta"], d["asc"], names)
    if family == "mxl":
        log_std = [-np.inf if v is None else v for v in d["log_std"]]
        return MxlParams(d["mean"], log_std, d["asc"], d["draws"], d["seed"], d["lognormal_price"],
                         d["price_index"], names)
    if family == "lcm":
        return LcmParams(d["class_logits"], d["betas"], d["ascs"], names)
    if family == "moe":
        gamma = np.asarray(d["gamma"], dtype=float).reshape(d["gamma_shape"])
        return MoeParams(gamma, d["betas"], d["ascs"], names, d.get("covariate_names"))
    raise ValueError(f"unknown model family {family!r}")


def fit_result_to_dict(result) -> dict:
    return {
        "params": params_to_dict(result.params),
        "final_ll": float(result.final_ll),
        "ll_trace": [float(v) for v in result.ll_trace],
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "n_params": int(result.n_params),
        "n_obs": int(result.n_obs),
        "restarts": result.restarts,
    }


def fit_result_from_dict(d: dict):
    from .estimation import FitResult
    return FitResult(params=params_from_dict(d["params"]), final_ll=d["final_ll"], ll_trace=list(d["ll_trace"]),
                     iterations=d["iterations"], converged=d["converged"], n_params=d["n_params"],
                     n_obs=d.get("n_obs", 0), restarts=d.get("restarts", []))


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_model(path) -> ModelParams:
    """Parameters from either a bare params file or a fit-result file."""
    d = load_json(path)
    return params_from_dict(d["params"] if "params" in d else d)
