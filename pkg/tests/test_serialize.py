import json

import numpy as np
import pytest

from moechoice.estimation import FitConfig, fit_moe
from moechoice.models import LcmParams, MnlParams, MxlParams, choice_probabilities
from moechoice.serialize import (
    dump_json,
    fit_result_from_dict,
    fit_result_to_dict,
    load_model,
    params_from_dict,
    params_to_dict,
)

from conftest import random_dataset, random_moe

FAMILIES = [
    MnlParams(np.array([-1.0, 0.5]), np.array([0.1, 0.2]), ("price", "x1")),
    MxlParams(np.array([-1.0, 0.5]), np.array([np.log(0.3), -np.inf]), np.zeros(2), draws=7, seed=3,
              lognormal_price=True, feature_names=("price", "x1")),
    LcmParams(np.array([0.4]), np.array([[-1.0, 0.0], [0.5, 1.0]]), np.zeros((2, 2)), ("price", "x1")),
    random_moe(K=3),
    random_moe(K=1),
]


@pytest.mark.parametrize("params", FAMILIES, ids=lambda p: f"{p.family}")
def test_roundtrip_through_json(params):
    text = json.dumps(params_to_dict(params))
    back = params_from_dict(json.loads(text))
    assert type(back) is type(params)
    ds = random_dataset(n=10)
    np.testing.assert_array_equal(choice_probabilities(ds, back), choice_probabilities(ds, params))


def test_fit_result_roundtrip(tmp_path):
    ds = random_dataset(n=200, seed=1)
    fit = fit_moe(ds, FitConfig(k_experts=2, n_restarts=1))
    dump_json(fit_result_to_dict(fit), tmp_path / "m.json")
    back = fit_result_from_dict(json.loads((tmp_path / "m.json").read_text()))
    assert back.final_ll == fit.final_ll and back.ll_trace == fit.ll_trace
    np.testing.assert_array_equal(load_model(tmp_path / "m.json").betas, fit.params.betas)


def test_rejects_unknown():
    with pytest.raises(ValueError, match="version"):
        params_from_dict({"family": "mnl"})
    with pytest.raises(ValueError, match="family"):
        params_from_dict({"format_version": 1, "family": "probit"})
