from __future__ import annotations

import json
import math

import numpy as np

from travelshare.choiceset import enumerate_combinations
from travelshare.cnl import Dataset, Observation
from travelshare.config import parse_model_config
from travelshare.estimation import EstimationResult, test_scale_parameters as scale_tests
from travelshare.pipeline import estimates_csv, read_estimates, run_pipeline, table_summary
from travelshare.synth import generate_dataset

CONFIG = """\
[nests]
A = First
B = Second

[utility]
asc = all
term = beta(b1) * x1 @ contains(A)

[covariates]
x1 = normal(0, 1)

[truth]
asc_B = 0.1
asc_A+B = -0.5
b1 = 0.7
mu_A = 1.5
mu_B = 1.3

[simulation]
n = 2000
seed = 4
"""


def published_like_result():
    names = tuple(f"mu_{c}" for c in "PLIWO")
    est = np.array([1.81, 2.01, 1.42, 1.11, 1.07])
    se = np.array([0.10, 0.12, 0.09, 0.08, 0.09])
    return EstimationResult(
        names, est, se, None, None, -69665.298, -53023.425, -69665.298, 40, True, "converged", 20287, 0.0
    )


def test_summary_block_marks_insignificant_scales():
    res = published_like_result()
    text = table_summary(res, scale_tests(res), enumerate_combinations())
    assert "-69665.298" in text and "-53023.425" in text and "33283.746" in text
    assert "0.239" in text and "Rho-square" in text
    lines = {l.split("'")[1]: l for l in text.splitlines() if "Scale parameter" in l}
    assert len(lines) == 5
    starred = [code for code, l in lines.items() if l.rstrip().endswith("*")]
    # 1.11 / 0.08 and 1.07 / 0.09 stay within two standard errors of 1
    assert len(starred) == 2
    assert "not significantly different from 1" in text


def test_estimates_csv_round_trip():
    res = published_like_result()
    assert read_estimates(estimates_csv(res)) == dict(zip(res.names, res.estimates.tolist()))


def test_incomplete_cases_are_dropped():
    cfg = parse_model_config(CONFIG)
    data = generate_dataset(cfg.generator())
    obs = list(data)
    obs[3] = Observation(obs[3].id, obs[3].chosen, {"x1": math.nan})
    report = run_pipeline(cfg, Dataset(tuple(obs)))
    assert report.dropped == (obs[3].id,)
    assert report.n_estimation + report.n_validation == len(obs) - 1


def test_report_json_and_reproducibility(tmp_path):
    cfg = parse_model_config(CONFIG)
    a = run_pipeline(cfg, out_dir=tmp_path / "a")
    b = run_pipeline(cfg)
    assert a.numeric_content() == b.numeric_content()
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert "wall_time_seconds" in doc
    assert doc["estimation"]["converged"]
    assert doc["validation"][0]["df"] == 2
