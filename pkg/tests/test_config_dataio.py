from __future__ import annotations

import math

import numpy as np
import pytest

from travelshare.choiceset import enumerate_combinations
from travelshare.config import (
    default_config_text,
    default_groups,
    load_model_config,
    parse_model_config,
    render_config,
)
from travelshare.dataio import dataset_csv, load_dataset, read_dataset, save_dataset
from travelshare.errors import ConfigError, LoadError
from travelshare.synth import default_model, default_scenario, generate_dataset
from travelshare.validation import observed_frequencies

CS = enumerate_combinations()

MINIMAL = """\
[nests]
P = Passive
[utility]
"""

FIVE_NESTS = """\
[nests]
P = Passive
L = Leisure
I = Interacting
W = Work
O = Other
[utility]
asc = all
"""


def same(a, b):
    return a.structure == b.structure and a.spec == b.spec


# --- datasets -----------------------------------------------------------------


def test_three_row_dataset():
    data = read_dataset("obs_id,choice,age\n1,P,30\n2,L+W,41\n3,P,NA\n", CS)
    assert len(data) == 3
    assert data.observations[1].chosen.label == "L+W"
    assert math.isnan(data.observations[2].covariates["age"])
    O = observed_frequencies(data, CS)
    assert O[0] == 2 and O[CS.position(CS.parse("L+W"))] == 1


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("obs_id,choice\n1,P\n2,Q\n", "row 3"),
        ("obs_id,choice,avail_P\n1,P,0\n", "row 2"),
        ("obs_id,choice,x\n1,P,abc\n", "not numeric"),
        ("obs_id,choice,x\n1,P,inf\n", "not numeric"),
        ("obs_id,choice,avail_P\n1,L,2\n", "0 or 1"),
        ("obs_id,choice\n1,P,3\n", "expected 2 fields"),
        ("obs_id,x\n1,2\n", "choice"),
        ("obs_id,choice,avail_Z\n1,P,1\n", "avail_Z"),
        ("", "empty"),
        ("obs_id,choice\n1,P\n1,L\n", "1"),
    ],
)
def test_dataset_errors(text, fragment):
    with pytest.raises(LoadError, match=fragment):
        read_dataset(text, CS, source="data.csv")


def test_availability_columns():
    data = read_dataset("obs_id,choice,avail_P,avail_L\n1,L,0,1\n2,P,1,1\n", CS)
    assert data.observations[0].availability is not None and not data.observations[0].availability & 1
    assert data.observations[1].availability is None


def test_simulated_round_trip(tmp_path):
    cfg = default_scenario(n=400, seed=3)
    data = generate_dataset(cfg)
    path = tmp_path / "d.csv"
    save_dataset(data, path, CS)
    again = load_dataset(path, CS)
    assert [(o.id, o.chosen, dict(o.covariates)) for o in again] == [(o.id, o.chosen, dict(o.covariates)) for o in data]
    assert np.array_equal(observed_frequencies(again, CS), observed_frequencies(data, CS))
    assert dataset_csv(again, CS) == path.read_text()


# --- configuration -----------------------------------------------------------


def test_default_config_matches_default_model():
    cfg = parse_model_config(default_config_text())
    assert same(cfg.model, default_model())
    assert cfg.validation.holdout == 0.2 and cfg.validation.cells == ("all", "6-31")
    assert cfg.truth is not None and set(cfg.truth) == set(cfg.model.parameter_names)
    assert len(cfg.digest) == 16


def test_minimal_config():
    cfg = parse_model_config(MINIMAL)
    assert len(cfg.model.choiceset) == 1
    assert cfg.model.parameter_names == ("mu_P",)


def test_five_nest_auto_config():
    cfg = parse_model_config(FIVE_NESTS)
    assert len(cfg.model.choiceset) == 31
    assert cfg.model.n_free == 35


def test_render_round_trip(tmp_path):
    cfg = parse_model_config(default_config_text())
    text = render_config(cfg.model, cfg.estimation, cfg.validation, cfg.covariates, cfg.truth, cfg.simulation, cfg.groups)
    again = parse_model_config(text)
    assert same(again.model, cfg.model) and again.truth == cfg.truth
    path = tmp_path / "m.cfg"
    path.write_text(text)
    assert same(load_model_config(path).model, cfg.model)


def test_default_groups_cover_every_utility_parameter():
    model = default_model()
    groups = default_groups(model)
    assert sorted(n for names in groups.values() for n in names) == sorted(n for n in model.parameter_names if not n.startswith("mu_"))


@pytest.mark.parametrize(
    "text, line",
    [
        (MINIMAL + "[bogus]\n", 4),
        (MINIMAL + "asc = some\n", 4),
        (MINIMAL + "term = asc(P)\n", 4),
        (MINIMAL + "term = beta(b) * x @ nowhere(P)\n", 4),
        ("[nests]\nP = Passive\nP.init = abc\n[utility]\n", 3),
        (MINIMAL + "[validation]\nholdout = 1.5\n", 5),
        (MINIMAL + "[validation]\ncolour = red\n", 5),
        (MINIMAL + "[truth]\nb_zz = 1\n", 5),
        ("[nests]\nP = Passive\nstray line\n", 3),
    ],
)
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=rf"m\.cfg:{line}"):
        parse_model_config(text, "m.cfg")


def test_missing_sections():
    with pytest.raises(ConfigError, match="nests"):
        parse_model_config("[utility]\n")
    with pytest.raises(ConfigError, match="utility"):
        parse_model_config("[nests]\nP = Passive\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_model_config(tmp_path / "absent.cfg")
