from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from oracles import two_nest_model
from travelshare.choiceset import enumerate_combinations
from travelshare.cnl import CnlModel, CnlStructure, Dataset, Observation, UtilitySpec, UtilityTerm, asc_terms
from travelshare.errors import DomainError
from travelshare.synth import GeneratorConfig, generate_dataset
from travelshare.validation import (
    chi_square_test,
    frequency_csv,
    group_summary_csv,
    observed_frequencies,
    param_group_summary,
    parse_cell_range,
    predicted_frequencies,
    split_dataset,
    validate,
)


def uniform_model():
    cs = enumerate_combinations()
    return CnlModel(CnlStructure(cs, (1.0,) * 5, (True,) * 5), UtilitySpec.build([], cs[0]))


def ids_dataset(n, cs=None):
    cs = cs or enumerate_combinations()
    return Dataset(tuple(Observation(f"{i:05d}", cs[i % len(cs)]) for i in range(n)))


# --- split -----------------------------------------------------------------


def test_split_sizes_follow_rounding_convention():
    est, val = split_dataset(ids_dataset(25336), 0.2, 4)
    assert (len(est), len(val)) == (20269, 5067)
    est, val = split_dataset(ids_dataset(10), 0.5, 1)
    assert (len(est), len(val)) == (5, 5)


def test_split_is_deterministic_and_partitions():
    data = ids_dataset(10)
    a = split_dataset(data, 0.2, 9)
    b = split_dataset(data, 0.2, 9)
    assert a[0].ids == b[0].ids and a[1].ids == b[1].ids
    assert sorted(a[0].ids + a[1].ids) == sorted(data.ids)
    # original order is kept inside each part
    assert a[0].ids == sorted(a[0].ids)


@given(st.integers(2, 400), st.floats(0.05, 0.95), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_split_reassembles(n, fraction, seed):
    data = ids_dataset(n)
    try:
        est, val = split_dataset(data, fraction, seed)
    except DomainError:
        return  # one part would be empty
    assert sorted(est.ids + val.ids) == sorted(data.ids)
    assert len(val) == int(np.floor(n * fraction + 0.5))


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(DomainError):
        split_dataset(ids_dataset(10), fraction, 0)


# --- frequencies ---------------------------------------------------------------


def test_uniform_model_expected_one_each():
    model = uniform_model()
    E = predicted_frequencies(model, np.zeros(0), ids_dataset(31))
    assert np.allclose(E, 1.0, atol=1e-12)


def test_three_alternative_instance_expected_counts():
    cs, ref = two_nest_model()
    model = CnlModel(CnlStructure(cs, (2.0, 2.0), (True, True)), UtilitySpec.build([], ref))
    E = predicted_frequencies(model, np.zeros(0), ids_dataset(10, cs))
    assert np.allclose(E, [4, 4, 2], atol=1e-12)


def test_dominant_constant_saturates():
    cs = enumerate_combinations()
    terms = asc_terms(cs, cs[0])
    model = CnlModel(CnlStructure(cs), UtilitySpec.build(terms, cs[0]))
    values = {t.parameter: 0.0 for t in terms}
    values["asc_L+W"] = 20.0
    values.update({f"mu_{c}": 1.5 for c in "PLIWO"})
    E = predicted_frequencies(model, model.theta(values), ids_dataset(100))
    assert E[cs.position(cs.parse("L+W"))] == pytest.approx(100, rel=1e-6)


def test_observed_frequencies():
    cs = enumerate_combinations()
    P, L = cs.parse("P"), cs.parse("L")
    data = Dataset((Observation("1", P), Observation("2", P), Observation("3", L, availability=0b11)))
    O = observed_frequencies(data, cs)
    assert O[0] == 2 and O[1] == 1 and O.sum() == 3


def test_uniform_generated_frequencies_within_binomial_bound():
    model = uniform_model()
    data = generate_dataset(GeneratorConfig(model, {}, n=10000, seed=5))
    O = observed_frequencies(data, model.choiceset)
    p = 1 / 31
    assert np.all(np.abs(O / 10000 - p) <= 4 * np.sqrt(p * (1 - p) / 10000))


def test_expected_and_observed_totals_agree():
    model = uniform_model()
    data = generate_dataset(GeneratorConfig(model, {}, n=500, seed=1))
    assert predicted_frequencies(model, np.zeros(0), data).sum() == pytest.approx(500, abs=1e-9)
    assert observed_frequencies(data, model.choiceset).sum() == 500


# --- chi-square ----------------------------------------------------------------


def test_chi_square_equal_vectors():
    r = chi_square_test([6.0, 7.0, 12.0], [6.0, 7.0, 12.0])
    assert r.statistic == 0.0 and not r.reject_95 and not r.reject_99


def test_chi_square_hand_example():
    r = chi_square_test([10, 20], [15, 15])
    assert r.statistic == pytest.approx(10 / 3, abs=1e-12)
    assert r.df == 1
    assert r.critical_95 == pytest.approx(3.841, abs=1e-3)
    assert not r.reject_95


def test_chi_square_quantiles_against_reference_values():
    # 30 and 25 degrees of freedom as printed in standard tables
    assert chi2.ppf(0.95, 30) == pytest.approx(43.773, abs=1e-3)
    assert chi2.ppf(0.99, 25) == pytest.approx(44.314, abs=1e-3)


def test_cell_range_restricts_statistic():
    O = np.arange(1, 32, dtype=float) + 5
    E = np.full(31, 20.0)
    full = chi_square_test(O, E, "all")
    sub = chi_square_test(O, E, "6-31")
    assert full.df == 30 and sub.df == 25
    assert sub.statistic == pytest.approx(np.sum((O[5:] - 20) ** 2 / 20))


@given(st.lists(st.floats(5, 100), min_size=3, max_size=12), st.randoms())
def test_chi_square_permutation_invariant(values, rnd):
    O = np.array(values)
    E = O[::-1] + 1.0
    perm = list(range(len(O)))
    rnd.shuffle(perm)
    a = chi_square_test(O, E).statistic
    b = chi_square_test(O[perm], E[perm]).statistic
    assert a == pytest.approx(b, rel=1e-12)


def test_low_expected_counts_warn():
    with pytest.warns(RuntimeWarning, match="below 5"):
        r = chi_square_test([1, 9], [2, 8])
    assert r.warnings


@pytest.mark.parametrize("text", ["0-3", "4-40", "a-b", "", "3,3"])
def test_bad_cell_ranges(text):
    with pytest.raises(DomainError):
        parse_cell_range(text, 31)


def test_cell_range_forms():
    assert parse_cell_range("all", 3) == (1, 2, 3)
    assert parse_cell_range("6-8", 31) == (6, 7, 8)
    assert parse_cell_range("1,3-4", 5) == (1, 3, 4)


def test_validate_combines_frequencies():
    model = uniform_model()
    data = ids_dataset(310)
    r = validate(model, np.zeros(0), data, "all")
    assert r.statistic == pytest.approx(0.0, abs=1e-20)
    assert r.labels[5] == "P+L"


# --- group summaries and exports ------------------------------------------------------


def test_group_summary_conventions():
    rows = param_group_summary({"a": 1.0, "b": 2.0, "c": 3.0, "d": 4.0, "e": 7.0}, {"g": ["a", "b", "c", "d"], "one": ["e"]})
    assert [r.group for r in rows] == ["g", "one"]
    assert (rows[0].median, rows[0].q1, rows[0].q3) == (2.5, 1.75, 3.25)
    assert rows[1].median == rows[1].q1 == rows[1].q3 == 7.0


def test_group_summary_errors():
    with pytest.raises(DomainError):
        param_group_summary({"a": 1.0}, {"g": ["zz"]})
    with pytest.raises(DomainError):
        param_group_summary({"a": 1.0}, {"g": []})


def test_csv_exports():
    r = chi_square_test([10, 20], [15, 15], labels=["P", "L"])
    assert frequency_csv(r) == "combination,observed,expected\nP,10,15.0\nL,20,15.0\n"
    rows = param_group_summary({"a": 0.5}, {"g": ["a"]})
    assert group_summary_csv(rows) == "group,median,q1,q3\ng,0.5,0.5,0.5\n"
