from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_gradient, cnl_oracle, mnl, random_instance, two_nest_model
from travelshare.choiceset import DEFAULT_NESTS, Combination, NestId, enumerate_combinations
from travelshare.cnl import (
    CnlModel,
    CnlStructure,
    Dataset,
    Observation,
    Predicate,
    UtilitySpec,
    UtilityTerm,
    choice_probabilities,
    cnl_probabilities,
    complete_cases,
    free_from_scale,
    gradient,
    log_likelihood,
    loglik_and_gradient,
    natural_gradient,
    prepare,
    scale_from_free,
    scores,
    systematic_utility,
)
from travelshare.errors import DataError, DomainError, ZeroProbabilityWarning


def singleton_structure(j):
    nests = tuple(NestId(f"N{i}") for i in range(j))
    labels = [n.code for n in nests]
    from travelshare.choiceset import ChoiceSet

    return CnlStructure(ChoiceSet.from_labels(labels, nests), (1.0,) * j, (True,) * j)


def test_mnl_two_alternatives():
    st_ = singleton_structure(2)
    p = cnl_probabilities(st_, [0.0, math.log(2.0)])
    assert np.allclose(p, [1 / 3, 2 / 3], atol=1e-15)


def test_three_alternative_instance():
    cs, _ = two_nest_model()
    structure = CnlStructure(cs, (2.0, 2.0))
    p = cnl_probabilities(structure, [0.0, 0.0, 0.0])
    assert np.abs(p - [0.4, 0.4, 0.2]).max() < 1e-12
    assert np.abs(p - cnl_oracle(structure.alpha, np.zeros(3), np.array([2.0, 2.0]))).max() < 1e-12


def test_availability_renormalises():
    cs, _ = two_nest_model()
    structure = CnlStructure(cs, (2.0, 2.0))
    avail = np.array([True, False, True])
    p = cnl_probabilities(structure, [0.0, 0.0, 0.0], avail)
    oracle = cnl_oracle(structure.alpha, np.zeros(3), np.array([2.0, 2.0]), avail)
    assert p[1] == 0.0
    assert np.abs(p - oracle).max() < 1e-12
    assert abs(p.sum() - 1) < 1e-15
    # same thing through the integer bitmask form
    assert np.array_equal(cnl_probabilities(structure, [0.0, 0.0, 0.0], 0b101), p)


def test_rejects_bad_inputs():
    cs, _ = two_nest_model()
    structure = CnlStructure(cs, (2.0, 2.0))
    with pytest.raises(DomainError):
        cnl_probabilities(structure, [0.0, 0.0])
    with pytest.raises(DomainError):
        cnl_probabilities(structure, [0.0, 0.0, 0.0], np.zeros(3, dtype=bool))
    with pytest.raises(DomainError):
        cnl_probabilities(structure, [0.0, 0.0, 0.0], scales=[0.5, 2.0])


def random_structure(rng):
    return CnlStructure(enumerate_combinations(), tuple(rng.uniform(1.0, 4.0, 5)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_probabilities_match_oracle_and_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    structure = random_structure(rng)
    V = rng.normal(0, 2, 31)
    avail = rng.random(31) < 0.7
    avail[rng.integers(31)] = True
    p = cnl_probabilities(structure, V, avail)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p[~avail] == 0)
    oracle = cnl_oracle(structure.alpha, V, np.array(structure.scale_init), avail)
    assert np.abs(p - oracle).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    structure = random_structure(rng)
    V = rng.normal(0, 2, 31)
    assert np.abs(cnl_probabilities(structure, V) - cnl_probabilities(structure, V + shift)).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(0, 30), st.floats(1e-3, 3.0))
@settings(max_examples=100, deadline=None)
def test_monotone_in_own_utility(seed, i, bump):
    rng = np.random.default_rng(seed)
    structure = random_structure(rng)
    V = rng.normal(0, 1, 31)
    W = V.copy()
    W[i] += bump
    assert cnl_probabilities(structure, W)[i] > cnl_probabilities(structure, V)[i]


def test_extreme_utilities_stay_finite():
    rng = np.random.default_rng(3)
    structure = random_structure(rng)
    for _ in range(50):
        V = rng.choice([-500.0, 500.0, 0.0], 31) + rng.normal(0, 1, 31)
        p = cnl_probabilities(structure, V)
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1) < 1e-12


def test_mnl_reduction_random():
    rng = np.random.default_rng(11)
    st_ = singleton_structure(7)
    for _ in range(200):
        V = rng.normal(0, 3, 7)
        assert np.abs(cnl_probabilities(st_, V) - mnl(V)).max() < 1e-12


def test_scale_transform_round_trip():
    mu = np.array([1.0001, 1.07, 1.5, 2.01, 40.0])
    assert np.allclose(scale_from_free(free_from_scale(mu)), mu, rtol=1e-12, atol=0)
    assert np.all(scale_from_free(np.array([-800.0, 0.0, 800.0])) >= 1.0)
    with pytest.raises(DomainError):
        free_from_scale(1.0)


# --- utility specification -------------------------------------------------


def test_systematic_utility_examples():
    L = Combination.of(["L"])
    LW = Combination.of(["L", "W"])
    spec = UtilitySpec.build([UtilityTerm.asc(L, "asc_L")], Combination.of(["P"]))
    assert systematic_utility(spec, {"asc_L": 0.7}, Observation("1", L), L) == 0.7

    spec = UtilitySpec.build([UtilityTerm.beta("b_laptop", "laptop", Predicate("contains", "W"))])
    obs = Observation("1", L, {"laptop": 1.0})
    assert systematic_utility(spec, {"b_laptop": 1.3}, obs, L) == 0.0
    assert systematic_utility(spec, {"b_laptop": 1.3}, obs, LW) == 1.3

    spec = UtilitySpec.build([UtilityTerm.nest_count("b_dur", "long")])
    obs = Observation("1", L, {"long": 1.0})
    assert systematic_utility(spec, {"b_dur": 0.2}, obs, LW) == pytest.approx(0.4, abs=1e-15)


def test_alt_predicate_and_any():
    LW = Combination.of(["L", "W"])
    assert Predicate("alt", "L+W")(LW)
    assert not Predicate("alt", "L")(LW)
    assert Predicate("any")(LW)


def test_missing_covariate_is_a_data_error():
    L = Combination.of(["L"])
    spec = UtilitySpec.build([UtilityTerm.beta("b", "x", Predicate("any"))])
    with pytest.raises(DataError):
        systematic_utility(spec, {"b": 1.0}, Observation("1", L), L)


def test_spec_validation():
    P = Combination.of(["P"])
    with pytest.raises(DomainError):
        UtilitySpec.build([UtilityTerm.asc(P)], P)  # free constant on the reference
    with pytest.raises(DomainError):
        UtilitySpec.build([UtilityTerm.beta("b", "x", Predicate("any"))], P, covariates=("y",))
    with pytest.raises(DomainError):
        UtilitySpec.build([UtilityTerm.beta("b", "x", Predicate("any")), UtilityTerm.beta("b", "y", Predicate("any"))])


def test_structure_rejects_scale_below_one_or_free_at_one():
    cs = enumerate_combinations()
    with pytest.raises(DomainError):
        CnlStructure(cs, (0.9, 1.5, 1.5, 1.5, 1.5))
    with pytest.raises(DomainError):
        CnlStructure(cs, (1.0, 1.5, 1.5, 1.5, 1.5))
    CnlStructure(cs, (1.0, 1.5, 1.5, 1.5, 1.5), (True, False, False, False, False))


def test_vectorised_utilities_match_scalar_path():
    rng = np.random.default_rng(5)
    model, data, theta = random_instance(rng, n_obs=15)
    from travelshare.cnl import utilities

    V = utilities(model, theta, prepare(model, data))
    coeffs = dict(zip([t.parameter for t in model.spec.terms], model.coefficients(theta)))
    for n, obs in enumerate(data):
        for j, alt in enumerate(model.choiceset):
            assert V[n, j] == pytest.approx(systematic_utility(model.spec, coeffs, obs, alt), abs=1e-12)


# --- likelihood -----------------------------------------------------------


def tiny_two_alt_model(mu=1.5):
    nests = (NestId("A"), NestId("B"))
    from travelshare.choiceset import ChoiceSet

    cs = ChoiceSet.from_labels(["A", "B"], nests)
    spec = UtilitySpec.build([UtilityTerm.asc(cs[1], "asc_B")], cs[0])
    return CnlModel(CnlStructure(cs, (mu, mu)), spec), cs


def test_loglik_equal_utilities():
    model, cs = tiny_two_alt_model()
    data = Dataset(tuple(Observation(str(i), cs[i % 2]) for i in range(4)))
    ll = log_likelihood(model, model.theta({"asc_B": 0.0, "mu_A": 1.5, "mu_B": 1.5}), data)
    assert ll == pytest.approx(4 * math.log(0.5), abs=1e-12)


def test_null_model_value_for_table_size():
    cs = enumerate_combinations()
    spec = UtilitySpec.build([], cs[0])
    model = CnlModel(CnlStructure(cs, (1.0,) * 5, (True,) * 5), spec)
    data = Dataset(tuple(Observation(str(i), cs[i % 31]) for i in range(20287)))
    assert log_likelihood(model, np.zeros(0), data) == pytest.approx(-69665.30, abs=0.5)


def test_loglik_of_third_alternative():
    cs, ref = two_nest_model()
    spec = UtilitySpec.build([], ref)
    model = CnlModel(CnlStructure(cs, (2.0, 2.0), (True, True)), spec)
    data = Dataset((Observation("1", cs[2]),))
    assert log_likelihood(model, np.zeros(0), data) == pytest.approx(math.log(0.2), abs=1e-12)


def test_mnl_score():
    model, cs = tiny_two_alt_model()
    data = Dataset((Observation("1", cs[1]),))
    g = gradient(model, model.theta({"asc_B": 0.0, "mu_A": 1.5, "mu_B": 1.5}), data)
    assert g[0] == pytest.approx(0.5, abs=1e-12)


def test_no_free_parameters_gives_empty_gradient():
    cs = enumerate_combinations()
    model = CnlModel(CnlStructure(cs, (1.2,) * 5, (True,) * 5), UtilitySpec.build([], cs[0]))
    data = Dataset((Observation("1", cs[3]),))
    assert gradient(model, np.zeros(0), data).shape == (0,)


def test_tiny_probability_is_not_clamped():
    model, cs = tiny_two_alt_model()
    data = Dataset((Observation("x1", cs[1]),))
    theta = model.theta({"asc_B": -800.0, "mu_A": 1.5, "mu_B": 1.5})
    assert log_likelihood(model, theta, data) == pytest.approx(-800.0, abs=1e-9)


def test_zero_probability_gives_minus_infinity():
    # prepare() refuses a chosen-but-unavailable row, so patch a prepared batch
    import dataclasses

    model, cs = tiny_two_alt_model()
    data = Dataset((Observation("x1", cs[1]), Observation("x2", cs[0])))
    prep = prepare(model, data)
    avail = prep.avail.copy()
    avail[0, 1] = False
    prep = dataclasses.replace(prep, avail=avail)
    theta = model.theta({"asc_B": 0.0, "mu_A": 1.5, "mu_B": 1.5})
    with pytest.warns(ZeroProbabilityWarning, match="x1"):
        assert log_likelihood(model, theta, prep) == -math.inf


def test_chosen_unavailable_rejected_by_prepare():
    model, cs = tiny_two_alt_model()
    with pytest.raises(DataError):
        prepare(model, Dataset((Observation("x1", cs[1], availability=0b01),)))


@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model, data, theta = random_instance(rng)
    prep = prepare(model, data)
    x = theta.values
    g = gradient(model, x, prep)
    fd = central_gradient(lambda v: log_likelihood(model, v, prep), x)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-6


def test_natural_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    model, data, theta = random_instance(rng)
    prep = prepare(model, data)
    nat = np.array([model.natural(theta)[k] for k in model.parameter_names])
    nb = model.spec.n_free

    def ll_nat(v):
        t = np.concatenate([v[:nb], free_from_scale(v[nb:])])
        return log_likelihood(model, t, prep)

    g = natural_gradient(model, nat, prep)
    fd = central_gradient(ll_nat, nat)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-6


def test_scores_sum_to_gradient():
    rng = np.random.default_rng(8)
    model, data, theta = random_instance(rng)
    s = scores(model, theta, data)
    assert s.shape == (len(data), model.n_free)
    assert np.allclose(s.sum(axis=0), gradient(model, theta, data), atol=1e-10)


def test_loglik_deterministic_across_thread_counts(monkeypatch):
    rng = np.random.default_rng(9)
    model, data, theta = random_instance(rng, n_obs=5000)
    results = []
    for threads in ("1", "4"):
        monkeypatch.setenv("TRAVELSHARE_THREADS", threads)
        data_ = Dataset(data.observations)  # fresh object so nothing is cached
        results.append(loglik_and_gradient(model, theta, data_))
    assert results[0][0] == results[1][0]
    assert np.array_equal(results[0][1], results[1][1])


def test_choice_probabilities_rows_sum_to_one():
    rng = np.random.default_rng(10)
    model, data, theta = random_instance(rng, n_obs=200)
    P = choice_probabilities(model, theta, prepare(model, data))
    assert np.abs(P.sum(axis=1) - 1).max() < 1e-12


def test_complete_cases():
    L = Combination.of(["L"])
    data = Dataset(
        (Observation("a", L, {"x": 1.0}), Observation("b", L, {"x": math.nan}), Observation("c", L, {}))
    )
    kept, dropped = complete_cases(data, ["x"])
    assert kept.ids == ["a"]
    assert dropped == ["b", "c"]


def test_dataset_rejects_duplicate_ids():
    L = Combination.of(["L"])
    with pytest.raises(DataError):
        Dataset((Observation("a", L), Observation("a", L)))
