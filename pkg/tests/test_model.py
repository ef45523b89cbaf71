from __future__ import annotations

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kimura_mfg.errors import InvalidInputError
from kimura_mfg.model import (ConstantRates, CostFamily, FunctionRates, ModelSpec, RegimeWarning,
                              ZeroRates, coefficients_BF, coefficients_BF_all, drift_a, hamiltonian,
                              monotone_pair, optimal_rate, phi, phi_eval)


def test_phi_branches():
    assert phi_eval(0.04, 2, 0.1) == 2
    assert phi_eval(0.25, 2, 0.1) == 0
    assert phi_eval(0.15, 2, 0.1) == pytest.approx(1)
    with pytest.raises(InvalidInputError):
        phi_eval(-0.1, 2, 0.1)
    r = np.linspace(0, 1, 101)
    assert np.all(np.diff(phi(r, 3.0, 0.1)) <= 0)


def test_hamiltonian_examples():
    assert hamiltonian([0, 0, 0], 0) == 0
    assert hamiltonian([1, 0], 0) == -0.5
    assert hamiltonian([2, 1, 0], 0) == -2.5
    assert optimal_rate([1, 0], 0, 1) == 1
    assert optimal_rate([0, 1], 0, 1) == 0


def test_optimal_rate_is_brute_force_minimiser():
    g = np.random.default_rng(0)
    b = np.arange(0, 5, 1e-4)
    for _ in range(100):
        y = g.uniform(-2, 2, 3)
        i, j = g.choice(3, 2, replace=False)
        best = b[np.argmin(-b * (y[i] - y[j]) + 0.5 * b * b)]
        assert optimal_rate(y, i, j) == pytest.approx(best, abs=1e-4)


def test_spec_validation_and_warnings():
    with pytest.raises(InvalidInputError):
        ModelSpec(2, 1.0, 1.0, 0.1, 1.0)
    with pytest.raises(InvalidInputError):
        ModelSpec(2, 0.5, -1.0, 0.1, 1.0)
    with pytest.warns(RegimeWarning):
        ModelSpec(2, 0.5, 1.0, 0.3, 1.0)
    with pytest.warns(RegimeWarning):
        ModelSpec(2, 0.5, 0.01, 0.1, 1.0)
    s = ModelSpec(3, 0.1, 61 * 0.01 + 1, 0.1, 1.0)
    assert s.regime["kappa_ge_61_eps2"] and s.regime["delta_below_bound"]


def test_spec_round_trip():
    s = ModelSpec(2, 0.5, 15.25, 0.05, 1.0, g=CostFamily("anti_monotone_pair", {"gamma": 1.0}))
    t = ModelSpec.from_dict(json.loads(s.to_json()))
    assert t.to_json() == s.to_json()


def test_cost_families():
    P = np.random.default_rng(1).dirichlet(np.ones(2), 20)
    lin = monotone_pair(2.0).bind(2)
    assert np.allclose(lin(0, P), 2.0 * (P - 0.5))
    anti = CostFamily("anti_monotone_pair", {"gamma": 2.0}).bind(2)
    assert np.allclose(anti(0, P), -2.0 * (P - 0.5))
    c = CostFamily("constant", {"value": 3.0}).bind(2)
    assert np.all(c(0, P) == 3.0) and c.is_constant_symmetric()
    with pytest.raises(InvalidInputError):
        CostFamily("nope", {}).bind(2)
    with pytest.raises(InvalidInputError):
        CostFamily("anti_monotone_pair", {"gamma": 1.0}).bind(3)


def test_drift_examples():
    spec = ModelSpec(2, 0.5, 2.0, 0.1, 1.0)
    assert np.allclose(drift_a(0, [0.5, 0.5], ZeroRates(), spec), 0)
    for kappa in (0.5, 2.0, 7.0):
        s = spec.replace(kappa=kappa)
        assert drift_a(0, [0.0, 1.0], ZeroRates(), s)[0] == pytest.approx(kappa)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10**6))
def test_drift_sums_to_zero(d, seed):
    g = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        spec = ModelSpec(d, 0.3, 1.0, 0.05, 1.0)
    P = g.dirichlet(np.ones(d), 20)
    R = g.uniform(0, 3, (d, d))
    a = drift_a(g.uniform(), P, ConstantRates(R), spec)
    assert np.max(np.abs(a.sum(axis=1))) < 1e-14


def test_coefficients_examples():
    spec = ModelSpec(2, 0.5, 1.0, 0.1, 1.0)
    B, F = coefficients_BF(0.0, [0.5, 0.5], [0, 0], 0, spec)
    assert np.allclose(B, [0.125, -0.125]) and F == 0
    f1 = spec.replace(f=CostFamily("constant", {"value": 1.0}))
    g = np.random.default_rng(3)
    for _ in range(20):
        p = g.dirichlet(np.ones(2))
        _, F = coefficients_BF(0.0, p, [0.7, 0.7], 1, f1)
        assert F == pytest.approx(1.0)


def test_coefficient_rows_sum_to_zero():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        spec = ModelSpec(3, 0.4, 2.0, 0.1, 1.0)
    g = np.random.default_rng(4)
    P = g.dirichlet(np.ones(3), 1000)
    Y = g.normal(size=(1000, 3))
    B, _ = coefficients_BF_all(0.0, P, Y, spec)
    assert np.max(np.abs(B.sum(axis=-1))) < 1e-12


def test_feedback_strategies():
    with pytest.raises(InvalidInputError):
        ConstantRates([[0, -1], [1, 0]])
    fr = FunctionRates(lambda t, P: np.ones(P.shape + (P.shape[-1],)), 1.0)
    assert fr.rate(0.0, 0, [0.5, 0.5], 1) == 1.0
