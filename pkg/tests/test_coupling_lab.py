from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kimura_mfg.coupling_lab import (ConditioningState, CoupledState, default_drift, reflect_pairs,
                                     reflection_matrix, rotated_noise_check, sigma_eval, step_coupled,
                                     step_split)
from kimura_mfg.errors import InvalidInputError
from kimura_mfg.model import ModelSpec, ZeroRates
from kimura_mfg.wf_sde import draw_increments, pairs_from_matrix, step_P_batch


def test_sigma_and_chart():
    assert sigma_eval([]) == 1.0 and sigma_eval([0.75]) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        sigma_eval([0.7, 0.5])
    c = ConditioningState.from_point([0.2, 0.3, 0.5], 1)
    assert np.allclose(c.p, [0.375, 0.625]) and np.allclose(c.to_point(), [0.2, 0.3, 0.5])


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.integers(2, 5))
def test_reflection_identities(seed, k):
    g = np.random.default_rng(seed)
    a, b = g.random(k), g.random(k)
    R = reflection_matrix(a, b)
    assert np.max(np.abs(R @ R - np.eye(k))) < 1e-12
    assert np.max(np.abs(R - R.T)) < 1e-15
    # R maps Z to -Z
    assert np.allclose(R @ (a - b), b - a)
    W = draw_increments(k, 1.0, g)
    z = (a - b) / np.linalg.norm(a - b)
    Wr = reflect_pairs(pairs_from_matrix(W)[None], z[None], k)[0]
    assert np.allclose(Wr, pairs_from_matrix(R @ W @ R), atol=1e-12)


def test_split_with_empty_block_matches_direct_step():
    spec = ModelSpec(3, 0.5, 2.0, 0.1, 1.0)
    g = np.random.default_rng(0)
    P = g.dirichlet(np.ones(3), 10)
    dWp = g.standard_normal((10, 3)) * 0.03
    Pc, Ps = step_split(np.zeros((10, 0)), P, 0.0, 1e-3, dWp, 0.5, default_drift(spec), 0)
    direct, _ = step_P_batch(P, 0.0, dWp, ZeroRates(), spec, 1e-3)
    assert Pc.shape == (10, 0) and np.allclose(Ps, direct, atol=1e-14)


def test_equal_starts_stay_glued():
    spec = ModelSpec(3, 0.5, 2.0, 0.14, 1.0)
    s = CoupledState.start(1, [0.3], [0.5, 0.5], [0.3], [0.5, 0.5], n_paths=4, delta=spec.delta)
    g = np.random.default_rng(1)
    for _ in range(50):
        s = step_coupled(s, 1e-3, draw_increments(3, 1e-3, g), draw_increments(3, 1e-3, g), spec)
    assert np.all(s.Z == 0) and np.array_equal(s.P_circ, s.Q_circ)


def test_reflected_copy_mirrors_noise():
    # without drift or conditioning, equal-norm starts see mirrored increments
    spec = ModelSpec(3, 0.5, 2.0, 0.14, 1.0)
    zero = lambda t, X: np.zeros_like(X)
    s = CoupledState.start(0, [], [0.3, 0.3, 0.4], [], [0.3, 0.4, 0.3], delta=spec.delta)
    dW = draw_increments(3, 1e-6, np.random.default_rng(2))
    out = step_coupled(s, 1e-6, dW, dW, spec, zero)
    dp, dq = out.P[0] - s.P[0], out.Q[0] - s.Q[0]
    assert np.all(np.isfinite(dp)) and abs(dq.sum()) < 1e-15 and not np.allclose(dp, dq)


def test_rotated_noise_is_standard():
    r = rotated_noise_check(20000, 3, 1e-3, 0)
    assert r.max_abs_z < 4 and r.antisymmetry_defect == 0
