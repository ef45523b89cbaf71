from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kimura_mfg.errors import InvalidInputError, UnsupportedDimensionError
from kimura_mfg.simplex import (LocalChart, as_point, build_grid, diffusion_matrix,
                                interpolation_stencil, is_interior, project_to_simplex, wf_distance)


def simplex_points(d):
    return st.lists(st.floats(0.0, 1.0), min_size=d, max_size=d).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.asarray(v) / sum(v))


def test_as_point_accepts_and_rejects():
    assert np.array_equal(as_point([0.25, 0.75]), [0.25, 0.75])
    assert as_point([-1e-15, 1.0])[0] == 0.0
    for bad in ([0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []):
        with pytest.raises(InvalidInputError):
            as_point(bad)
    assert is_interior([0.5, 0.5]) and not is_interior([0.0, 1.0])


@given(simplex_points(4), st.integers(1, 4))
def test_chart_round_trip(p, k):
    ch = LocalChart(4, k)
    p = as_point(p, tol=1e-9)
    q = ch.from_local(ch.to_local(p))
    assert np.allclose(q, p, atol=1e-15)
    assert q[k - 1] == 1.0 - np.delete(p, k - 1).sum()


def test_projection_examples():
    assert np.allclose(project_to_simplex([0.5, 0.5]), [0.5, 0.5])
    assert np.allclose(project_to_simplex([2.0, 0.0]), [1.0, 0.0])
    assert np.allclose(project_to_simplex([0.6, 0.6, 0.6]), [1 / 3] * 3)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_projection_is_nearest_point(v):
    p = project_to_simplex(v)
    assert abs(p.sum() - 1) < 1e-12 and p.min() >= 0
    # the projection beats random simplex points
    g = np.random.default_rng(0)
    Q = g.dirichlet(np.ones(3), 200)
    assert np.linalg.norm(p - v) <= np.min(np.linalg.norm(Q - np.asarray(v), axis=1)) + 1e-12


def test_wf_distance():
    assert wf_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    expected = abs(0.5 - 0.9) + abs(math.sqrt(0.75) - math.sqrt(0.19))
    assert wf_distance([0.25, 0.75], [0.81, 0.19]) == pytest.approx(expected, abs=1e-14)
    assert wf_distance([0.25, 0.75], [0.81, 0.19]) == pytest.approx(0.830, abs=1e-3)
    g = np.random.default_rng(1)
    for _ in range(1000):
        a, b, c = g.dirichlet(np.ones(3), 3)
        assert wf_distance(a, c) <= wf_distance(a, b) + wf_distance(b, c) + 1e-12


def test_diffusion_matrix():
    assert np.allclose(diffusion_matrix([0.5, 0.5], 1.0), [[0.25, -0.25], [-0.25, 0.25]])
    assert np.all(diffusion_matrix([1.0, 0.0, 0.0], 0.7) == 0)
    g = np.random.default_rng(2)
    for _ in range(200):
        p = g.dirichlet(np.ones(4))
        xi = g.standard_normal(4)
        xi -= xi.mean()
        assert xi @ diffusion_matrix(p, 0.3) @ xi > 0


def test_grids():
    g = build_grid(2, 4)
    assert g.size == 5 and np.allclose(np.sort(g.nodes[:, 0]), [0, 0.25, 0.5, 0.75, 1])
    g3 = build_grid(3, 2)
    assert g3.size == 6
    g3 = build_grid(3, 7)
    assert g3.size == 8 * 9 // 2
    assert np.allclose(g3.nodes.sum(axis=1), 1) and g3.nodes.min() >= 0
    assert np.array_equal(g3.is_boundary, np.any(g3.nodes == 0, axis=1))
    assert np.array_equal(g3.index_of(g3.lattice), np.arange(g3.size))
    with pytest.raises(UnsupportedDimensionError):
        build_grid(4, 3)


@pytest.mark.parametrize("d,n", [(2, 10), (3, 6)])
def test_interpolation_reproduces_linear_functions(d, n):
    grid = build_grid(d, n)
    X = np.random.default_rng(3).dirichlet(np.ones(d), 50)
    idx, w = interpolation_stencil(grid, X)
    assert np.allclose(w.sum(axis=1), 1) and w.min() >= -1e-12
    c = np.arange(1.0, d + 1)
    vals = grid.nodes @ c
    assert np.allclose(np.einsum("mk,mk->m", w, vals[idx]), X @ c, atol=1e-12)
