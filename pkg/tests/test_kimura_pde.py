from __future__ import annotations

import numpy as np
import pytest

from kimura_mfg.checks import quadratic_moment
from kimura_mfg.errors import CFLViolation, InvalidInputError
from kimura_mfg.kimura_pde import LinearKimuraProblem, holder_estimate, solve_linear, stencil_for
from kimura_mfg.model import phi
from kimura_mfg.simplex import build_grid


@pytest.mark.parametrize("d,n", [(2, 30), (3, 10)])
def test_diffusion_matrix_annihilates_affine(d, n):
    grid = build_grid(d, n)
    A = stencil_for(grid).diffusion_matrix(0.7)
    assert np.max(np.abs(A @ np.ones(grid.size))) < 1e-12
    assert np.max(np.abs(A @ grid.nodes[:, 0])) < 1e-12


def test_linear_oracle():
    grid = build_grid(2, 50)
    u = solve_linear(LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0]), grid, 1e-2)
    assert np.max(np.abs(u.values[0, :, 0] - grid.nodes[:, 0])) < 1e-12


def test_quadratic_oracle_converges():
    errs = []
    for n, dt in ((25, 8e-3), (50, 4e-3)):
        grid = build_grid(2, n)
        u = solve_linear(LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0] ** 2), grid, dt)
        errs.append(np.max(np.abs(u.values[0, :, 0] - quadratic_moment(0.5, 1.0, 0.0, grid.nodes))))
    assert errs[1] < errs[0] / 1.7


def test_max_principle_with_forcing():
    grid = build_grid(3, 12)
    comp = lambda t, P: -np.repeat(phi(P, 2.0, 0.1).sum(axis=1, keepdims=True), P.shape[1], axis=1)
    pb = LinearKimuraProblem(0.4, 0.5, lambda P: np.sin(5 * P[:, 0]), kappa=2.0, delta=0.1, b_circ=comp)
    u = solve_linear(pb, grid, 1e-3)
    ell = np.sin(5 * grid.nodes[:, 0])
    assert u.values.max() <= ell.max() + 1e-12 and u.values.min() >= ell.min() - 1e-12


def test_cfl_refusal_and_bad_drift():
    grid = build_grid(2, 100)
    with pytest.raises(CFLViolation):
        comp = lambda t, P: -np.repeat(phi(P, 50.0, 0.1).sum(axis=1, keepdims=True), 2, axis=1)
        solve_linear(LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0], kappa=50.0, b_circ=comp), grid, 0.1)
    with pytest.raises(InvalidInputError):
        solve_linear(LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0], b=lambda t, P: P), grid, 0.1)


def test_holder_estimate_on_smooth_field():
    grid = build_grid(2, 100)
    h = holder_estimate(grid.nodes[:, 0], grid)
    assert not h.unbounded and h.exponent > 0.9
