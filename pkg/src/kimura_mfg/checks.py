"""Reduced-scale acceptance cases run by ``--check``.

Each case returns rows (metric, value, tolerance); a row passes when
value <= tolerance. A config-level tolerance replaces every row's tolerance.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .coupling_lab import reflection_matrix, rotated_noise_check
from .kimura_pde import LinearKimuraProblem, solve_linear
from .master_solver import solve_master
from .model import CostFamily, ConstantRates, ModelSpec, ZeroRates
from .particle_system import ParticleEnsemble, allocate, moment_diagnostics, simulate_particles
from .simplex import build_grid
from .wf_sde import SchemeConfig, simulate

Row = tuple[str, float, float]


def quadratic_moment(eps: float, T: float, t: float, P: np.ndarray) -> np.ndarray:
    """Closed-form solution with terminal value p_0^2 and no drift."""
    p = P[:, 0]
    return p + (p**2 - p) * math.exp(-eps**2 * (T - t))


def _constant(seed: int) -> list[Row]:
    spec = ModelSpec(2, 0.2, 61 * 0.04, 0.1, 1.0, g=CostFamily("constant", {"value": 1.5}))
    sol = solve_master(spec, build_grid(2, 50), 5e-3)
    return [("sup_error", float(np.max(np.abs(sol.U - 1.5))), 1e-10)]


def _linear(seed: int) -> list[Row]:
    grid = build_grid(2, 50)
    pb = LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0])
    u = solve_linear(pb, grid, 1e-2)
    return [("sup_error", float(np.max(np.abs(u.values[0, :, 0] - grid.nodes[:, 0]))), 1e-10)]


def _quadratic(seed: int) -> list[Row]:
    rows = []
    errs = []
    for n, dt in ((50, 4e-3), (100, 2e-3)):
        grid = build_grid(2, n)
        u = solve_linear(LinearKimuraProblem(0.5, 1.0, lambda P: P[:, 0] ** 2), grid, dt)
        errs.append(float(np.max(np.abs(u.values[0, :, 0] - quadratic_moment(0.5, 1.0, 0.0, grid.nodes)))))
    rows.append(("sup_error_fine", errs[1], 1e-3))
    rows.append(("inverse_refinement_ratio", errs[1] / errs[0], 1 / 1.7))
    return rows


def _conservation(seed: int) -> list[Row]:
    spec = ModelSpec(3, 0.5, 2.0, 0.1, 0.2)
    b = simulate(spec, ZeroRates(), [0.2, 0.3, 0.5], 200, SchemeConfig(1e-3), seed)
    defect = float(np.max(np.abs(b.P.sum(axis=-1) - 1.0)))
    neg = float(max(-b.P.min(), 0.0))
    return [("sum_defect", defect, 1e-15), ("negative_part", neg, 0.0)]


def _coupling_noise(seed: int) -> list[Row]:
    r = rotated_noise_check(20000, 3, 1e-3, seed)
    g = np.random.default_rng(seed)
    inv = 0.0
    for _ in range(100):
        a, b = g.random(3), g.random(3)
        R = reflection_matrix(a, b)
        inv = max(inv, float(np.max(np.abs(R @ R - np.eye(3)))), float(np.max(np.abs(R - R.T))))
    return [("max_abs_z", r.max_abs_z, 3.0), ("antisymmetry_defect", r.antisymmetry_defect, 0.0),
            ("involution_defect", inv, 1e-12)]


def _particle_moments(seed: int) -> list[Row]:
    R = np.array([[0.0, 1.0, 2.0], [0.5, 0.0, 1.0], [2.0, 1.0, 0.0]])
    ens = ParticleEnsemble.from_positions(allocate([0.2, 0.3, 0.5], 200), 3)
    rep = moment_diagnostics(ens, ConstantRates(R), 0.3, 20000, seed)
    run = simulate_particles(ConstantRates(R), 0.5, [0.2, 0.3, 0.5], 50, 20.0, 2, seed, record_steps=[0])
    return [("max_abs_z", rep.max_abs_z, 3.0), ("mass_defect", run.mass_defect, 1e-9)]


CASES: dict[str, Callable[[int], list[Row]]] = {
    "constant_master": _constant,
    "linear_oracle": _linear,
    "quadratic_oracle": _quadratic,
    "conservation": _conservation,
    "coupling_noise": _coupling_noise,
    "particle_moments": _particle_moments,
}


def run_case(name: str, seed: int = 0, tolerance: float | None = None) -> list[dict]:
    rows = CASES[name](seed)
    out = []
    for metric, value, tol in rows:
        tol = tol if tolerance is None else tolerance
        out.append({"metric": metric, "value": value, "tolerance": tol, "passed": bool(value <= tol)})
    return out
