"""Nonlinear master equation on the simplex grid.

Each backward step freezes the coefficients B, F at a lagged field, advances
every component with the linear Kimura stepper, and repeats until the lag
stops moving (Picard iteration). Evaluators return U, its intrinsic gradient
and the common-noise sensitivity V at arbitrary (t, p).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, PicardNonConvergence, UnsupportedDimensionError
from .kimura_pde import FieldOnGrid, stencil_for, time_grid
from .model import FeedbackStrategy, ModelSpec, coefficients_BF_all, optimal_rates
from .simplex import SimplexGrid, as_point, interpolation_stencil

INITIAL_LAGS = ("previous", "zero", "terminal")


@dataclass
class MasterSolution:
    spec: ModelSpec
    field: FieldOnGrid
    picard_counts: np.ndarray
    picard_residuals: np.ndarray
    initial_lag: str = "previous"
    _grad_cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> SimplexGrid:
        return self.field.grid

    @property
    def times(self) -> np.ndarray:
        return self.field.times

    @property
    def U(self) -> np.ndarray:
        """Array of shape (n_times, n_nodes, d)."""
        return self.field.values

    @property
    def dt(self) -> float:
        return self.field.dt

    # first differences --------------------------------------------------------
    def hat_gradient(self, k: int) -> np.ndarray:
        """Hat-chart first differences at time index k, shape (N, d, d-1).

        Central where both neighbours exist, one-sided on faces.
        """
        if k not in self._grad_cache:
            self._grad_cache[k] = hat_differences(self.grid, self.U[k])
        return self._grad_cache[k]

    def intrinsic_gradient(self, k: int) -> np.ndarray:
        """Intrinsic differences at nodes, shape (N, d, d): [node, i, j] = dd_j U^i."""
        return intrinsic_from_hat(self.hat_gradient(k))

    def _time_weights(self, t: float):
        T = self.spec.T
        if not (-1e-12 <= t <= T + 1e-12):
            raise InvalidInputError(f"t={t} outside [0, {T}]")
        M = self.times.size - 1
        s = min(max(t / self.dt, 0.0), float(M))
        k = min(int(math.floor(s)), M - 1)
        return k, s - k

    # evaluators ----------------------------------------------------------------
    def U_at(self, t: float, X) -> np.ndarray:
        """U at points X (m, d), shape (m, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k, f = self._time_weights(t)
        idx, w = interpolation_stencil(self.grid, X)
        V = (1.0 - f) * self.U[k] + f * self.U[k + 1]
        return np.einsum("mk,mkc->mc", w, V[idx])

    def intrinsic_at(self, t: float, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k, f = self._time_weights(t)
        idx, w = interpolation_stencil(self.grid, X)
        G = (1.0 - f) * self.intrinsic_gradient(k) + f * self.intrinsic_gradient(k + 1)
        return np.einsum("mk,mkab->mab", w, G[idx])

    def V_at(self, t: float, X, i: int, j: int, k: int) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G = self.intrinsic_at(t, X)
        root = np.sqrt(np.maximum(X[:, j], 0.0) * np.maximum(X[:, k], 0.0))
        return self.spec.epsilon / math.sqrt(2.0) * (G[:, i, j] - G[:, i, k]) * root

    # archive -------------------------------------------------------------------
    def spec_hash(self) -> str:
        return hashlib.sha256(self.spec.to_json().encode()).hexdigest()

    def convergence_report(self) -> dict:
        return {
            "picard_max_iterations": int(self.picard_counts.max(initial=0)),
            "picard_mean_iterations": float(self.picard_counts.mean()) if self.picard_counts.size else 0.0,
            "picard_final_max_change": float(self.picard_residuals.max(initial=0.0)),
            "initial_lag": self.initial_lag,
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i in range(self.spec.d):
            p = out / f"U_{i + 1}.csv"
            self.field.to_csv(p, component=i)
            files.append(p)
        meta = out / "master_solution.json"
        meta.write_text(json.dumps({
            "spec": self.spec.to_dict(), "spec_sha256": self.spec_hash(),
            "grid": {"d": self.grid.d, "n": self.grid.n}, "dt": self.dt,
            "convergence": self.convergence_report(),
        }, indent=2, sort_keys=True))
        files.append(meta)
        return files


def hat_differences(grid: SimplexGrid, U: np.ndarray) -> np.ndarray:
    """First differences of nodal values U (N, c) along hat axes, shape (N, c, d-1)."""
    st = stencil_for(grid)
    d, h = grid.d, grid.h
    out = np.zeros((grid.size, U.shape[1], d - 1))
    for j in range(d - 1):
        fwd = st.nbr[(j, d - 1)]
        bwd = st.nbr[(d - 1, j)]
        hf, hb = fwd >= 0, bwd >= 0
        both = hf & hb
        D = np.zeros((grid.size, U.shape[1]))
        D[both] = (U[fwd[both]] - U[bwd[both]]) / (2 * h)
        only_f = hf & ~hb
        D[only_f] = (U[fwd[only_f]] - U[only_f]) / h
        only_b = hb & ~hf
        D[only_b] = (U[only_b] - U[bwd[only_b]]) / h
        out[:, :, j] = D
    return out


def intrinsic_from_hat(G: np.ndarray) -> np.ndarray:
    """Map hat derivatives (.., c, d-1) to intrinsic ones (.., c, d) summing to zero."""
    full = np.concatenate([G, np.zeros(G.shape[:-1] + (1,))], axis=-1)
    return full - full.mean(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# solver


def solve_master(spec: ModelSpec, grid: SimplexGrid, dt: float, picard_tol: float = 1e-9,
                 picard_max: int = 50, initial_lag: str = "previous") -> MasterSolution:
    """Backward Picard-lagged solve; see module docstring.

    ``initial_lag`` picks the first lag of every step: the field one step later
    ("previous"), zero, or the terminal cost.
    """
    if grid.d not in (2, 3):
        raise UnsupportedDimensionError("master solver grids exist for d in {2, 3}")
    if grid.d != spec.d:
        raise InvalidInputError("grid and model dimensions differ")
    if initial_lag not in INITIAL_LAGS:
        raise InvalidInputError(f"initial_lag must be one of {INITIAL_LAGS}")
    times = time_grid(spec.T, dt)
    M = times.size - 1
    st = stencil_for(grid)
    solver = st.implicit_solver(spec.epsilon, dt)
    P = grid.nodes
    d = spec.d
    U = np.empty((M + 1, grid.size, d))
    U[M] = spec.terminal_cost(P)
    g_nodes = U[M].copy()
    counts = np.zeros(M, dtype=np.int64)
    final_change = np.zeros(M)
    for n in range(M - 1, -1, -1):
        t = times[n]
        nxt = U[n + 1]
        if initial_lag == "previous":
            lag = nxt.copy()
        elif initial_lag == "zero":
            lag = np.zeros_like(nxt)
        else:
            lag = g_nodes.copy()
        history = []
        for it in range(1, picard_max + 1):
            B, F = coefficients_BF_all(t, P, lag, spec)
            rhs = np.empty_like(nxt)
            for i in range(d):
                c = B[:, i, :]
                st.check_cfl(c, dt)
                rhs[:, i] = nxt[:, i] + dt * (st.apply_drift(nxt[:, i], c) + F[:, i])
            new = solver.solve(rhs)
            change = float(np.max(np.abs(new - lag)))
            history.append(change)
            lag = new
            if change < picard_tol:
                break
        else:
            raise PicardNonConvergence(
                f"Picard iteration did not reach {picard_tol:g} at t={t:.6g} "
                f"after {picard_max} sweeps", history)
        U[n] = lag
        counts[n] = it
        final_change[n] = history[-1]
    return MasterSolution(spec, FieldOnGrid(grid, times, U), counts, final_change, initial_lag)


# ---------------------------------------------------------------------------
# point evaluators


def eval_U(sol: MasterSolution, t: float, p) -> np.ndarray:
    p = as_point(p)
    return sol.U_at(t, p[None, :])[0]


def eval_V(sol: MasterSolution, t: float, p, i: int, j: int, k: int) -> float:
    """Common-noise sensitivity for component i and coordinate pair (j, k), 0-based."""
    if j == k:
        raise InvalidInputError("eval_V needs j != k")
    p = as_point(p)
    return float(sol.V_at(t, p[None, :], i, j, k)[0])


class MasterFeedback(FeedbackStrategy):
    """Equilibrium rates (U^i - U^j)_+ read from a master solution."""

    def __init__(self, sol: MasterSolution):
        self.sol = sol
        self.sup_norm = 2.0 * float(np.max(np.abs(sol.U)))

    def rates(self, t, P):
        P = np.asarray(P, dtype=float)
        flat = P.reshape(-1, P.shape[-1])
        R = optimal_rates(self.sol.U_at(min(t, self.sol.spec.T), flat))
        return R.reshape(P.shape + (P.shape[-1],))


# ---------------------------------------------------------------------------
# residual


@dataclass(frozen=True)
class ResidualReport:
    values: np.ndarray          # (n_steps, n_interior, d)
    interior_nodes: np.ndarray
    sup: float
    mean: float

    def to_dict(self) -> dict:
        return {"sup": self.sup, "mean": self.mean, "n_interior": int(self.interior_nodes.size)}


def residual(sol: MasterSolution) -> ResidualReport:
    """Residual of the master equation at interior nodes and time midpoints.

    Uses second-order central differences in space and time, independent of
    the upwind stencil used by the solver, so it measures truncation error.
    """
    grid, spec = sol.grid, sol.spec
    st = stencil_for(grid)
    d, h, dt = grid.d, grid.h, sol.dt
    P = grid.nodes
    interior = np.nonzero(~grid.is_boundary)[0]
    Pi = P[interior]
    out = np.empty((sol.times.size - 1, interior.size, d))
    e2 = spec.epsilon**2
    for n in range(sol.times.size - 1):
        Umid = 0.5 * (sol.U[n] + sol.U[n + 1])
        dU = (sol.U[n + 1] - sol.U[n]) / dt
        tm = sol.times[n] + 0.5 * dt
        B, F = coefficients_BF_all(tm, Pi, Umid[interior], spec)
        grad = hat_differences(grid, Umid)[interior]          # (m, d, d-1)
        transport = np.einsum("mij,mij->mi", B[:, :, : d - 1], grad)
        second = np.zeros((interior.size, d))
        for j in range(d):
            for k in range(j + 1, d):
                fw = st.nbr[(j, k)][interior]
                bw = st.nbr[(k, j)][interior]
                coef = 0.5 * e2 * Pi[:, j] * Pi[:, k] / h**2
                second += coef[:, None] * (Umid[fw] - 2 * Umid[interior] + Umid[bw])
        out[n] = dU[interior] + F + transport + second
    a = np.abs(out)
    return ResidualReport(out, interior, float(a.max(initial=0.0)), float(a.mean()) if a.size else 0.0)
