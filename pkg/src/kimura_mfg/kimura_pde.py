"""Backward finite differences for linear Kimura equations on the simplex.

The Wright-Fisher operator is written as a sum over coordinate pairs,

    eps^2/2 sum_{j<k} p_j p_k (d_j - d_k)^2,

and discretised with central second differences along the lattice edge
directions e_j - e_k. Because the pair coefficient vanishes as soon as p_j or
p_k does, the stencil never leaves the simplex and no boundary condition is
needed. The drift c (a zero-sum vector) is split into non-negative edge flows
w_jk = c_j^+ c_k^- / sum(c^+) and upwinded along the same directions.
The resulting matrix is the generator of a Markov chain on the lattice:
monotone, exact on quadratics, and with zero row sums.

Time marching goes backward from the terminal data, with the diffusion
implicit (one sparse factorisation reused for every step) and the drift and
source explicit.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import CFLViolation, InvalidInputError, UnsupportedDimensionError
from .model import phi
from .simplex import SimplexGrid, build_grid, interpolation_stencil, wf_distance

HOLDER_UNBOUNDED = math.inf


class EdgeStencil:
    """Neighbour tables and the implicit diffusion factorisation for one grid."""

    def __init__(self, grid: SimplexGrid):
        if grid.d not in (2, 3):
            raise UnsupportedDimensionError("grids are available for d in {2, 3}")
        self.grid = grid
        d = grid.d
        self.pairs = [(j, k) for j in range(d) for k in range(d) if j != k]
        self.nbr = {(j, k): grid.shift_index(j, k) for (j, k) in self.pairs}
        self._factor_cache: dict = {}

    # diffusion ---------------------------------------------------------------
    def diffusion_matrix(self, eps: float) -> sp.csr_matrix:
        g = self.grid
        P = g.nodes
        N = g.size
        rows, cols, vals = [], [], []
        diag = np.zeros(N)
        coef_scale = eps**2 / (2.0 * g.h**2)
        for j, k in self.pairs:
            c = coef_scale * P[:, j] * P[:, k]
            nb = self.nbr[(j, k)]
            mask = (c > 0) & (nb >= 0)
            rows.append(np.nonzero(mask)[0])
            cols.append(nb[mask])
            vals.append(c[mask])
            diag[mask] -= c[mask]
        rows.append(np.arange(N))
        cols.append(np.arange(N))
        vals.append(diag)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        )

    def implicit_solver(self, eps: float, dt: float):
        key = (float(eps), float(dt))
        if key not in self._factor_cache:
            A = sp.identity(self.grid.size, format="csc") - dt * self.diffusion_matrix(eps).tocsc()
            self._factor_cache[key] = splu(A.tocsc())
        return self._factor_cache[key]

    # drift -----------------------------------------------------------------------
    def edge_flows(self, c: np.ndarray) -> dict:
        """Non-negative flows w_jk along e_j - e_k reproducing the drift ``c`` (N, d)."""
        cp = np.maximum(c, 0.0)
        cm = np.maximum(-c, 0.0)
        S = cp.sum(axis=1)
        inv = np.divide(1.0, S, out=np.zeros_like(S), where=S > 0)
        return {(j, k): cp[:, j] * cm[:, k] * inv for (j, k) in self.pairs}

    def flow_rate(self, c: np.ndarray) -> np.ndarray:
        """Total outgoing upwind rate per node (times h): sum of flows."""
        return np.maximum(c, 0.0).sum(axis=1)

    def apply_drift(self, u: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Upwind approximation of sum_j c_j d_j u at every node; u may be (N,) or (N, m)."""
        h = self.grid.h
        out = np.zeros_like(u)
        for (j, k), w in self.edge_flows(c).items():
            nb = self.nbr[(j, k)]
            ok = (nb >= 0) & (w > 0)
            if not np.any(ok):
                continue
            idx = np.nonzero(ok)[0]
            wk = w[idx] / h
            if u.ndim == 2:
                wk = wk[:, None]
            out[idx] += wk * (u[nb[idx]] - u[idx])
        return out

    def drift_matrix(self, c: np.ndarray) -> sp.csr_matrix:
        h = self.grid.h
        N = self.grid.size
        rows, cols, vals = [], [], []
        diag = np.zeros(N)
        for (j, k), w in self.edge_flows(c).items():
            nb = self.nbr[(j, k)]
            ok = (nb >= 0) & (w > 0)
            idx = np.nonzero(ok)[0]
            rows.append(idx)
            cols.append(nb[idx])
            vals.append(w[idx] / h)
            diag[idx] -= w[idx] / h
        rows.append(np.arange(N))
        cols.append(np.arange(N))
        vals.append(diag)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        )

    def check_cfl(self, c: np.ndarray, dt: float) -> None:
        rate = float(self.flow_rate(c).max(initial=0.0))
        h = self.grid.h
        if dt * rate > h * (1.0 + 1e-12):
            suggested = 0.9 * h / rate
            raise CFLViolation(
                f"dt={dt:g} times max drift {rate:.4g} exceeds dx={h:g}; try dt <= {suggested:.3g}",
                suggested,
            )


_STENCILS: dict = {}


def stencil_for(grid: SimplexGrid) -> EdgeStencil:
    key = (grid.d, grid.n)
    if key not in _STENCILS:
        _STENCILS[key] = EdgeStencil(grid)
    return _STENCILS[key]


def assemble_local_operator(grid: SimplexGrid, eps: float, drift: np.ndarray) -> sp.csr_matrix:
    """Sparse operator u -> eps^2/2 (Kimura part) u + drift . grad u on the grid nodes.

    ``drift`` holds the zero-sum drift vector at every node, shape (N, d).
    """
    if grid.d not in (2, 3):
        raise UnsupportedDimensionError("grids are available for d in {2, 3}")
    drift = np.asarray(drift, dtype=float)
    if drift.shape != (grid.size, grid.d):
        raise InvalidInputError("drift must have shape (n_nodes, d)")
    st = stencil_for(grid)
    return (st.diffusion_matrix(eps) + st.drift_matrix(drift)).tocsr()


# ---------------------------------------------------------------------------
# fields and problems


@dataclass
class FieldOnGrid:
    """Values on a time x node x component array."""

    grid: SimplexGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.shape[:2] != (self.times.size, self.grid.size):
            raise InvalidInputError("field dimensions do not match the grid and time axis")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def at_time(self, t: float) -> np.ndarray:
        """Linear interpolation in time, shape (N, m)."""
        T = self.times[-1]
        if not -1e-12 <= t <= T + 1e-12:
            raise InvalidInputError(f"t={t} outside [0, {T}]")
        s = min(max(t / self.dt, 0.0), self.times.size - 1.0) if self.dt else 0.0
        k = min(int(math.floor(s)), self.times.size - 2) if self.times.size > 1 else 0
        f = s - k
        if self.times.size == 1:
            return self.values[0]
        return (1.0 - f) * self.values[k] + f * self.values[k + 1]

    def interpolate(self, t: float, X: np.ndarray) -> np.ndarray:
        """Values at points X (m, d) and time t, shape (m, n_components)."""
        idx, w = interpolation_stencil(self.grid, X)
        V = self.at_time(t)
        return np.einsum("mk,mkc->mc", w, V[idx])

    def to_csv(self, path, component: int = 0) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "node_id", "value"])
            for a, t in enumerate(self.times):
                for node in range(self.grid.size):
                    wr.writerow([repr(float(t)), node, repr(float(self.values[a, node, component]))])


Evaluator = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class LinearKimuraProblem:
    """Backward problem  d_t u + c . grad u + Kimura(eps) u + h = 0,  u(T) = ell,

    with drift c_j = phi(p_j) + b_j + p_j b_circ_j. ``kappa = 0`` switches the
    forcing off. Evaluators take ``(t, P)`` with P of shape (N, d) and return
    (N, d) for b, b_circ and (N,) for the source; ``ell`` takes P only.
    """

    eps: float
    T: float
    ell: Callable[[np.ndarray], np.ndarray]
    kappa: float = 0.0
    delta: float = 0.1
    b: Evaluator | None = None
    b_circ: Evaluator | None = None
    h: Evaluator | None = None
    description: dict = field(default_factory=dict)

    def drift(self, t: float, P: np.ndarray) -> np.ndarray:
        c = np.zeros_like(P)
        if self.kappa > 0:
            c = c + phi(P, self.kappa, self.delta)
        if self.b is not None:
            bb = np.asarray(self.b(t, P), dtype=float)
            if np.any(bb < -1e-14):
                raise InvalidInputError("b must be non-negative")
            c = c + bb
        if self.b_circ is not None:
            c = c + P * np.asarray(self.b_circ(t, P), dtype=float)
        defect = np.max(np.abs(c.sum(axis=1)), initial=0.0)
        if defect > 1e-10:
            raise InvalidInputError(f"drift does not sum to zero (defect {defect:.2e})")
        return c

    def source(self, t: float, P: np.ndarray) -> np.ndarray:
        if self.h is None:
            return np.zeros(P.shape[0])
        return np.asarray(self.h(t, P), dtype=float)


def time_grid(T: float, dt: float) -> np.ndarray:
    M = int(round(T / dt))
    if M < 1 or abs(M * dt - T) > 1e-12:
        raise InvalidInputError(f"dt={dt} does not divide T={T}")
    return np.linspace(0.0, T, M + 1)


def solve_linear(problem: LinearKimuraProblem, grid: SimplexGrid, dt: float) -> FieldOnGrid:
    """Backward IMEX marching; refuses with :class:`CFLViolation` if dt is too large."""
    times = time_grid(problem.T, dt)
    st = stencil_for(grid)
    solver = st.implicit_solver(problem.eps, dt)
    P = grid.nodes
    M = times.size - 1
    U = np.empty((M + 1, grid.size))
    U[M] = np.asarray(problem.ell(P), dtype=float)
    for n in range(M - 1, -1, -1):
        t = times[n]
        c = problem.drift(t, P)
        st.check_cfl(c, dt)
        rhs = U[n + 1] + dt * (st.apply_drift(U[n + 1], c) + problem.source(t, P))
        U[n] = solver.solve(rhs)
    return FieldOnGrid(grid, times, U)


# ---------------------------------------------------------------------------
# empirical regularity


@dataclass(frozen=True)
class HolderEstimate:
    exponent: float
    constant: float
    n_bins: int

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.exponent)


def holder_estimate(values, grid: SimplexGrid, n_bins: int = 20) -> HolderEstimate:
    """Log-log fit of the largest oscillation against Wright-Fisher distance.

    Pairs closer than the lattice spacing are dropped; the remaining distances
    up to half the diameter (which is 2) are binned logarithmically.
    """
    u = np.asarray(values, dtype=float).reshape(-1)
    if u.size != grid.size or not np.all(np.isfinite(u)):
        raise InvalidInputError("field must be finite with one value per node")
    S = np.sqrt(grid.nodes)
    i, j = np.triu_indices(grid.size, 1)
    dist = np.abs(S[i] - S[j]).sum(axis=1)
    osc = np.abs(u[i] - u[j])
    if osc.max(initial=0.0) == 0.0:
        return HolderEstimate(HOLDER_UNBOUNDED, 0.0, 0)
    lo, hi = grid.h, 1.0
    keep = (dist >= lo) & (dist <= hi)
    dist, osc = dist[keep], osc[keep]
    edges = np.geomspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, n_bins - 1)
    xs, ys = [], []
    for b in range(n_bins):
        m = which == b
        if np.any(m) and osc[m].max() > 0:
            xs.append(math.log(dist[m].max()))
            ys.append(math.log(osc[m].max()))
    if len(xs) < 2:
        return HolderEstimate(HOLDER_UNBOUNDED, 0.0, len(xs))
    slope, intercept = np.polyfit(xs, ys, 1)
    return HolderEstimate(float(slope), float(math.exp(intercept)), len(xs))


def write_sidecar(path, problem: LinearKimuraProblem, grid: SimplexGrid, dt: float) -> None:
    payload = {"eps": problem.eps, "T": problem.T, "kappa": problem.kappa,
               "delta": problem.delta, "d": grid.d, "n": grid.n, "dt": dt,
               "description": problem.description}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
