"""Geometry of the probability simplex.

Validation of probability vectors, the local chart that drops one coordinate,
Euclidean projection, the Wright-Fisher distance, the degenerate diffusion
matrix, and lattice grids for d = 2 and d = 3.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, UnsupportedDimensionError

SUM_TOL = 1e-12
CLIP_TOL = 1e-14


def as_point(p, tol: float = SUM_TOL) -> np.ndarray:
    """Validate ``p`` as a simplex point and return it as a float array.

    Entries in ``[-1e-14, 0)`` are treated as roundoff and set to zero.
    """
    arr = np.array(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("a simplex point must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("simplex point has non-finite entries")
    if np.any(arr < -CLIP_TOL):
        raise InvalidInputError(f"negative weight {arr.min():.3e}")
    arr[arr < 0] = 0.0
    if abs(arr.sum() - 1.0) > tol:
        raise InvalidInputError(f"weights sum to {arr.sum():.15g}, not 1")
    return arr


def as_points(P, tol: float = SUM_TOL) -> np.ndarray:
    """Row-wise version of :func:`as_point` for an ``(n, d)`` array."""
    arr = np.array(P, dtype=float)
    if arr.ndim != 2:
        raise InvalidInputError("expected an (n, d) array of simplex points")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("non-finite entries")
    if np.any(arr < -CLIP_TOL):
        raise InvalidInputError("negative weights")
    arr[arr < 0] = 0.0
    if arr.size and np.max(np.abs(arr.sum(axis=1) - 1.0)) > tol:
        raise InvalidInputError("rows do not sum to 1")
    return arr


def is_interior(p) -> bool:
    return bool(np.all(as_point(p) > 0))


@dataclass(frozen=True)
class LocalChart:
    """Chart dropping coordinate ``dropped_index`` (1-based)."""

    d: int
    dropped_index: int

    def __post_init__(self):
        if self.d < 2 or not 1 <= self.dropped_index <= self.d:
            raise InvalidInputError("dropped_index must lie in 1..d")

    def to_local(self, p) -> np.ndarray:
        arr = as_point(p)
        if arr.size != self.d:
            raise InvalidInputError("dimension mismatch")
        return np.delete(arr, self.dropped_index - 1)

    def from_local(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d - 1,):
            raise InvalidInputError("dimension mismatch")
        return np.insert(x, self.dropped_index - 1, 1.0 - x.sum())


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the simplex (sort-and-threshold algorithm)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("expected a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("cannot project a non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def wf_distance(p, q) -> float:
    """Sum of absolute differences of square roots."""
    p, q = as_point(p), as_point(q)
    if p.shape != q.shape:
        raise InvalidInputError("dimension mismatch")
    return float(np.abs(np.sqrt(p) - np.sqrt(q)).sum())


def diffusion_matrix(p, eps: float) -> np.ndarray:
    """Matrix with entries eps^2 (p_i delta_ij - p_i p_j)."""
    p = as_point(p)
    return eps**2 * (np.diag(p) - np.outer(p, p))


@dataclass(frozen=True)
class SimplexGrid:
    """Lattice {k/n} on the simplex for d in {2, 3}.

    ``lattice`` holds integer coordinates (summing to n) and ``nodes`` the
    corresponding points. Nodes are ordered lexicographically in the chart
    that drops the last coordinate.
    """

    d: int
    n: int
    lattice: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    is_boundary: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def hat(self) -> np.ndarray:
        return self.nodes[:, :-1]

    def index_of(self, lattice_rows) -> np.ndarray:
        """Node indices of integer lattice rows; -1 for rows outside the simplex."""
        K = np.atleast_2d(np.asarray(lattice_rows, dtype=np.int64))
        n = self.n
        valid = np.all(K >= 0, axis=1) & (K.sum(axis=1) == n)
        if self.d == 2:
            idx = K[:, 0].copy()
        else:
            k1, k2 = K[:, 0], K[:, 1]
            idx = k1 * (n + 1) - (k1 * (k1 - 1)) // 2 + k2
        return np.where(valid, idx, -1)

    def shift_index(self, j: int, k: int) -> np.ndarray:
        """Index of node + (e_j - e_k)/n for every node (0-based j, k), or -1."""
        K = self.lattice.copy()
        K[:, j] += 1
        K[:, k] -= 1
        return self.index_of(K)

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id"] + [f"p_{i + 1}" for i in range(self.d)] + ["is_boundary"])
            for k in range(self.size):
                w.writerow([k] + [repr(float(x)) for x in self.nodes[k]] + [int(self.is_boundary[k])])


def build_grid(d: int, n: int) -> SimplexGrid:
    if d not in (2, 3):
        raise UnsupportedDimensionError(f"grids are available for d in {{2, 3}}, got {d}")
    if int(n) != n or n < 2:
        raise InvalidInputError("grid resolution n must be an integer >= 2")
    n = int(n)
    if d == 2:
        k1 = np.arange(n + 1)
        lattice = np.stack([k1, n - k1], axis=1)
    else:
        rows = [(a, b, n - a - b) for a in range(n + 1) for b in range(n + 1 - a)]
        lattice = np.array(rows, dtype=np.int64)
    nodes = lattice / float(n)
    is_boundary = np.any(lattice == 0, axis=1)
    for arr in (lattice, nodes, is_boundary):
        arr.setflags(write=False)
    return SimplexGrid(d=d, n=n, lattice=lattice, nodes=nodes, is_boundary=is_boundary)


def interpolation_stencil(grid: SimplexGrid, X) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear interpolation data for points ``X`` of shape (m, d).

    Returns node indices and weights, both of shape (m, d): linear on
    segments for d = 2 and on the Kuhn triangulation of the lattice for d = 3.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = grid.n
    x = np.clip(X[:, : grid.d - 1] * n, 0.0, n)
    if grid.d == 2:
        i0 = np.minimum(np.floor(x[:, 0]).astype(np.int64), n - 1)
        f = x[:, 0] - i0
        idx = np.stack([i0, i0 + 1], axis=1)
        w = np.stack([1.0 - f, f], axis=1)
        return idx, w
    # d == 3: keep the point inside the triangle x + y <= n
    s = x.sum(axis=1)
    over = s > n
    if np.any(over):
        x[over] *= (n / s[over])[:, None]
    i0 = np.minimum(np.floor(x[:, 0]).astype(np.int64), n - 1)
    j0 = np.minimum(np.floor(x[:, 1]).astype(np.int64), n - 1 - i0)
    j0 = np.maximum(j0, 0)
    fx = x[:, 0] - i0
    fy = x[:, 1] - j0
    upper = (fx + fy > 1.0) & (i0 + j0 + 2 <= n)
    a = np.stack([i0, j0, n - i0 - j0], axis=1)
    b = np.stack([i0 + 1, j0, n - i0 - j0 - 1], axis=1)
    c = np.stack([i0, j0 + 1, n - i0 - j0 - 1], axis=1)
    e = np.stack([i0 + 1, j0 + 1, n - i0 - j0 - 2], axis=1)
    lower_w = np.stack([1.0 - fx - fy, fx, fy], axis=1)
    upper_w = np.stack([fx + fy - 1.0, 1.0 - fy, 1.0 - fx], axis=1)
    first = np.where(upper[:, None], e, a)
    idx = np.stack(
        [grid.index_of(first), grid.index_of(b), grid.index_of(c)], axis=1
    )
    w = np.where(upper[:, None], upper_w, lower_w)
    return idx, w
