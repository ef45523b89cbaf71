"""Problem instances: forcing, Hamiltonian, drifts, master-equation coefficients.

Everything here is vectorised over a leading batch axis: points are arrays of
shape ``(..., d)`` and rate matrices have shape ``(..., d, d)`` with entry
``[i, j]`` the jump rate from state i to state j (diagonal ignored).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .simplex import as_point, build_grid, interpolation_stencil


class RegimeWarning(UserWarning):
    """Parameters fall outside the regime where the theory applies."""


# ---------------------------------------------------------------------------
# forcing and Hamiltonian


def phi_eval(r: float, kappa: float, delta: float) -> float:
    """Boundary forcing: kappa below delta, zero above 2 delta, linear in between."""
    if kappa <= 0 or delta <= 0:
        raise InvalidInputError("kappa and delta must be positive")
    if not np.isfinite(r) or r < 0:
        raise InvalidInputError(f"forcing argument must be >= 0, got {r}")
    return float(phi(np.asarray(r, dtype=float), kappa, delta))


def phi(r: np.ndarray, kappa: float, delta: float) -> np.ndarray:
    """Vectorised forcing; negative arguments are treated as 0."""
    r = np.asarray(r, dtype=float)
    ramp = kappa * (2.0 * delta - r) / delta
    return np.where(r <= delta, kappa, np.where(r > 2.0 * delta, 0.0, ramp))


def hamiltonian(y, i: int) -> float:
    """-1/2 sum_j (y_i - y_j)_+^2 for a 0-based state index ``i``."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("y must be finite")
    return float(hamiltonians(y)[i])


def hamiltonians(Y: np.ndarray) -> np.ndarray:
    """All Hamiltonians at once: output[..., i] = H^i(Y[..., :])."""
    diff = np.maximum(Y[..., :, None] - Y[..., None, :], 0.0)
    return -0.5 * np.sum(diff * diff, axis=-1)


def optimal_rate(y, i: int, j: int) -> float:
    """Optimal jump rate (y_i - y_j)_+ from i to j (0-based)."""
    if i == j:
        raise InvalidInputError("optimal_rate needs i != j")
    y = np.asarray(y, dtype=float)
    return float(max(y[i] - y[j], 0.0))


def optimal_rates(Y: np.ndarray) -> np.ndarray:
    """Rate matrices (Y_i - Y_j)_+ with zero diagonal, shape (..., d, d)."""
    return np.maximum(Y[..., :, None] - Y[..., None, :], 0.0)


# ---------------------------------------------------------------------------
# cost families

COST_KINDS = ("constant", "linear", "quadratic", "anti_monotone_pair", "tabulated")


def _state_vector(value, d: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise InvalidInputError(f"{name} must be a scalar or a length-{d} list")
    return arr


def _state_matrix(value, d: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros((d, d))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (d, d):
        raise InvalidInputError(f"{name} must be a {d}x{d} matrix")
    return arr


@dataclass(frozen=True)
class CostFamily:
    """Closed registry of cost functions c^i(t, p), evaluated for all i at once.

    kinds and parameters:
      constant            value (scalar or per state)
      linear              offset, matrix A:        offset_i + (A p)_i
      quadratic           offset, matrix A, quad Q: offset_i + (A p)_i + (Q p**2)_i
      anti_monotone_pair  gamma, center (0.5):     -gamma (p_i - center), d = 2
      tabulated           n, values (node x state) on ``build_grid(d, n)``,
                          piecewise-linear between nodes
    """

    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, data: dict) -> "CostFamily":
        if not isinstance(data, dict) or "kind" not in data:
            raise InvalidInputError("cost family needs a 'kind'")
        return cls(kind=data["kind"], params=dict(data.get("params", {})))

    def bind(self, d: int) -> "BoundCost":
        return BoundCost(self, d)


class BoundCost:
    """A cost family checked against a dimension and ready for evaluation."""

    def __init__(self, family: CostFamily, d: int):
        kind, prm = family.kind, family.params
        if kind not in COST_KINDS:
            raise InvalidInputError(f"unknown cost kind {kind!r}; known: {COST_KINDS}")
        self.family, self.d, self.kind = family, d, kind
        if kind == "constant":
            self.offset = _state_vector(prm.get("value", 0.0), d, "value")
        elif kind in ("linear", "quadratic"):
            self.offset = _state_vector(prm.get("offset", 0.0), d, "offset")
            self.A = _state_matrix(prm.get("matrix"), d, "matrix")
            self.Q = _state_matrix(prm.get("quad"), d, "quad") if kind == "quadratic" else None
        elif kind == "anti_monotone_pair":
            if d != 2:
                raise InvalidInputError("anti_monotone_pair is defined for d = 2")
            gamma = float(prm.get("gamma", 1.0))
            if gamma <= 0:
                raise InvalidInputError("gamma must be positive")
            center = float(prm.get("center", 0.5))
            self.offset = np.full(d, gamma * center)
            self.A = -gamma * np.eye(d)
            self.Q = None
        else:
            n = int(prm.get("n", 0))
            self.grid = build_grid(d, n)
            vals = np.asarray(prm.get("values"), dtype=float)
            if vals.shape != (self.grid.size, d):
                raise InvalidInputError(
                    f"tabulated values must have shape ({self.grid.size}, {d})"
                )
            if not np.all(np.isfinite(vals)):
                raise InvalidInputError("tabulated values must be finite")
            self.values = vals
        vals = self._bound_values()
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("cost parameters must be finite")

    def _bound_values(self) -> np.ndarray:
        if self.kind == "tabulated":
            return self.values
        return np.atleast_1d(self.offset)

    def __call__(self, t, P: np.ndarray) -> np.ndarray:
        """Values for every state, shape (..., d)."""
        P = np.asarray(P, dtype=float)
        if self.kind == "constant":
            return np.broadcast_to(self.offset, P.shape).copy()
        if self.kind == "tabulated":
            flat = P.reshape(-1, self.d)
            idx, w = interpolation_stencil(self.grid, flat)
            out = np.einsum("mk,mkd->md", w, self.values[idx])
            return out.reshape(P.shape)
        out = self.offset + P @ self.A.T
        if self.Q is not None:
            out = out + (P * P) @ self.Q.T
        return out

    def sup_norm(self) -> float:
        """Upper bound for |c^i(t, p)| over the simplex."""
        if self.kind == "constant":
            return float(np.max(np.abs(self.offset)))
        if self.kind == "tabulated":
            return float(np.max(np.abs(self.values)))
        # affine and quadratic parts are maximised at vertices only for the
        # affine part; bound the quadratic part crudely
        bound = np.abs(self.offset) + np.max(np.abs(self.A), axis=1)
        if self.Q is not None:
            bound = bound + np.max(np.abs(self.Q), axis=1)
        return float(np.max(bound))

    def is_constant_symmetric(self) -> bool:
        return self.kind == "constant" and bool(np.all(self.offset == self.offset[0]))


def monotone_pair(gamma: float, center: float = 0.5) -> CostFamily:
    """g^i(p) = gamma (p_i - center): a cost satisfying the monotonicity condition."""
    return CostFamily("linear", {"offset": -gamma * center, "matrix": (gamma * np.eye(2)).tolist()})


# ---------------------------------------------------------------------------
# feedback strategies


class FeedbackStrategy:
    """Jump-rate feedback alpha(t, i, p)(j); ``rates`` returns (..., d, d) arrays."""

    sup_norm: float = 0.0

    def rates(self, t, P: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def rate(self, t, i: int, p, j: int) -> float:
        """Scalar access with 0-based states."""
        if i == j:
            raise InvalidInputError("diagonal rate is fixed by the zero row sum")
        return float(self.rates(t, np.asarray(p, dtype=float)[None, :])[0, i, j])


class ZeroRates(FeedbackStrategy):
    sup_norm = 0.0

    def rates(self, t, P):
        P = np.asarray(P)
        return np.zeros(P.shape + (P.shape[-1],))


class ConstantRates(FeedbackStrategy):
    def __init__(self, matrix):
        M = np.array(matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InvalidInputError("rate matrix must be square")
        np.fill_diagonal(M, 0.0)
        if np.any(M < 0) or not np.all(np.isfinite(M)):
            raise InvalidInputError("rates must be finite and non-negative")
        self.matrix = M
        self.sup_norm = float(M.max(initial=0.0))

    def rates(self, t, P):
        P = np.asarray(P)
        return np.broadcast_to(self.matrix, P.shape[:-1] + self.matrix.shape).copy()


class FunctionRates(FeedbackStrategy):
    """Wraps ``fn(t, P) -> (..., d, d)``; negative entries and the diagonal are zeroed."""

    def __init__(self, fn: Callable, sup_norm: float):
        self.fn = fn
        self.sup_norm = float(sup_norm)

    def rates(self, t, P):
        R = np.array(self.fn(t, np.asarray(P, dtype=float)), dtype=float)
        R = np.maximum(R, 0.0)
        d = R.shape[-1]
        R[..., np.arange(d), np.arange(d)] = 0.0
        return R


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    d: int
    epsilon: float
    kappa: float
    delta: float
    T: float
    f: CostFamily = field(default_factory=lambda: CostFamily("constant", {"value": 0.0}))
    g: CostFamily = field(default_factory=lambda: CostFamily("constant", {"value": 0.0}))

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidInputError("d must be an integer >= 2")
        for name in ("epsilon", "kappa", "delta", "T"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise InvalidInputError(f"{name} must be a finite number")
        if not 0 <= self.epsilon < 1:
            raise InvalidInputError("epsilon must lie in [0, 1)")
        if self.kappa <= 0 or self.delta <= 0 or self.T <= 0:
            raise InvalidInputError("kappa, delta and T must be positive")
        object.__setattr__(self, "_f", self.f.bind(self.d))
        object.__setattr__(self, "_g", self.g.bind(self.d))
        if self.delta >= 1.0 / (4.0 * math.sqrt(self.d)):
            warnings.warn(
                f"delta={self.delta} is not below 1/(4 sqrt d)", RegimeWarning, stacklevel=3
            )
        if self.kappa < self.epsilon**2 / 2:
            warnings.warn("kappa < epsilon^2/2: boundary may be reached", RegimeWarning, stacklevel=3)

    # regime flags -----------------------------------------------------------
    @property
    def regime(self) -> dict:
        e2 = self.epsilon**2
        return {
            "kappa_ge_half_eps2": self.kappa >= e2 / 2,
            "kappa_ge_61_eps2": self.kappa >= 61 * e2,
            "kappa_ge_61_plus_d_eps2": self.kappa >= (61 + self.d) * e2,
            "delta_below_bound": self.delta < 1.0 / (4.0 * math.sqrt(self.d)),
        }

    # cost access --------------------------------------------------------------
    def running_cost(self, t, P) -> np.ndarray:
        return self._f(t, P)

    def terminal_cost(self, P) -> np.ndarray:
        return self._g(0.0, P)

    def cost_bound(self) -> float:
        """||g||_inf + T ||f||_inf."""
        return self._g.sup_norm() + self.T * self._f.sup_norm()

    def phi(self, P) -> np.ndarray:
        return phi(np.maximum(P, 0.0), self.kappa, self.delta)

    def replace(self, **changes) -> "ModelSpec":
        data = dict(d=self.d, epsilon=self.epsilon, kappa=self.kappa, delta=self.delta,
                    T=self.T, f=self.f, g=self.g)
        data.update(changes)
        return ModelSpec(**data)

    # serialisation --------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d, "epsilon": self.epsilon, "kappa": self.kappa,
            "delta": self.delta, "T": self.T,
            "f": self.f.to_dict(), "g": self.g.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        if not isinstance(data, dict):
            raise InvalidInputError("model must be a JSON object")
        missing = {"d", "epsilon", "kappa", "delta", "T"} - set(data)
        if missing:
            raise InvalidInputError(f"model is missing keys {sorted(missing)}")
        zero = {"kind": "constant", "params": {"value": 0.0}}
        return cls(
            d=int(data["d"]), epsilon=float(data["epsilon"]), kappa=float(data["kappa"]),
            delta=float(data["delta"]), T=float(data["T"]),
            f=CostFamily.from_dict(data.get("f", zero)),
            g=CostFamily.from_dict(data.get("g", zero)),
        )


# ---------------------------------------------------------------------------
# drifts and master-equation coefficients


def kolmogorov_drift(P: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Forward Kolmogorov drift sum_j (P_j R_ji - P_i R_ij).

    The net flux matrix is antisymmetric entry by entry, so pairwise
    contributions cancel exactly.
    """
    flow = P[..., :, None] * R
    net = np.swapaxes(flow, -1, -2) - flow
    d = P.shape[-1]
    net[..., np.arange(d), np.arange(d)] = 0.0
    return net.sum(axis=-1)


def forced_rates(spec: ModelSpec, P: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Add the forcing phi(p_j) to every rate i -> j."""
    out = R + spec.phi(P)[..., None, :]
    d = P.shape[-1]
    out[..., np.arange(d), np.arange(d)] = 0.0
    return out


def drift_a(t, p, alpha: FeedbackStrategy, spec: ModelSpec) -> np.ndarray:
    """Drift of the population: forcing plus controlled jumps.

    ``p`` may be a single point or an (n, d) batch.
    """
    P = np.asarray(p, dtype=float)
    if P.ndim == 1:
        P = as_point(P)
    return kolmogorov_drift(P, forced_rates(spec, P, alpha.rates(t, P)))


def coefficients_BF_all(t, P: np.ndarray, Y: np.ndarray, spec: ModelSpec):
    """Coefficients for every component at once.

    Returns ``(B, F)`` with ``B[..., i, j] = B^i_j`` and ``F[..., i] = F^i``.
    The part of B^i that does not depend on i is the population drift under
    the feedback (y_k - y_j)_+, so rows sum to zero.
    """
    P = np.asarray(P, dtype=float)
    Y = np.asarray(Y, dtype=float)
    d = P.shape[-1]
    fphi = spec.phi(P)
    common = kolmogorov_drift(P, forced_rates(spec, P, optimal_rates(Y)))
    e2 = spec.epsilon**2
    B = common[..., None, :] + e2 * (np.eye(d) - P[..., None, :])
    coupling = np.sum(fphi * Y, axis=-1)[..., None] - np.sum(fphi, axis=-1)[..., None] * Y
    F = hamiltonians(Y) + spec.running_cost(t, P) + coupling
    return B, F


def coefficients_BF(t, p, y, i: int, spec: ModelSpec):
    """Row B^i (length d) and scalar F^i at a single point, 0-based ``i``."""
    p = as_point(p)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("y must be finite")
    B, F = coefficients_BF_all(t, p[None, :], y[None, :], spec)
    return B[0, i].copy(), float(F[0, i])
