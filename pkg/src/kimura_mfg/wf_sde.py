"""Euler simulation of the forced Wright-Fisher population and the tagged mass.

The population P evolves on the simplex under jump rates phi(p_j) + alpha(i -> j)
and antisymmetric common noise. The conditional mass Q of a tagged player uses
the same noise with rates phi(p_j) + beta(i -> j). Noise enters coordinate pairs
with opposite signs, so the sum of P is conserved up to roundoff; a
mass-conserving clip absorbs negative excursions and the roundoff residual.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import BoundaryGuardError, InvalidInputError
from .model import (FeedbackStrategy, ModelSpec, ZeroRates, forced_rates,
                    kolmogorov_drift)
from .rng import STREAM_COMMON, PathStreams, chunk_sizes
from .simplex import as_point

Q_GUARD = 1e-10


@dataclass(frozen=True)
class SchemeConfig:
    """Euler-Maruyama settings; ``clip_floor`` is the smallest allowed coordinate."""

    dt: float
    clip_floor: float = 0.0

    def __post_init__(self):
        if not self.dt > 0 or not math.isfinite(self.dt):
            raise InvalidInputError("dt must be positive")
        if not 0 <= self.clip_floor < 1e-3:
            raise InvalidInputError("clip_floor must lie in [0, 1e-3)")

    def n_steps(self, T: float) -> int:
        n = int(round(T / self.dt))
        if n < 1 or abs(n * self.dt - T) > 1e-12:
            raise InvalidInputError(f"dt={self.dt} does not divide T={T}")
        return n


# ---------------------------------------------------------------------------
# noise


def pair_index(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(d, 1)


def draw_increments(d: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One antisymmetric increment matrix with N(0, dt) entries above the diagonal."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    iu, ju = pair_index(d)
    M = np.zeros((d, d))
    z = rng.standard_normal(iu.size) * math.sqrt(dt)
    M[iu, ju] = z
    M[ju, iu] = -z
    return M


def pairs_from_matrix(dW: np.ndarray) -> np.ndarray:
    d = dW.shape[-1]
    iu, ju = pair_index(d)
    return dW[..., iu, ju]


def matrix_from_pairs(dWp: np.ndarray, d: int) -> np.ndarray:
    iu, ju = pair_index(d)
    M = np.zeros(dWp.shape[:-1] + (d, d))
    M[..., iu, ju] = dWp
    M[..., ju, iu] = -dWp
    return M


def wf_noise(P: np.ndarray, dWp: np.ndarray, scale) -> np.ndarray:
    """sum_j scale sqrt(P_i P_j) dW_ij, added pair by pair with opposite signs."""
    d = P.shape[-1]
    S = np.sqrt(np.maximum(P, 0.0))
    out = np.zeros_like(P)
    scale = np.asarray(scale, dtype=float)
    for k, (i, j) in enumerate(zip(*pair_index(d))):
        c = scale * S[..., i] * S[..., j] * dWp[..., k]
        out[..., i] += c
        out[..., j] -= c
    return out


def conserving_clip(P: np.ndarray, floor: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Raise coordinates below ``floor`` and take the deficit from the largest one.

    The roundoff residual 1 - sum(P) is absorbed by the largest coordinate as
    well. Returns the corrected batch and the per-row count of clipped entries.
    """
    P = np.array(P, dtype=float)
    low = P < floor
    n_clipped = low.sum(axis=-1)
    rows = np.arange(P.shape[0])
    if np.any(low):
        P = np.where(low, floor, P)
    top = np.argmax(P, axis=-1)
    P[rows, top] += 1.0 - P.sum(axis=-1)
    return P, n_clipped


# ---------------------------------------------------------------------------
# single steps


def step_P_batch(P, t, dWp, alpha: FeedbackStrategy, spec: ModelSpec, dt: float,
                 floor: float = 0.0, rates=None):
    """Euler step for a batch ``P`` of shape (n, d); returns (P_next, clipped)."""
    R = alpha.rates(t, P) if rates is None else rates
    a = kolmogorov_drift(P, forced_rates(spec, P, R))
    P_new = P + a * dt + wf_noise(P, dWp, spec.epsilon)
    return conserving_clip(P_new, floor)


def step_Q_batch(Q, P, t, dWp, beta: FeedbackStrategy, spec: ModelSpec, dt: float,
                 rates=None) -> np.ndarray:
    """Euler step of the conditional mass for batches Q, P of shape (n, d)."""
    if np.any(P < Q_GUARD):
        raise BoundaryGuardError(
            f"population coordinate {P.min():.3e} below guard {Q_GUARD:g}; "
            "the tagged-mass noise ratio is undefined"
        )
    R = beta.rates(t, P) if rates is None else rates
    drift = kolmogorov_drift(Q, forced_rates(spec, P, R))
    d = P.shape[-1]
    S = np.sqrt(P)
    noise = np.zeros_like(Q)
    for k, (i, j) in enumerate(zip(*pair_index(d))):
        w = spec.epsilon * dWp[..., k]
        noise[..., i] += w * Q[..., i] * (S[..., j] / S[..., i])
        noise[..., j] -= w * Q[..., j] * (S[..., i] / S[..., j])
    return np.maximum(Q + drift * dt + noise, 0.0)


def step_P(p, t, dW, alpha: FeedbackStrategy, spec: ModelSpec, cfg: SchemeConfig) -> np.ndarray:
    """One Euler step from a single point; ``dW`` is a d x d antisymmetric increment."""
    p = as_point(p)
    P, _ = step_P_batch(p[None, :], t, pairs_from_matrix(np.asarray(dW))[None, :],
                        alpha, spec, cfg.dt, cfg.clip_floor)
    return P[0]


def step_Q(q, p, t, dW, beta: FeedbackStrategy, spec: ModelSpec, cfg: SchemeConfig) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise InvalidInputError("q must be non-negative")
    p = as_point(p)
    return step_Q_batch(q[None, :], p[None, :], t, pairs_from_matrix(np.asarray(dW))[None, :],
                        beta, spec, cfg.dt)[0]


# ---------------------------------------------------------------------------
# path marching


class StepView:
    """State at time index ``k`` as seen by observers of :func:`march`."""

    def __init__(self, k, t, P, Qs, alpha, betas):
        self.k, self.t, self.P, self.Qs = k, t, P, Qs
        self._alpha, self._betas = alpha, betas

    @cached_property
    def alpha_rates(self) -> np.ndarray:
        return self._alpha.rates(self.t, self.P)

    @cached_property
    def beta_rates(self) -> list[np.ndarray]:
        out = []
        for b in self._betas:
            out.append(self.alpha_rates if b is self._alpha else b.rates(self.t, self.P))
        return out


def march(spec: ModelSpec, alpha: FeedbackStrategy, p0, n_paths: int, cfg: SchemeConfig,
          seed: int, betas: Sequence[FeedbackStrategy] = (), q0=None, substeps: int = 1,
          first_path_id: int = 0, T: float | None = None) -> Iterator[StepView]:
    """Yield the state at every time index 0..M.

    Noise for a path is drawn at resolution ``dt / substeps`` and summed, so
    a run with ``dt`` and ``substeps=2`` sees the same Brownian path as a run
    with ``dt / 2`` and ``substeps=1``.
    """
    d = spec.d
    T = spec.T if T is None else T
    M = cfg.n_steps(T)
    p0 = as_point(p0)
    if p0.size != d:
        raise InvalidInputError("p0 has the wrong dimension")
    P = np.tile(p0, (n_paths, 1))
    if betas:
        q = p0 if q0 is None else np.asarray(q0, dtype=float)
        Qs = [np.tile(q, (n_paths, 1)) for _ in betas]
    else:
        Qs = []
    npairs = d * (d - 1) // 2
    streams = PathStreams(seed, np.arange(first_path_id, first_path_id + n_paths), STREAM_COMMON)
    scale = math.sqrt(cfg.dt / substeps)
    k = 0
    view = StepView(0, 0.0, P, Qs, alpha, betas)
    yield view
    for chunk in chunk_sizes(M, n_paths, npairs * substeps):
        Z = streams.normals(chunk * substeps, npairs)
        dW = Z.reshape(n_paths, chunk, substeps, npairs).sum(axis=2) * scale
        for c in range(chunk):
            dWp = dW[:, c, :]
            P_new, clipped = step_P_batch(view.P, view.t, dWp, alpha, spec, cfg.dt,
                                          cfg.clip_floor, rates=view.alpha_rates)
            Q_new = [
                step_Q_batch(Q, view.P, view.t, dWp, b, spec, cfg.dt, rates=r)
                for Q, b, r in zip(view.Qs, betas, view.beta_rates if betas else [])
            ]
            k += 1
            view = StepView(k, k * cfg.dt, P_new, Q_new, alpha, betas)
            view.clipped = clipped
            yield view


@dataclass
class PathBundle:
    """Recorded trajectories plus per-path accumulators.

    ``P`` has shape (n_paths, n_records, d). ``inverse_integral[p, i]`` is the
    trapezoidal integral of 1 / P^i over [0, T] and ``min_coordinate`` the
    smallest coordinate visited.
    """

    times: np.ndarray
    P: np.ndarray
    Q: np.ndarray | None
    path_ids: np.ndarray
    seed: int
    p0: np.ndarray
    dt: float
    inverse_integral: np.ndarray
    min_coordinate: np.ndarray
    clip_events: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.P.shape[0]

    def to_csv(self, path) -> None:
        d = self.P.shape[-1]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            head = ["path_id", "t"] + [f"P_{i + 1}" for i in range(d)]
            if self.Q is not None:
                head += [f"Q_{i + 1}" for i in range(d)]
            w.writerow(head)
            for a, pid in enumerate(self.path_ids):
                for b, t in enumerate(self.times):
                    row = [int(pid), repr(float(t))] + [repr(float(x)) for x in self.P[a, b]]
                    if self.Q is not None:
                        row += [repr(float(x)) for x in self.Q[a, b]]
                    w.writerow(row)


def simulate(spec: ModelSpec, alpha: FeedbackStrategy, p0, n_paths: int, cfg: SchemeConfig,
             seed: int, beta: FeedbackStrategy | None = None, q0=None, record_every: int = 1,
             substeps: int = 1, observer: Callable[[StepView], None] | None = None) -> PathBundle:
    """Simulate ``n_paths`` independent paths; bit-reproducible for a fixed seed."""
    p0 = as_point(p0)
    if not np.all(p0 > 0):
        raise InvalidInputError("p0 must be interior")
    if n_paths < 0:
        raise InvalidInputError("n_paths must be >= 0")
    d = spec.d
    M = cfg.n_steps(spec.T)
    rec = [k for k in range(M + 1) if k % record_every == 0 or k == M]
    times = np.array(rec, dtype=float) * cfg.dt
    P_out = np.empty((n_paths, len(rec), d))
    Q_out = np.empty((n_paths, len(rec), d)) if beta is not None else None
    inv = np.zeros((n_paths, d))
    mins = np.full(n_paths, np.inf)
    clips = 0
    slot = 0
    if n_paths:
        betas = [beta] if beta is not None else []
        for view in march(spec, alpha, p0, n_paths, cfg, seed, betas, q0, substeps):
            w = 0.5 if view.k in (0, M) else 1.0
            with np.errstate(divide="ignore"):
                inv += w * cfg.dt / view.P
            mins = np.minimum(mins, view.P.min(axis=1))
            clips += int(getattr(view, "clipped", np.zeros(1)).sum())
            if observer is not None:
                observer(view)
            if slot < len(rec) and view.k == rec[slot]:
                P_out[:, slot] = view.P
                if Q_out is not None:
                    Q_out[:, slot] = view.Qs[0]
                slot += 1
    return PathBundle(times=times, P=P_out, Q=Q_out, path_ids=np.arange(n_paths), seed=seed,
                      p0=p0, dt=cfg.dt, inverse_integral=inv, min_coordinate=mins,
                      clip_events=clips)


# ---------------------------------------------------------------------------
# costs


def path_costs(spec: ModelSpec, alpha: FeedbackStrategy, betas: Sequence[FeedbackStrategy],
               l: int, p0, n_paths: int, cfg: SchemeConfig, seed: int, substeps: int = 1,
               first_path_id: int = 0) -> np.ndarray:
    """Per-path costs of a tagged player starting in state ``l`` (0-based).

    All strategies in ``betas`` share the population paths and the noise, which
    gives common random numbers for comparisons. Returns (len(betas), n_paths).
    """
    p0 = as_point(p0)
    if not np.all(p0 > 0):
        raise InvalidInputError("p0 must be interior")
    d = spec.d
    if not 0 <= l < d:
        raise InvalidInputError("start state out of range")
    q0 = np.zeros(d)
    q0[l] = 1.0
    M = cfg.n_steps(spec.T)
    acc = np.zeros((len(betas), n_paths))
    view = None
    for view in march(spec, alpha, p0, n_paths, cfg, seed, list(betas), q0, substeps,
                      first_path_id):
        w = 0.5 if view.k in (0, M) else 1.0
        f = spec.running_cost(view.t, view.P)
        for b, (Q, R) in enumerate(zip(view.Qs, view.beta_rates)):
            lag = f + 0.5 * np.sum(R * R, axis=-1)
            acc[b] += w * cfg.dt * np.sum(Q * lag, axis=-1)
    g = spec.terminal_cost(view.P)
    for b, Q in enumerate(view.Qs):
        acc[b] += np.sum(Q * g, axis=-1)
    return acc


def mean_and_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return float("nan"), float("nan")
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return float(x.mean()), se


def mc_cost(spec: ModelSpec, beta: FeedbackStrategy, l: int, p0, n_paths: int,
            cfg: SchemeConfig, seed: int, alpha: FeedbackStrategy | None = None,
            substeps: int = 1) -> tuple[float, float]:
    """Monte-Carlo cost of strategy ``beta`` against a population driven by ``alpha``.

    ``alpha`` defaults to ``beta`` (the tagged player behaves like the crowd).
    """
    costs = path_costs(spec, beta if alpha is None else alpha, [beta], l, p0, n_paths, cfg,
                       seed, substeps)
    return mean_and_se(costs[0])


# ---------------------------------------------------------------------------
# exponential moments


@dataclass(frozen=True)
class ExpMomentEstimate:
    coordinate: int
    p0: float
    lam: float
    gamma: float
    estimate: float
    std_err: float
    diagnostic_only: bool


def exp_moment_estimate(bundle: PathBundle, lam: float, spec: ModelSpec,
                        coordinate: int = 0) -> ExpMomentEstimate:
    """Estimate E[exp(lam gamma int_0^T ds / P^i)] with gamma = kappa - (1 + lam) eps^2 / 2."""
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    gamma = spec.kappa - (1.0 + lam) * spec.epsilon**2 / 2.0
    x = np.exp(lam * gamma * bundle.inverse_integral[:, coordinate])
    est, se = mean_and_se(x)
    return ExpMomentEstimate(coordinate, float(bundle.p0[coordinate]), lam, gamma, est, se,
                             diagnostic_only=gamma <= 0)


@dataclass(frozen=True)
class ExpMomentScaling:
    estimates: list
    slope: float
    slope_se: float
    intercept: float

    def to_dict(self) -> dict:
        return {
            "slope": self.slope, "slope_se": self.slope_se, "intercept": self.intercept,
            "estimates": [e.__dict__ for e in self.estimates],
        }


def exp_moment_scaling(spec: ModelSpec, starts: Sequence[float], lam: float, n_paths: int,
                       cfg: SchemeConfig, seed: int,
                       alpha: FeedbackStrategy | None = None) -> ExpMomentScaling:
    """Run one simulation per start value of coordinate 0 and regress log-estimates on log p0.

    For d > 2 the remaining mass is spread evenly over the other coordinates.
    The bound C p0^{-lam} predicts a slope close to -lam.
    """
    alpha = ZeroRates() if alpha is None else alpha
    d = spec.d
    ests = []
    for k, s in enumerate(starts):
        p0 = np.full(d, (1.0 - s) / (d - 1))
        p0[0] = s
        b = simulate(spec, alpha, p0, n_paths, cfg, seed + k, record_every=10**9)
        ests.append(exp_moment_estimate(b, lam, spec, 0))
    x = np.log([e.p0 for e in ests])
    y = np.log([e.estimate for e in ests])
    w = 1.0 / np.maximum(np.array([e.std_err / e.estimate for e in ests]), 1e-12) ** 2
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(len(x) - 2, 1)
    cov = np.linalg.inv(A.T @ A) * float(resid @ resid) / dof
    # delta-method uncertainty from the Monte-Carlo errors alone
    cov_mc = np.linalg.inv(A.T @ A) @ A.T @ np.diag(1.0 / w) @ A @ np.linalg.inv(A.T @ A)
    slope_se = math.sqrt(max(cov[0, 0], cov_mc[0, 0]))
    return ExpMomentScaling(ests, float(coef[0]), slope_se, float(coef[1]))


def summary_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
