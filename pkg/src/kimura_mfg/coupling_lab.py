"""Conditioning on the first m coordinates and the reflection coupling.

A point X of the d-simplex is split as X = (P°, s^2 P) with s^2 = 1 - |P°|_1 and
P in the (d - m)-simplex. The split process is driven by two blocks of one
antisymmetric increment: the lower-right (d-m) x (d-m) block moves P, the
first m rows move P°. Two copies (P°, P) and (Q°, Q) share the P°-noise,
while Q sees the P-noise reflected across Z = sqrt(P) - sqrt(Q).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .model import FeedbackStrategy, ModelSpec, ZeroRates, drift_a
from .rng import STREAM_AUX, STREAM_COMMON, STREAM_CONDITIONING, PathStreams, path_generator
from .simplex import as_point
from .wf_sde import SchemeConfig, conserving_clip, mean_and_se, pair_index, simulate, wf_noise

TAU_THRESHOLD = 1e-9
FLAGS = ("tau", "sigma", "varrho", "rho")

Drift = Callable[[float, np.ndarray], np.ndarray]


class CouplingWarning(UserWarning):
    """Initial data fall outside the coupling-estimate preconditions."""


def sigma_eval(p_circ) -> float:
    """sqrt(1 - |p°|_1); 1 for an empty p°."""
    pc = np.asarray(p_circ, dtype=float).reshape(-1)
    if np.any(pc < 0) or not np.all(np.isfinite(pc)):
        raise InvalidInputError("p° must be finite and non-negative")
    s = float(pc.sum())
    if s > 1.0 + 1e-12:
        raise InvalidInputError(f"|p°|_1 = {s} exceeds 1")
    return math.sqrt(max(1.0 - s, 0.0))


@dataclass(frozen=True)
class ConditioningState:
    m: int
    p_circ: np.ndarray
    p: np.ndarray

    @property
    def sigma(self) -> float:
        return sigma_eval(self.p_circ)

    @classmethod
    def from_point(cls, x, m: int) -> "ConditioningState":
        x = as_point(x)
        if not 0 <= m <= x.size - 1:
            raise InvalidInputError("need 0 <= m <= d - 1")
        pc = x[:m].copy()
        rest = x[m:]
        return cls(m, pc, rest / rest.sum())

    def to_point(self) -> np.ndarray:
        s2 = self.sigma**2
        return np.concatenate([self.p_circ, s2 * self.p])


def reflection_matrix(Pt, Qt) -> np.ndarray:
    """Householder reflection I - 2 Z Z^T / |Z|^2 across Z = Pt - Qt (identity if Z = 0)."""
    Pt, Qt = np.asarray(Pt, dtype=float), np.asarray(Qt, dtype=float)
    z = Pt - Qt
    nz = float(z @ z)
    k = z.size
    if nz == 0.0:
        return np.eye(k)
    return np.eye(k) - 2.0 * np.outer(z, z) / nz


def reflect_pairs(W_pairs: np.ndarray, zhat: np.ndarray, k: int) -> np.ndarray:
    """Upper-triangular entries of R W R for batches of unit vectors ``zhat`` (n, k).

    Only the upper entries are formed, so the result is exactly antisymmetric
    when expanded. Rows with zhat = 0 are returned unchanged.
    """
    iu, ju = pair_index(k)
    W = np.zeros(W_pairs.shape[:-1] + (k, k))
    W[..., iu, ju] = W_pairs
    W[..., ju, iu] = -W_pairs
    a = np.einsum("...i,...ij->...j", zhat, W)          # z^T W
    # R W R = W - 2 z a^T + 2 a z^T for antisymmetric W and unit z
    return (W_pairs - 2.0 * zhat[..., iu] * a[..., ju] + 2.0 * a[..., iu] * zhat[..., ju])


# ---------------------------------------------------------------------------
# split dynamics


def default_drift(spec: ModelSpec, alpha: FeedbackStrategy | None = None) -> Drift:
    alpha = ZeroRates() if alpha is None else alpha
    return lambda t, X: drift_a(t, X, alpha, spec)


def _split_increments(P_circ, P, t, dt, dWp, eps, drift: Drift, m: int,
                      inner_pairs=None):
    """Drift and noise increments of the split process for batches.

    ``dWp`` holds the d(d-1)/2 pair increments of one d x d matrix;
    ``inner_pairs`` replaces the P-block pairs (used for the reflected copy).
    """
    n, k = P.shape
    d = m + k
    s2 = np.maximum(1.0 - P_circ.sum(axis=1), 1e-300)
    s = np.sqrt(s2)
    X = np.concatenate([P_circ, s2[:, None] * P], axis=1)
    Bfull = drift(t, X)
    Bc, B = Bfull[:, :m], Bfull[:, m:]
    dP = (B - P * B.sum(axis=1, keepdims=True)) / s2[:, None] * dt[:, None]
    iu, ju = pair_index(d)
    inner = (iu >= m) & (ju >= m)
    Wp = dWp[:, inner] if inner_pairs is None else inner_pairs
    dP = dP + wf_noise(P, Wp, eps / s)
    dPc = Bc * dt[:, None]
    if m:
        Sc = np.sqrt(np.maximum(P_circ, 0.0))
        Sp = np.sqrt(np.maximum(P, 0.0))
        noise_c = np.zeros_like(P_circ)
        for col, (i, j) in enumerate(zip(iu, ju)):
            if j < m:   # both in the conditioned block
                c = eps * Sc[:, i] * Sc[:, j] * dWp[:, col]
                noise_c[:, i] += c
                noise_c[:, j] -= c
            elif i < m:  # cross entry (i, m + j')
                noise_c[:, i] += eps * s * Sc[:, i] * Sp[:, j - m] * dWp[:, col]
        dPc = dPc + noise_c
    return dPc, dP


def _finish(P_circ, P):
    P_circ = np.maximum(P_circ, 0.0)
    tot = P_circ.sum(axis=1)
    over = tot > 1.0 - 1e-12
    if np.any(over):
        P_circ[over] *= ((1.0 - 1e-12) / tot[over])[:, None]
    P, _ = conserving_clip(P)
    return P_circ, P


def step_split(P_circ, P, t, dt, dWp, eps, drift: Drift, m: int):
    """One Euler step of the split process for batches (P_circ (n, m), P (n, d-m))."""
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (P.shape[0],))
    dPc, dP = _split_increments(P_circ, P, t, dt, dWp, eps, drift, m)
    return _finish(P_circ + dPc, P + dP)


# ---------------------------------------------------------------------------
# coupled pair


@dataclass
class CoupledState:
    """Batch of coupled pairs with stopping bookkeeping.

    ``hit[name]`` holds the first time a flag triggered (inf if never).
    """

    m: int
    t: np.ndarray
    P_circ: np.ndarray
    P: np.ndarray
    Q_circ: np.ndarray
    Q: np.ndarray
    hit: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in FLAGS:
            self.hit.setdefault(name, np.full(self.P.shape[0], np.inf))

    @classmethod
    def start(cls, m, p_circ, p, q_circ, q, n_paths=1, t0=0.0, delta=0.2) -> "CoupledState":
        rep = lambda v: np.tile(np.asarray(v, dtype=float).reshape(1, -1), (n_paths, 1))
        st = cls(m, np.full(n_paths, float(t0)), rep(p_circ), rep(p), rep(q_circ), rep(q))
        st.update_flags(None, st.t, delta)
        return st

    @property
    def Z(self) -> np.ndarray:
        return np.sqrt(self.P) - np.sqrt(self.Q)

    def flag(self, name: str) -> np.ndarray:
        return np.isfinite(self.hit[name])

    @property
    def varpi(self) -> np.ndarray:
        return np.min(np.stack([self.hit[k] for k in FLAGS]), axis=0)

    def update_flags(self, Z_old, t_now, delta: float = 0.2, rows=None):
        rows = np.arange(self.P.shape[0]) if rows is None else rows
        Z = self.Z[rows]
        nz = np.linalg.norm(Z, axis=1)
        tau = nz <= TAU_THRESHOLD
        if Z_old is not None:
            tau |= np.einsum("ij,ij->i", Z, Z_old) <= 0.0
        conds = {
            "tau": tau,
            "sigma": nz >= delta / 4.0,
            "varrho": np.linalg.norm(self.P_circ[rows] - self.Q_circ[rows], axis=1) > nz,
            "rho": self.P_circ[rows].sum(axis=1) >= 0.75,
        }
        tn = np.broadcast_to(t_now, rows.shape)
        for name, c in conds.items():
            h = self.hit[name]
            new = c & ~np.isfinite(h[rows])
            h[rows[new]] = tn[new]
        # glue after coupling
        glued = rows[np.isfinite(self.hit["tau"][rows])]
        self.Q[glued] = self.P[glued]


def _coupled_increment(state: CoupledState, rows, dt, dWp, spec: ModelSpec, drift: Drift):
    m = state.m
    k = state.P.shape[1]
    d = m + k
    eps = spec.epsilon
    t = float(np.min(state.t[rows])) if rows.size else 0.0
    Pc, P, Qc, Q = state.P_circ[rows], state.P[rows], state.Q_circ[rows], state.Q[rows]
    Z = np.sqrt(P) - np.sqrt(Q)
    nz = np.linalg.norm(Z, axis=1)
    coupled = np.isfinite(state.hit["tau"][rows]) | (nz == 0)
    zhat = np.where(coupled[:, None], 0.0, Z / np.where(nz > 0, nz, 1.0)[:, None])
    iu, ju = pair_index(d)
    inner = (iu >= m) & (ju >= m)
    Wp = dWp[:, inner]
    Wq = np.where(coupled[:, None], Wp, reflect_pairs(Wp, zhat, k))
    dPc, dP = _split_increments(Pc, P, t, dt, dWp, eps, drift, m)
    dQc, dQ = _split_increments(Qc, Q, t, dt, dWp, eps, drift, m, inner_pairs=Wq)
    Pc, P = _finish(Pc + dPc, P + dP)
    Qc, Q = _finish(Qc + dQc, Q + dQ)
    return Pc, P, Qc, Q, Z


def step_coupled(state: CoupledState, dt: float, dW: np.ndarray, dW_circ: np.ndarray,
                 spec: ModelSpec, drift: Drift | None = None) -> CoupledState:
    """One Euler step of the coupled pair for every path in ``state``.

    ``dW`` and ``dW_circ`` are antisymmetric d x d increments (or batches of
    them): the P-block uses the lower-right block of ``dW``, the conditioned
    block uses the first m rows of ``dW_circ``.
    """
    drift = default_drift(spec) if drift is None else drift
    m = state.m
    n, k = state.P.shape
    d = m + k
    dW = np.broadcast_to(dW, (n, d, d))
    dWc = np.broadcast_to(dW_circ, (n, d, d))
    iu, ju = pair_index(d)
    inner = (iu >= m) & (ju >= m)
    dWp = np.where(inner[None, :], dW[:, iu, ju], dWc[:, iu, ju])
    rows = np.arange(n)
    dts = np.full(n, float(dt))
    out = CoupledState(m, state.t + dt, *[a.copy() for a in (state.P_circ, state.P,
                                                              state.Q_circ, state.Q)],
                       hit={k_: v.copy() for k_, v in state.hit.items()})
    Pc, P, Qc, Q, Z_old = _coupled_increment(state, rows, dts, dWp, spec, drift)
    out.P_circ, out.P, out.Q_circ, out.Q = Pc, P, Qc, Q
    out.update_flags(Z_old, out.t, spec.delta)
    return out


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class CouplingResult:
    gap: float
    failure_prob: float
    std_err: float
    n_paths: int
    horizon: float
    counts: dict


def _run_coupled(spec, m, p_circ, p, q_circ, q, n_paths, cfg, seed, drift, t0, S,
                 resolution, max_steps):
    state = CoupledState.start(m, p_circ, p, q_circ, q, n_paths, t0, spec.delta)
    k = len(p)
    d = m + k
    npairs = d * (d - 1) // 2
    streams = PathStreams(seed, np.arange(n_paths), STREAM_AUX)
    gens = streams._gens
    chunk = 256
    buf = np.zeros((n_paths, chunk, npairs))
    pos = np.full(n_paths, chunk, dtype=np.int64)
    eps = spec.epsilon
    for _ in range(max_steps):
        active = np.nonzero(~np.isfinite(state.varpi) & (state.t < S - 1e-15))[0]
        if active.size == 0:
            break
        # each path reads its own stream, so results do not depend on the active set
        for a in active[pos[active] >= chunk]:
            buf[a] = gens[a].standard_normal((chunk, npairs))
            pos[a] = 0
        zeta = buf[active, pos[active]]
        pos[active] += 1
        Z = state.Z[active]
        nz = np.linalg.norm(Z, axis=1)
        s = np.sqrt(np.maximum(1.0 - state.P_circ[active].sum(axis=1), 1e-12))
        dt = np.full(active.size, cfg.dt)
        if resolution > 0:
            dt = np.minimum(dt, (nz * s / (resolution * max(eps, 1e-12))) ** 2)
            dt = np.maximum(dt, 1e-16)
        dt = np.minimum(dt, S - state.t[active])
        dWp = zeta * np.sqrt(dt)[:, None]
        Pc, P, Qc, Q, Z_old = _coupled_increment(state, active, dt, dWp, spec, drift)
        state.P_circ[active], state.P[active] = Pc, P
        state.Q_circ[active], state.Q[active] = Qc, Q
        state.t[active] += dt
        state.update_flags(Z_old, state.t[active], spec.delta, rows=active)
    return state


def coupling_experiment(spec: ModelSpec, m: int, p_circ, p, q, n_paths: int,
                        cfg: SchemeConfig, seed: int, q_circ=None, t0: float = 0.0,
                        S_horizon: float | None = None, drift: Drift | None = None,
                        resolution: float = 4.0, max_steps: int = 2_000_000) -> CouplingResult:
    """Estimate P(varpi_S < tau ^ varrho ^ rho) for the reflection-coupled pair.

    The step of each path is min(cfg.dt, (|Z| s / (resolution * eps))^2), so the
    noise never jumps across the gap; ``resolution = 0`` uses the fixed cfg.dt.
    """
    p, q = as_point(p), as_point(q)
    p_circ = np.asarray(p_circ, dtype=float).reshape(-1)
    q_circ = p_circ.copy() if q_circ is None else np.asarray(q_circ, dtype=float).reshape(-1)
    if p_circ.size != m or q_circ.size != m or p.size != q.size or m + p.size != spec.d:
        raise InvalidInputError("block sizes do not match m and d")
    gap = float(np.linalg.norm(p - q))
    if p_circ.sum() > 0.5 or q_circ.sum() > 0.5:
        warnings.warn("|p°|_1 > 1/2: outside the coupling-estimate preconditions", CouplingWarning)
    if gap >= spec.delta**2 / (64 * math.sqrt(spec.d)):
        warnings.warn("|p - q| is not below delta^2 / (64 sqrt d)", CouplingWarning)
    S = t0 + gap ** (1.0 / 3.0) if S_horizon is None else S_horizon
    if S > spec.T:
        warnings.warn("horizon exceeds T", CouplingWarning)
    drift = default_drift(spec) if drift is None else drift
    if gap == 0.0:
        return CouplingResult(0.0, 0.0, 0.0, n_paths, S, {"tau_first": n_paths})
    st = _run_coupled(spec, m, p_circ, p, q_circ, q, n_paths, cfg, seed, drift, t0, S,
                      resolution, max_steps)
    others = np.min(np.stack([st.hit["tau"], st.hit["varrho"], st.hit["rho"]]), axis=0)
    varpi_S = np.minimum(st.varpi, S)
    fail = varpi_S < others
    prob = float(fail.mean()) if n_paths else float("nan")
    se = math.sqrt(max(prob * (1 - prob), 0.0) / n_paths) if n_paths else float("nan")
    first = {}
    for name in FLAGS:
        first[f"{name}_first"] = int(np.sum(st.hit[name] == st.varpi))
    first["horizon"] = int(np.sum(~np.isfinite(st.varpi)))
    return CouplingResult(gap, prob, se, n_paths, S, first)


@dataclass(frozen=True)
class CouplingSweep:
    results: list
    exponent: float
    isotone: bool

    def rows(self):
        return [(r.gap, r.failure_prob, r.std_err) for r in self.results]


def coupling_sweep(spec: ModelSpec, m: int, p_circ, p, direction, gaps, n_paths: int,
                   cfg: SchemeConfig, seed: int, **kw) -> CouplingSweep:
    """Failure probability over a grid of |p - q| with q = p + gap * direction / |direction|."""
    p = as_point(p)
    u = np.asarray(direction, dtype=float)
    u = u - u.mean()
    u = u / np.linalg.norm(u)
    res = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CouplingWarning)
        for k, g in enumerate(sorted(gaps)):
            q = p + g * u
            res.append(coupling_experiment(spec, m, p_circ, p, q, n_paths, cfg, seed + k, **kw))
    # failure probability should not increase as the gap shrinks
    iso = all(res[a].failure_prob <= res[a + 1].failure_prob
              + 3 * math.hypot(res[a].std_err, res[a + 1].std_err) for a in range(len(res) - 1))
    pos = [r for r in res if r.failure_prob > 0]
    if len(pos) >= 2:
        x = np.log([r.gap for r in pos])
        y = np.log([r.failure_prob for r in pos])
        expo = float(np.polyfit(x, y, 1)[0])
    else:
        expo = float("nan")
    return CouplingSweep(res, expo, iso)


@dataclass(frozen=True)
class RotatedNoiseReport:
    variances: np.ndarray
    variance_z: np.ndarray
    correlations: np.ndarray
    correlation_z: np.ndarray
    antisymmetry_defect: float
    dt: float

    @property
    def max_abs_z(self) -> float:
        zs = np.concatenate([self.variance_z.ravel(), self.correlation_z.ravel()])
        return float(np.max(np.abs(zs))) if zs.size else 0.0


def rotated_noise_check(n_steps: int, k: int, dt: float, seed: int) -> RotatedNoiseReport:
    """Moments of R dW R along a random, noise-independent sequence of reflections."""
    if k < 2:
        raise InvalidInputError("need k >= 2")
    g = path_generator(seed, 0, STREAM_AUX)
    npairs = k * (k - 1) // 2
    W = g.standard_normal((n_steps, npairs)) * math.sqrt(dt)
    z = g.standard_normal((n_steps, k))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    X = reflect_pairs(W, z, k)
    iu, ju = pair_index(k)
    full = np.zeros((n_steps, k, k))
    full[:, iu, ju] = X
    full[:, ju, iu] = -X
    defect = float(np.max(np.abs(full + np.swapaxes(full, 1, 2))))
    sq = X * X
    var = sq.mean(axis=0)
    var_se = sq.std(axis=0, ddof=1) / math.sqrt(n_steps)
    var_z = (var - dt) / var_se
    a, b = np.triu_indices(npairs, 1)
    prod = X[:, a] * X[:, b]
    cor = prod.mean(axis=0) / dt
    cor_se = prod.std(axis=0, ddof=1) / math.sqrt(n_steps) / dt
    cor_z = np.divide(cor, cor_se, out=np.zeros_like(cor), where=cor_se > 0)
    return RotatedNoiseReport(var, var_z, cor, cor_z, defect, dt)


@dataclass(frozen=True)
class LawComparison:
    times: np.ndarray
    direct_mean: np.ndarray
    split_mean: np.ndarray
    z_mean: np.ndarray
    z_second: np.ndarray

    @property
    def max_abs_z(self) -> float:
        z = np.concatenate([self.z_mean.ravel(), self.z_second.ravel()])
        z = z[np.isfinite(z)]
        return float(np.max(np.abs(z))) if z.size else 0.0


def _simulate_split(spec, m, x0, n_paths, cfg, seed, drift, T, record_steps):
    state = ConditioningState.from_point(x0, m)
    Pc = np.tile(state.p_circ, (n_paths, 1))
    P = np.tile(state.p, (n_paths, 1))
    d = spec.d
    npairs = d * (d - 1) // 2
    M = cfg.n_steps(T)
    streams = PathStreams(seed, np.arange(n_paths), STREAM_CONDITIONING)
    rec = {}
    k = 0

    def snapshot():
        s2 = 1.0 - Pc.sum(axis=1)
        return np.concatenate([Pc, s2[:, None] * P], axis=1)

    if 0 in record_steps:
        rec[0] = snapshot()
    from .rng import chunk_sizes
    for chunk in chunk_sizes(M, n_paths, npairs):
        Zn = streams.normals(chunk, npairs) * math.sqrt(cfg.dt)
        for c in range(chunk):
            Pc, P = step_split(Pc, P, k * cfg.dt, cfg.dt, Zn[:, c], spec.epsilon, drift, m)
            k += 1
            if k in record_steps:
                rec[k] = snapshot()
    return rec


def identity_in_law_check(spec: ModelSpec, m: int, start, T: float, n_paths: int, seed: int,
                          cfg: SchemeConfig | None = None, drift: Drift | None = None,
                          alpha: FeedbackStrategy | None = None) -> LawComparison:
    """Compare first and second moments of the direct and the split simulation."""
    cfg = SchemeConfig(1e-3) if cfg is None else cfg
    start = as_point(start)
    if not np.all(start > 0):
        raise InvalidInputError("start must be interior")
    if not 0 <= m <= spec.d - 1:
        raise InvalidInputError("m must satisfy 0 <= m <= d - 1")
    drift = default_drift(spec, alpha) if drift is None else drift
    M = cfg.n_steps(T)
    steps = [0, M // 4, M // 2, M]
    times = np.array(steps) * cfg.dt
    # direct simulation with the same drift
    d = spec.d
    direct = {}
    Xd = np.tile(start, (n_paths, 1))
    streams = PathStreams(seed, np.arange(n_paths), STREAM_COMMON)
    from .rng import chunk_sizes
    npairs = d * (d - 1) // 2
    k = 0
    direct[0] = Xd.copy()
    for chunk in chunk_sizes(M, n_paths, npairs):
        Zn = streams.normals(chunk, npairs) * math.sqrt(cfg.dt)
        for c in range(chunk):
            a = drift(k * cfg.dt, Xd)
            Xd, _ = conserving_clip(Xd + a * cfg.dt + wf_noise(Xd, Zn[:, c], spec.epsilon))
            k += 1
            if k in steps:
                direct[k] = Xd.copy()
    split = _simulate_split(spec, m, start, n_paths, cfg, seed, drift, T, set(steps))
    zm, zs, dm, sm = [], [], [], []
    for s in steps:
        A, B = direct[s], split[s]
        dm.append(A.mean(axis=0))
        sm.append(B.mean(axis=0))
        zrow, zrow2 = [], []
        for i in range(d):
            for col, (x, y) in enumerate([(A[:, i], B[:, i]), (A[:, i] ** 2, B[:, i] ** 2)]):
                mx, sx = mean_and_se(x)
                my, sy = mean_and_se(y)
                den = math.hypot(sx, sy)
                z = (mx - my) / den if den > 0 else (0.0 if mx == my else math.inf)
                (zrow if col == 0 else zrow2).append(z)
        zm.append(zrow)
        zs.append(zrow2)
    return LawComparison(times, np.array(dm), np.array(sm), np.array(zm), np.array(zs))
