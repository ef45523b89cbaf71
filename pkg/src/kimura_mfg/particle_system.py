"""Discrete-time N-player system with Wright-Fisher resampling of masses.

Each step flips a common coin T ~ Bernoulli(eps). On T = 0 every player moves
by the quantile of its row of the 1/N-scaled transition matrix. On T = 1 the
positions are frozen, a multinomial count S is drawn against the weighted
empirical measure and each mass is multiplied by S(i) / (N mu(i)).

Ensembles are batches: positions X (R, N) with 0-based states, masses Y (R, N).
The coin and the multinomial uniforms come from the common seed, the move
uniforms and initial states from the idiosyncratic seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .model import FeedbackStrategy, ModelSpec, kolmogorov_drift
from .rng import STREAM_COMMON, STREAM_IDIOSYNCRATIC, STREAM_INITIAL, PathStreams, chunk_sizes
from .simplex import as_point
from .wf_sde import conserving_clip, mean_and_se, wf_noise


def _generator(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, *map(int, keys)]))


@dataclass
class ParticleEnsemble:
    X: np.ndarray       # (R, N) int states in 0..d-1
    Y: np.ndarray       # (R, N) masses
    d: int
    m: int = 0

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def R(self) -> int:
        return self.X.shape[0]

    def mass_defect(self) -> float:
        """Largest relative deviation of the total mass from N."""
        return float(np.max(np.abs(self.Y.sum(axis=1) - self.N)) / self.N)

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.X.copy(), self.Y.copy(), self.d, self.m)

    def tile(self, R: int) -> "ParticleEnsemble":
        """R copies of the first replicate."""
        return ParticleEnsemble(np.repeat(self.X[:1], R, axis=0), np.repeat(self.Y[:1], R, axis=0),
                                self.d, self.m)

    @classmethod
    def from_positions(cls, X, d: int, Y=None) -> "ParticleEnsemble":
        X = np.atleast_2d(np.asarray(X, dtype=np.int64))
        if np.any(X < 0) or np.any(X >= d):
            raise InvalidInputError("positions must lie in 0..d-1")
        Y = np.ones(X.shape) if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape != X.shape or np.any(Y < 0):
            raise InvalidInputError("masses must be non-negative and match the positions")
        return cls(X, Y, d)


def allocate(p0, N: int) -> np.ndarray:
    """Largest-remainder allocation of N players to states with proportions p0."""
    p0 = as_point(p0)
    raw = p0 * N
    counts = np.floor(raw).astype(np.int64)
    short = N - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return np.repeat(np.arange(p0.size), counts)


def initial_ensemble(p0, N: int, R: int, seed: int, initial: str = "allocate") -> ParticleEnsemble:
    """R replicates started from p0, deterministically allocated or i.i.d."""
    p0 = as_point(p0)
    d = p0.size
    if initial == "allocate":
        X = np.tile(allocate(p0, N), (R, 1))
    elif initial == "iid":
        g = _generator(seed, STREAM_INITIAL)
        X = np.minimum(np.searchsorted(np.cumsum(p0), g.random((R, N)), side="right"), d - 1)
    else:
        raise InvalidInputError("initial must be 'allocate' or 'iid'")
    return ParticleEnsemble(X.astype(np.int64), np.ones((R, N)), d)


class CommonNoiseStream:
    """Per-step draws; the common seed feeds coins and multinomial uniforms only."""

    def __init__(self, seed_idiosyncratic: int, seed_common: int, eps: float, salt: int = 0):
        if not 0.0 <= eps <= 1.0:
            raise InvalidInputError("eps must lie in [0, 1]")
        self.seed0 = int(seed_idiosyncratic)
        self.seed1 = int(seed_common)
        self.eps = float(eps)
        self.salt = int(salt)

    def common(self, m: int, R: int, N: int):
        """Coins (R,) and uniforms V for the coin rows, shape (n_coin, N)."""
        g = _generator(self.seed1, STREAM_COMMON, self.salt, m)
        coin = g.random(R) < self.eps
        V = g.random((int(coin.sum()), N))
        return coin, V

    def idiosyncratic(self, m: int, R: int, N: int) -> np.ndarray:
        return _generator(self.seed0, STREAM_IDIOSYNCRATIC, self.salt, m).random((R, N))


def empirical_measure(ens: ParticleEnsemble) -> np.ndarray:
    """mu(i) = (1/N) sum_l Y^l 1{X^l = i}, shape (R, d).

    Divided by the total mass, which equals N up to roundoff, so rows sum to 1.
    """
    R, d = ens.R, ens.d
    flat = (ens.X + d * np.arange(R)[:, None]).ravel()
    mu = np.bincount(flat, weights=ens.Y.ravel(), minlength=R * d).reshape(R, d)
    tot = mu.sum(axis=1, keepdims=True)
    return mu / np.where(tot > 0, tot, 1.0)


def transition_matrix(rates: np.ndarray, N: int) -> np.ndarray:
    """1/N-scaled one-step transitions from rates (..., d, d); rows sum to 1."""
    d = rates.shape[-1]
    off = rates * (1.0 - np.eye(d))
    if np.any(off < 0):
        raise InvalidInputError("rates must be non-negative")
    out_rate = off.sum(axis=-1)
    if np.any(out_rate / N > 1.0 + 1e-12):
        raise InvalidInputError("sum_j rate_ij / N exceeds 1; increase N")
    A = off / N
    idx = np.arange(d)
    A[..., idx, idx] = 1.0 - out_rate / N
    return A


def multinomial_counts(mu: np.ndarray, V: np.ndarray) -> np.ndarray:
    """S(i) = #{k : mu_1 + .. + mu_{i-1} <= V_k < mu_1 + .. + mu_i}, rows of mu (n, d)."""
    d = mu.shape[1]
    cum = np.cumsum(mu, axis=1)
    site = (V[:, :, None] >= cum[:, None, : d - 1]).sum(axis=2)
    return np.stack([(site == i).sum(axis=1) for i in range(d)], axis=1)


def resampling_factor(S: np.ndarray, mu: np.ndarray, N: int) -> np.ndarray:
    """S(i) / (N mu(i)) with 0/0 treated as 0."""
    den = N * mu
    return np.divide(S, den, out=np.zeros(S.shape), where=den > 0)


@dataclass(frozen=True)
class StepRecord:
    coin: np.ndarray      # (R,) bool
    S: np.ndarray         # (R, d) counts, zero on rows without resampling
    mu: np.ndarray        # (R, d) measure before the step


def step_ensemble(ens: ParticleEnsemble, alpha: FeedbackStrategy, noise: CommonNoiseStream):
    """One step for every replicate; returns the new ensemble and the common draws."""
    R, N, d = ens.R, ens.N, ens.d
    mu = empirical_measure(ens)
    coin, V = noise.common(ens.m, R, N)
    U = noise.idiosyncratic(ens.m, R, N)
    X, Y = ens.X, ens.Y
    S = np.zeros((R, d), dtype=np.int64)
    if not np.all(coin):
        cum = np.cumsum(transition_matrix(alpha.rates(ens.m / N, mu), N), axis=-1)
        # quantile in increasing state order: count thresholds at or below U
        new = np.zeros(X.shape, dtype=np.int64)
        for j in range(d - 1):
            new += U >= np.take_along_axis(cum[:, :, j], X, axis=1)
        X = np.where(coin[:, None], X, new) if np.any(coin) else new
    if np.any(coin):
        S[coin] = multinomial_counts(mu[coin], V)
        fac = np.ones((R, d))
        fac[coin] = resampling_factor(S[coin], mu[coin], N)
        Y = Y * np.take_along_axis(fac, X, axis=1)
    else:
        Y = Y.copy()
    return ParticleEnsemble(X, Y, d, ens.m + 1), StepRecord(coin, S, mu)


def conditional_mass_step(Q: np.ndarray, mu: np.ndarray, rates: np.ndarray, coin, S, N: int) -> np.ndarray:
    """Conditional expected mass update for batches Q (..., d).

    coin = 0: Q' = Q A with A the 1/N-scaled transition of ``rates``;
    coin = 1: Q'(i) = Q(i) S(i) / (N mu(i)).
    """
    Q = np.asarray(Q, dtype=float)
    if np.any(Q < 0):
        raise InvalidInputError("Q must be non-negative")
    moved = np.einsum("...i,...ij->...j", Q, transition_matrix(np.asarray(rates, dtype=float), N))
    resampled = Q * resampling_factor(np.asarray(S, dtype=float), np.asarray(mu, dtype=float), N)
    coin = np.asarray(coin, dtype=bool)
    return np.where(coin[..., None], resampled, moved)


# ---------------------------------------------------------------------------
# trajectories and costs


@dataclass
class ParticleRun:
    N: int
    times: np.ndarray            # m / N at recorded steps
    steps: np.ndarray
    mu: np.ndarray               # (R, n_rec, d)
    final: ParticleEnsemble
    mass_defect: float
    X: np.ndarray | None = None  # (R, M+1, N) when players are kept
    Y: np.ndarray | None = None
    Q: dict = field(default_factory=dict)   # name -> (R, M+1, d)


def simulate_particles(alpha: FeedbackStrategy, eps: float, p0, N: int, T: float, R: int, seed: int,
                       seed_common: int | None = None, initial: str = "allocate",
                       record_steps=None, keep_players: bool = False,
                       betas: dict | None = None, salt: int = 0) -> ParticleRun:
    """Run M = floor(N T) steps for R replicates.

    ``betas`` maps names to deviation strategies whose conditional expected
    masses are tracked along the common draws (started from the initial measure).
    """
    M = int(math.floor(N * T + 1e-9))
    ens = initial_ensemble(p0, N, R, seed, initial)
    noise = CommonNoiseStream(seed, seed + 1 if seed_common is None else seed_common, eps, salt)
    rec = set(range(M + 1)) if record_steps is None else set(int(s) for s in record_steps)
    steps, mus = [], []
    Xs, Ys = ([ens.X.copy()], [ens.Y.copy()]) if keep_players else (None, None)
    betas = betas or {}
    mu0 = empirical_measure(ens)
    Q = {k: [mu0.copy()] for k in betas}
    defect = ens.mass_defect()
    if 0 in rec:
        steps.append(0)
        mus.append(mu0)
    for m in range(M):
        ens, info = step_ensemble(ens, alpha, noise)
        defect = max(defect, ens.mass_defect())
        for name, b in betas.items():
            Q[name].append(conditional_mass_step(Q[name][-1], info.mu, b.rates(m / N, info.mu),
                                                 info.coin, info.S, N))
        if keep_players:
            Xs.append(ens.X.copy())
            Ys.append(ens.Y.copy())
        if m + 1 in rec:
            steps.append(m + 1)
            mus.append(empirical_measure(ens))
    steps = np.array(steps)
    return ParticleRun(N, steps / N, steps, np.stack(mus, axis=1), ens, defect,
                       np.stack(Xs, axis=1) if keep_players else None,
                       np.stack(Ys, axis=1) if keep_players else None,
                       {k: np.stack(v, axis=1) for k, v in Q.items()})


def discrete_cost(X: np.ndarray, Y: np.ndarray, mu: np.ndarray, f, g, beta: FeedbackStrategy,
                  N: int) -> np.ndarray:
    """Per-player discrete cost for one trajectory.

    X, Y have shape (M+1, N_players); mu has shape (M+1, d). ``f`` and ``g``
    map (t, mu) and mu to per-state costs of shape (d,).
    """
    X = np.asarray(X)
    Y = np.asarray(Y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or mu.shape[0] != X.shape[0]:
        raise InvalidInputError("trajectory arrays must have matching length M+1")
    M = X.shape[0] - 1
    players = np.arange(X.shape[1])
    cost = Y[M] * np.asarray(g(mu[M]))[X[M]]
    d = mu.shape[1]
    off = 1.0 - np.eye(d)
    for m in range(M):
        t = m / N
        run = np.asarray(f(t, mu[m]))[X[m]]
        b = np.asarray(beta.rates(t, mu[m]), dtype=float) * off
        kinetic = 0.5 * np.sum(b**2, axis=1)[X[m]]
        cost = cost + Y[m] * (run + kinetic) / N
    return cost


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class MomentReport:
    mean_increment: np.ndarray
    mean_expected: np.ndarray
    mean_z: np.ndarray
    cov_resampling: np.ndarray
    cov_expected: np.ndarray
    cov_z: np.ndarray
    n_replicates: int

    @property
    def max_abs_z(self) -> float:
        return float(max(np.max(np.abs(self.mean_z)), np.max(np.abs(self.cov_z))))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _z(est, expected, se):
    diff = est - expected
    return np.divide(diff, se, out=np.where(diff == 0, 0.0, np.inf), where=se > 0)


def moment_diagnostics(ens: ParticleEnsemble, alpha: FeedbackStrategy, eps: float, n_replicates: int,
                       seed: int, chunk: int = 10_000) -> MomentReport:
    """One-step increments of mu from a fixed state, replicated.

    The mean is compared to (1 - eps) a / N, the resampling-branch second
    moment E[1{T=1} (S/N - mu)(S/N - mu)^T] to (eps / N) Xi(mu).
    """
    base = ParticleEnsemble(ens.X[:1], ens.Y[:1], ens.d, ens.m)
    N, d = base.N, base.d
    mu0 = empirical_measure(base)[0]
    a = kolmogorov_drift(mu0, alpha.rates(base.m / N, mu0[None, :])[0])
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    c1 = np.zeros((d, d))
    c2 = np.zeros((d, d))
    done = 0
    block = 0
    while done < n_replicates:
        R = min(chunk, n_replicates - done)
        noise = CommonNoiseStream(seed, seed + 1, eps, salt=block)
        new, info = step_ensemble(base.tile(R), alpha, noise)
        inc = empirical_measure(new) - mu0
        s1 += inc.sum(axis=0)
        s2 += (inc**2).sum(axis=0)
        res = np.where(info.coin[:, None], info.S / N - mu0, 0.0)
        prod = res[:, :, None] * res[:, None, :]
        c1 += prod.sum(axis=0)
        c2 += (prod**2).sum(axis=0)
        done += R
        block += 1
    n = float(n_replicates)
    mean = s1 / n
    mean_se = np.sqrt(np.maximum(s2 / n - mean**2, 0.0) / max(n - 1, 1))
    cov = c1 / n
    cov_se = np.sqrt(np.maximum(c2 / n - cov**2, 0.0) / max(n - 1, 1))
    exp_mean = (1.0 - eps) * a / N
    Xi = np.diag(mu0) - np.outer(mu0, mu0)
    exp_cov = eps / N * Xi
    return MomentReport(mean, exp_mean, _z(mean, exp_mean, mean_se), cov, exp_cov,
                        _z(cov, exp_cov, cov_se), n_replicates)


def simulate_limit(alpha: FeedbackStrategy, eps: float, p0, T: float, n_paths: int, dt: float,
                   seed: int, record_times) -> dict:
    """Limit SDE with drift (1 - eps) a and Wright-Fisher noise of intensity eps.

    The noise scale is sqrt(eps) so that the covariance per unit time is eps Xi.
    """
    p0 = as_point(p0)
    d = p0.size
    M = int(round(T / dt))
    if abs(M * dt - T) > 1e-9 * max(T, 1.0):
        raise InvalidInputError("dt must divide T")
    want = {int(round(t / dt)): t for t in record_times}
    P = np.tile(p0, (n_paths, 1))
    out = {}
    if 0 in want:
        out[want[0]] = P.copy()
    streams = PathStreams(seed, np.arange(n_paths), STREAM_COMMON)
    npairs = d * (d - 1) // 2
    k = 0
    for ch in chunk_sizes(M, n_paths, npairs):
        Z = streams.normals(ch, npairs) * math.sqrt(dt)
        for c in range(ch):
            R = alpha.rates(k * dt, P)
            P = P + (1.0 - eps) * kolmogorov_drift(P, R) * dt + wf_noise(P, Z[:, c], math.sqrt(eps))
            P, _ = conserving_clip(P)
            k += 1
            if k in want:
                out[want[k]] = P.copy()
    return out


@dataclass(frozen=True)
class ConvergenceRow:
    N: int
    t: float
    gap: float
    std_err: float
    moment: str


@dataclass(frozen=True)
class ConvergenceTable:
    rows: list
    N_list: list

    def max_gap(self, N: int):
        """Largest moment gap for N and the standard error of that entry."""
        rs = [r for r in self.rows if r.N == N and r.t > 0]
        r = max(rs, key=lambda r: r.gap)
        return r.gap, r.std_err

    def monotone(self, slack: float = 1.0) -> bool:
        g = [self.max_gap(N) for N in self.N_list]
        return all(g[k + 1][0] <= g[k][0] + slack * math.hypot(g[k][1], g[k + 1][1])
                   for k in range(len(g) - 1))

    def to_dict(self) -> dict:
        return {"rows": [r.__dict__ for r in self.rows],
                "max_gap": {str(N): list(self.max_gap(N)) for N in self.N_list}}


def _moment_stats(x: np.ndarray):
    """Mean and variance of samples x with standard errors."""
    m, se_m = mean_and_se(x)
    c = (x - m) ** 2
    v, se_v = mean_and_se(c)
    n = x.size
    return (m, se_m), (v * n / max(n - 1, 1), se_v)


def convergence_study(spec: ModelSpec, alpha: FeedbackStrategy, p0, N_list, n_paths: int, seed: int,
                      sde_dt: float = 1e-4, sde_paths: int | None = None,
                      initial: str = "allocate") -> ConvergenceTable:
    """Mean and variance of mu^N at t in {0, T/2, T} against the limit SDE.

    ``spec.epsilon`` is the resampling probability, ``spec.T`` and ``spec.d``
    set the horizon and the number of states. Coordinates 0..d-2 are compared.
    """
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise InvalidInputError("N_list must be increasing")
    eps, T = spec.epsilon, spec.T
    times = [0.0, T / 2, T]
    rows = []
    for N in N_list:
        steps = [int(math.floor(N * t + 1e-9)) for t in times]
        run = simulate_particles(alpha, eps, p0, N, T, n_paths, seed + 7919 * N,
                                 record_steps=steps, initial=initial)
        start = run.mu[0, 0]
        lim = simulate_limit(alpha, eps, start, T, sde_paths or n_paths, sde_dt,
                             seed + 7919 * N + 1, times)
        for r, t in enumerate(times):
            for i in range(spec.d - 1):
                (pm, pse), (pv, pvse) = _moment_stats(run.mu[:, r, i])
                (lm, lse), (lv, lvse) = _moment_stats(lim[t][:, i])
                rows.append(ConvergenceRow(N, t, abs(pm - lm), math.hypot(pse, lse), f"mean_{i}"))
                rows.append(ConvergenceRow(N, t, abs(pv - lv), math.hypot(pvse, lvse), f"var_{i}"))
    return ConvergenceTable(rows, N_list)
