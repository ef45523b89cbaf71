"""The game built on a master solution.

Equilibrium simulation, the value identity U^l(0, p0) = J(beta*), paired
suboptimality probes, and the noiseless forward-backward system used to look
for several equilibria.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .master_solver import MasterFeedback, MasterSolution
from .model import (FeedbackStrategy, FunctionRates, ModelSpec, forced_rates, hamiltonians,
                    kolmogorov_drift, optimal_rates)
from .simplex import as_point
from .wf_sde import PathBundle, SchemeConfig, mean_and_se, path_costs, simulate


def simulate_equilibrium(sol: MasterSolution, p0, n_paths: int, cfg: SchemeConfig, seed: int,
                         record_every: int = 1) -> PathBundle:
    """Population under the equilibrium feedback, with u_t = U(t, P_t) stored in extras."""
    fb = MasterFeedback(sol)
    bundle = simulate(sol.spec, fb, p0, n_paths, cfg, seed, record_every=record_every)
    u = np.empty_like(bundle.P)
    for r, t in enumerate(bundle.times):
        if n_paths:
            u[:, r] = sol.U_at(float(t), bundle.P[:, r])
    bundle.extras["u"] = u
    return bundle


@dataclass(frozen=True)
class ValueCheck:
    estimate: float
    std_err: float
    master_value: float
    z: float
    start_state: int

    @property
    def gap(self) -> float:
        return self.estimate - self.master_value


def verify_value(sol: MasterSolution, p0, l: int, n_paths: int, cfg: SchemeConfig, seed: int,
                 substeps: int = 1) -> ValueCheck:
    """Monte-Carlo cost under the equilibrium feedback against U^l(0, p0); ``l`` is 0-based."""
    p0 = as_point(p0)
    fb = MasterFeedback(sol)
    costs = path_costs(sol.spec, fb, [fb], l, p0, n_paths, cfg, seed, substeps)[0]
    est, se = mean_and_se(costs)
    u = float(sol.U_at(0.0, p0[None, :])[0, l])
    z = (est - u) / se if se > 0 else (0.0 if est == u else math.inf)
    return ValueCheck(est, se, u, z, l)


@dataclass(frozen=True)
class RefinedValueCheck:
    fine: ValueCheck
    coarse: ValueCheck
    extrapolated_gap: float
    std_err: float

    @property
    def offset(self) -> float:
        """Measured discretization offset gap_coarse - gap_fine."""
        return self.coarse.gap - self.fine.gap

    @property
    def z(self) -> float:
        if self.std_err > 0:
            return self.extrapolated_gap / self.std_err
        return 0.0 if self.extrapolated_gap == 0 else math.inf


def verify_value_refined(coarse: MasterSolution, fine: MasterSolution, p0, l: int, n_paths: int,
                         cfg: SchemeConfig, seed: int) -> RefinedValueCheck:
    """Value identity on a refinement pair with first-order extrapolation.

    The fine run uses ``cfg``; the coarse run steps 2 cfg.dt on the summed
    fine increments, so both see the same Brownian paths. The extrapolated gap
    2 gap_fine - gap_coarse removes the leading discretization error.
    """
    p0 = as_point(p0)
    cfg_c = SchemeConfig(2.0 * cfg.dt, cfg.clip_floor)
    fb_f, fb_c = MasterFeedback(fine), MasterFeedback(coarse)
    xf = path_costs(fine.spec, fb_f, [fb_f], l, p0, n_paths, cfg, seed)[0]
    xc = path_costs(coarse.spec, fb_c, [fb_c], l, p0, n_paths, cfg_c, seed, substeps=2)[0]
    uf = float(fine.U_at(0.0, p0[None, :])[0, l])
    uc = float(coarse.U_at(0.0, p0[None, :])[0, l])

    def check(x, u):
        est, se = mean_and_se(x)
        return ValueCheck(est, se, u, (est - u) / se if se > 0 else math.inf, l)

    ext, se = mean_and_se(2.0 * xf - xc)
    return RefinedValueCheck(check(xf, uf), check(xc, uc), ext - (2.0 * uf - uc), se)


@dataclass(frozen=True)
class SuboptimalityGap:
    name: str
    gap: float
    std_err: float

    @property
    def z(self) -> float:
        return self.gap / self.std_err if self.std_err > 0 else (0.0 if self.gap == 0 else math.inf)


def deviation_registry(sol: MasterSolution) -> dict[str, FeedbackStrategy]:
    """Deviations from the equilibrium feedback used by the suboptimality probe."""
    fb = MasterFeedback(sol)
    d = sol.spec.d
    bump = np.zeros((d, d))
    bump[0, 1] = 1.0
    return {
        "zero": FunctionRates(lambda t, P: np.zeros(P.shape + (P.shape[-1],)), 0.0),
        "plus_one_on_1_to_2": FunctionRates(lambda t, P: fb.rates(t, P) + bump, fb.sup_norm + 1),
        "half": FunctionRates(lambda t, P: 0.5 * fb.rates(t, P), fb.sup_norm),
    }


def suboptimality_probe(sol: MasterSolution, p0, l: int, beta_alt, n_paths: int,
                        cfg: SchemeConfig, seed: int) -> list[SuboptimalityGap]:
    """Paired gaps J(beta_alt) - J(beta*) on common random numbers.

    ``beta_alt`` is a strategy, a list of strategies, or a dict name -> strategy.
    The population always follows the equilibrium feedback.
    """
    if isinstance(beta_alt, FeedbackStrategy):
        alts = {"alt": beta_alt}
    elif isinstance(beta_alt, dict):
        alts = dict(beta_alt)
    else:
        alts = {f"alt_{k}": b for k, b in enumerate(beta_alt)}
    fb = MasterFeedback(sol)
    names = list(alts)
    costs = path_costs(sol.spec, fb, [fb] + [alts[k] for k in names], l, p0, n_paths, cfg, seed)
    out = []
    for k, name in enumerate(names):
        gap, se = mean_and_se(costs[k + 1] - costs[0])
        out.append(SuboptimalityGap(name, gap, se))
    return out


# ---------------------------------------------------------------------------
# noiseless equilibria


@dataclass
class ZeroNoiseEquilibrium:
    times: np.ndarray
    flow: np.ndarray          # (M+1, d)
    values: np.ndarray        # (M+1, d)
    residual: float
    seed_guess: float
    sweeps: int

    def to_dict(self) -> dict:
        return {"seed_guess": self.seed_guess, "residual": self.residual, "sweeps": self.sweeps,
                "terminal_flow": self.flow[-1].tolist(), "initial_values": self.values[0].tolist()}


@dataclass
class ZeroNoiseReport:
    equilibria: list
    converged: int
    attempted: int
    diagnostics: list = field(default_factory=list)


def _value_backward(spec: ModelSpec, times: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Explicit backward Euler for -du/dt = H(u) + f + sum_j phi(P_j)(u_j - u_i).

    ``flow`` has shape (..., M+1, d); the leading axes are independent runs.
    """
    M = times.size - 1
    dt = times[1] - times[0]
    u = np.empty_like(flow)
    u[..., M, :] = spec.terminal_cost(flow[..., M, :])
    for n in range(M - 1, -1, -1):
        P, y = flow[..., n + 1, :], u[..., n + 1, :]
        ph = spec.phi(P)
        F = (hamiltonians(y) + spec.running_cost(times[n + 1], P)
             + np.sum(ph * y, axis=-1, keepdims=True) - ph.sum(axis=-1, keepdims=True) * y)
        u[..., n, :] = y + dt * F
    return u


def _flow_forward(spec: ModelSpec, times: np.ndarray, values: np.ndarray, p0) -> np.ndarray:
    M = times.size - 1
    dt = times[1] - times[0]
    flow = np.empty_like(values)
    flow[..., 0, :] = p0
    for n in range(M):
        P = flow[..., n, :]
        R = forced_rates(spec, P, optimal_rates(values[..., n, :]))
        nxt = np.maximum(P + dt * kolmogorov_drift(P, R), 0.0)
        flow[..., n + 1, :] = nxt / nxt.sum(axis=-1, keepdims=True)
    return flow


def zero_noise_equilibria(spec: ModelSpec, p0, guess_grid: Sequence[float] | int = 101,
                          picard_tol: float = 1e-8, n_steps: int = 200, damping: float = 0.5,
                          max_sweeps: int = 5000) -> ZeroNoiseReport:
    """Multi-start damped forward-backward sweeps for the noiseless game (d = 2).

    Each guess is a terminal value of P^1; the initial flow interpolates
    linearly from p0 to it. All guesses are swept together. The relaxation
    weight starts at ``damping`` and is halved for a guess whenever its sweep
    change grows. Converged flows closer than 10 * picard_tol in sup distance
    are merged.
    """
    if spec.d != 2:
        raise InvalidInputError("the noiseless probe is implemented for d = 2")
    if spec.epsilon != 0:
        raise InvalidInputError("zero_noise_equilibria needs epsilon = 0")
    p0 = as_point(p0)
    if isinstance(guess_grid, int):
        guess_grid = np.linspace(0.0, 1.0, guess_grid)
    guesses = np.asarray(guess_grid, dtype=float)
    times = np.linspace(0.0, spec.T, n_steps + 1)
    s = (times / spec.T)[None, :, None]
    targets = np.stack([guesses, 1.0 - guesses], axis=1)[:, None, :]
    flow = (1.0 - s) * p0 + s * targets
    change = np.full(guesses.size, np.inf)
    sweeps = np.zeros(guesses.size, dtype=np.int64)
    active = np.ones(guesses.size, dtype=bool)
    theta = np.full(guesses.size, float(damping))
    for sweep in range(1, max_sweeps + 1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        sub = flow[idx]
        new = _flow_forward(spec, times, _value_backward(spec, times, sub), p0)
        ch = np.max(np.abs(new - sub), axis=(1, 2))
        # an oscillating sweep (growing change) gets a smaller relaxation weight
        grew = ch > change[idx]
        theta[idx[grew]] = np.maximum(theta[idx[grew]] * 0.5, 1e-3)
        w = theta[idx][:, None, None]
        flow[idx] = (1.0 - w) * sub + w * new
        change[idx] = ch
        sweeps[idx] = sweep
        active[idx[ch < picard_tol]] = False
    found: list[ZeroNoiseEquilibrium] = []
    diagnostics = []
    ok = change < picard_tol
    if np.any(ok):
        values = _value_backward(spec, times, flow[ok])
        res = np.max(np.abs(_flow_forward(spec, times, values, p0) - flow[ok]), axis=(1, 2))
        for r, k in enumerate(np.nonzero(ok)[0]):
            f = flow[k]
            if all(np.max(np.abs(e.flow - f)) > 10 * picard_tol for e in found):
                found.append(ZeroNoiseEquilibrium(times, f.copy(), values[r].copy(), float(res[r]),
                                                  float(guesses[k]), int(sweeps[k])))
    for k in np.nonzero(~ok)[0]:
        diagnostics.append({"guess": float(guesses[k]), "last_change": float(change[k])})
    found.sort(key=lambda e: e.flow[-1, 0])
    return ZeroNoiseReport(found, int(ok.sum()), int(guesses.size), diagnostics)


def write_equilibria(path, report: ZeroNoiseReport) -> None:
    Path(path).write_text(json.dumps({
        "n_equilibria": len(report.equilibria), "converged": report.converged,
        "attempted": report.attempted,
        "equilibria": [e.to_dict() for e in report.equilibria],
        "non_converged": report.diagnostics,
    }, indent=2, sort_keys=True))
