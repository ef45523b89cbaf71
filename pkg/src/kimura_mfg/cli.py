"""Command-line entry point: ``python -m kimura_mfg --config run.json``.

Exit codes: 0 success, 2 invalid config or input, 3 numerical failure,
4 failed check in ``--check`` mode.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidInputError, NumericalFailure

log = logging.getLogger("kimura_mfg")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("solve-master", "simulate-mfg", "verify-value", "zero-noise", "linear-kimura",
            "coupling", "particle", "exp-moment", "diagnostics")
NUMERIC_KEYS = ("grid_n", "dt_pde", "dt_sde", "n_paths", "picard_tol")
DEFAULT_NUMERICS = {"grid_n": 50, "dt_pde": 1e-3, "dt_sde": 1e-3, "n_paths": 1000, "picard_tol": 1e-9}


def _dump(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise InvalidInputError("config must be a JSON object")
    return cfg


def validate(cfg: dict) -> dict:
    """Fill defaults and check the run config; returns a normalised copy."""
    out = dict(cfg)
    cmd = out.get("command")
    if cmd not in COMMANDS:
        raise InvalidInputError(f"command must be one of {list(COMMANDS)}, got {cmd!r}")
    if "output_dir" not in out:
        raise InvalidInputError("output_dir is required")
    seed = out.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise InvalidInputError("seed must be a 64-bit non-negative integer")
    num = dict(DEFAULT_NUMERICS)
    num.update(out.get("numerics", {}))
    for k in NUMERIC_KEYS:
        v = num[k]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise InvalidInputError(f"numerics.{k} must be positive")
    for k in ("grid_n", "n_paths"):
        if int(num[k]) != num[k]:
            raise InvalidInputError(f"numerics.{k} must be an integer")
        num[k] = int(num[k])
    out["numerics"] = num
    out["seed"] = seed
    out.setdefault("params", {})
    if not isinstance(out["params"], dict):
        raise InvalidInputError("params must be an object")
    return out


# ---------------------------------------------------------------------------
# commands; each returns the list of written files


def _spec(cfg):
    from .model import ModelSpec
    if "model" not in cfg:
        raise InvalidInputError(f"{cfg['command']} needs a model section")
    return ModelSpec.from_dict(cfg["model"])


def _master(cfg, spec=None, n=None, dt=None, lag="previous"):
    from .master_solver import solve_master
    from .simplex import build_grid
    spec = _spec(cfg) if spec is None else spec
    num = cfg["numerics"]
    return solve_master(spec, build_grid(spec.d, n or num["grid_n"]), dt or num["dt_pde"],
                        picard_tol=num["picard_tol"], initial_lag=lag)


def _p0(cfg, spec, default=None):
    from .simplex import as_point
    p = cfg["params"].get("p0", default)
    if p is None:
        p = [1.0 / spec.d] * spec.d
    return as_point(p)


def cmd_solve_master(cfg, out: Path):
    from .master_solver import residual
    sol = _master(cfg, lag=cfg["params"].get("initial_lag", "previous"))
    files = sol.write(out)
    res = residual(sol)
    files.append(_dump(out / "summary.json", {"residual": res.to_dict(), **sol.convergence_report()}))
    return files


def cmd_simulate_mfg(cfg, out: Path):
    from .mfg_system import simulate_equilibrium
    from .wf_sde import SchemeConfig
    sol = _master(cfg)
    num = cfg["numerics"]
    p0 = _p0(cfg, sol.spec)
    every = int(cfg["params"].get("record_every", 10))
    b = simulate_equilibrium(sol, p0, num["n_paths"], SchemeConfig(num["dt_sde"]), cfg["seed"], every)
    b.to_csv(out / "paths.csv")
    summary = {"mean_terminal": b.P[:, -1].mean(axis=0).tolist(),
               "min_coordinate": float(b.min_coordinate.min()), "clip_events": b.clip_events}
    return [out / "paths.csv", _dump(out / "summary.json", summary)]


def cmd_verify_value(cfg, out: Path):
    from .mfg_system import deviation_registry, suboptimality_probe, verify_value, verify_value_refined
    from .wf_sde import SchemeConfig
    spec = _spec(cfg)
    num = cfg["numerics"]
    p0 = _p0(cfg, spec)
    l = int(cfg["params"].get("start_state", 0))
    sde = SchemeConfig(num["dt_sde"])
    fine = _master(cfg, spec)
    payload = {}
    if cfg["params"].get("refine", True):
        coarse = _master(cfg, spec, n=max(num["grid_n"] // 2, 2), dt=2 * num["dt_pde"])
        r = verify_value_refined(coarse, fine, p0, l, num["n_paths"], sde, cfg["seed"])
        payload["refined"] = {"fine": r.fine.__dict__, "coarse": r.coarse.__dict__,
                              "extrapolated_gap": r.extrapolated_gap, "std_err": r.std_err, "z": r.z}
    else:
        payload["value"] = verify_value(fine, p0, l, num["n_paths"], sde, cfg["seed"]).__dict__
    gaps = suboptimality_probe(fine, p0, l, deviation_registry(fine), num["n_paths"], sde, cfg["seed"] + 1)
    payload["suboptimality"] = [{"name": g.name, "gap": g.gap, "std_err": g.std_err, "z": g.z} for g in gaps]
    return [_dump(out / "value_check.json", payload)]


def cmd_zero_noise(cfg, out: Path):
    from .mfg_system import write_equilibria, zero_noise_equilibria
    spec = _spec(cfg)
    pr = cfg["params"]
    rep = zero_noise_equilibria(spec, _p0(cfg, spec), int(pr.get("guess_grid", 101)),
                                picard_tol=float(pr.get("tol", 1e-8)),
                                n_steps=int(pr.get("n_steps", 200)))
    path = out / "equilibria.json"
    write_equilibria(path, rep)
    return [path]


def cmd_linear_kimura(cfg, out: Path):
    from .checks import quadratic_moment
    from .kimura_pde import LinearKimuraProblem, solve_linear, write_sidecar
    from .simplex import build_grid
    pr = cfg["params"]
    eps, T = float(pr.get("eps", 0.5)), float(pr.get("T", 1.0))
    d = int(pr.get("d", 2))
    kind = pr.get("terminal", "quadratic")
    idx = int(pr.get("index", 0))
    if not 0 <= idx < d:
        raise InvalidInputError("index out of range")
    if kind == "linear":
        ell, exact = (lambda P: P[:, idx]), (lambda P: P[:, idx])
    elif kind == "quadratic":
        ell = lambda P: P[:, idx] ** 2
        exact = lambda P: quadratic_moment(eps, T, 0.0, P[:, [idx]])
    else:
        raise InvalidInputError("terminal must be 'linear' or 'quadratic'")
    pb = LinearKimuraProblem(eps, T, ell, description={"terminal": kind, "index": idx})
    grid = build_grid(d, cfg["numerics"]["grid_n"])
    u = solve_linear(pb, grid, cfg["numerics"]["dt_pde"])
    u.to_csv(out / "u.csv")
    write_sidecar(out / "u.json", pb, grid, cfg["numerics"]["dt_pde"])
    err = float(np.max(np.abs(u.values[0, :, 0] - exact(grid.nodes))))
    return [out / "u.csv", out / "u.json", _dump(out / "summary.json", {"sup_error_t0": err})]


def cmd_coupling(cfg, out: Path):
    from .coupling_lab import coupling_sweep, rotated_noise_check
    from .wf_sde import SchemeConfig
    spec = _spec(cfg)
    pr = cfg["params"]
    m = int(pr.get("m", 1))
    sw = coupling_sweep(spec, m, pr.get("p_circ", [0.3] * m), pr["p"], pr.get("direction", [1, -1]),
                        pr.get("gaps", [1e-3 * 2**k for k in range(5)]), cfg["numerics"]["n_paths"],
                        SchemeConfig(cfg["numerics"]["dt_sde"]), cfg["seed"],
                        resolution=float(pr.get("resolution", 4.0)))
    path = out / "coupling.csv"
    with path.open("w") as fh:
        fh.write("gap,failure_prob,std_err\n")
        for g, p, s in sw.rows():
            fh.write(f"{g!r},{p!r},{s!r}\n")
    rot = rotated_noise_check(int(pr.get("rotated_steps", 20000)), spec.d - m, cfg["numerics"]["dt_sde"], cfg["seed"])
    summary = {"exponent": sw.exponent, "isotone": sw.isotone,
               "counts": [r.counts for r in sw.results],
               "rotated_noise_max_abs_z": rot.max_abs_z, "antisymmetry_defect": rot.antisymmetry_defect}
    return [path, _dump(out / "summary.json", summary)]


def _rates(pr, d):
    from .model import ConstantRates
    R = np.asarray(pr.get("rates", np.ones((d, d)) - np.eye(d)), dtype=float)
    return ConstantRates(R)


def cmd_particle(cfg, out: Path):
    from .particle_system import convergence_study, simulate_particles
    spec = _spec(cfg)
    pr = cfg["params"]
    alpha = _rates(pr, spec.d)
    p0 = _p0(cfg, spec)
    N = int(pr.get("N", 100))
    run = simulate_particles(alpha, spec.epsilon, p0, N, spec.T, 1, cfg["seed"], keep_players=True)
    files = [out / "trajectory.csv", out / "players.csv"]
    with files[0].open("w") as fh:
        fh.write("m,i,mu_bar_i\n")
        for m in range(run.mu.shape[1]):
            for i in range(spec.d):
                fh.write(f"{m},{i + 1},{float(run.mu[0, m, i])!r}\n")
    with files[1].open("w") as fh:
        fh.write("m,l,X,Y\n")
        for m in range(run.X.shape[1]):
            for l in range(N):
                fh.write(f"{m},{l + 1},{int(run.X[0, m, l]) + 1},{float(run.Y[0, m, l])!r}\n")
    summary = {"mass_defect": run.mass_defect}
    if "N_list" in pr:
        tab = convergence_study(spec, alpha, p0, pr["N_list"], cfg["numerics"]["n_paths"], cfg["seed"],
                                sde_dt=cfg["numerics"]["dt_sde"])
        summary["convergence"] = tab.to_dict()
        summary["monotone"] = tab.monotone()
    files.append(_dump(out / "summary.json", summary))
    return files


def cmd_exp_moment(cfg, out: Path):
    from .wf_sde import SchemeConfig, exp_moment_scaling
    spec = _spec(cfg)
    pr = cfg["params"]
    res = exp_moment_scaling(spec, pr.get("starts", [0.05, 0.1, 0.2, 0.4]), float(pr.get("lam", 1.0)),
                             cfg["numerics"]["n_paths"], SchemeConfig(cfg["numerics"]["dt_sde"]), cfg["seed"])
    return [_dump(out / "exp_moment.json", res.to_dict())]


def cmd_diagnostics(cfg, out: Path):
    from .coupling_lab import identity_in_law_check
    from .particle_system import ParticleEnsemble, allocate, moment_diagnostics
    from .wf_sde import SchemeConfig
    spec = _spec(cfg)
    pr = cfg["params"]
    alpha = _rates(pr, spec.d)
    N = int(pr.get("N", 1000))
    ens = ParticleEnsemble.from_positions(allocate(_p0(cfg, spec), N), spec.d)
    rep = moment_diagnostics(ens, alpha, float(pr.get("particle_eps", spec.epsilon)),
                             int(pr.get("n_replicates", 10000)), cfg["seed"])
    payload = {"moments": rep.to_dict()}
    if spec.d >= 3:
        law = identity_in_law_check(spec, int(pr.get("m", 1)), _p0(cfg, spec), spec.T,
                                    cfg["numerics"]["n_paths"], cfg["seed"],
                                    SchemeConfig(cfg["numerics"]["dt_sde"]))
        payload["identity_in_law_max_abs_z"] = law.max_abs_z
    return [_dump(out / "diagnostics.json", payload)]


DISPATCH = {
    "solve-master": cmd_solve_master, "simulate-mfg": cmd_simulate_mfg,
    "verify-value": cmd_verify_value, "zero-noise": cmd_zero_noise,
    "linear-kimura": cmd_linear_kimura, "coupling": cmd_coupling, "particle": cmd_particle,
    "exp-moment": cmd_exp_moment, "diagnostics": cmd_diagnostics,
}


def run(cfg: dict, config_path: str | None = None) -> int:
    cfg = validate(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        files = DISPATCH[cfg["command"]](cfg, out)
    for w in caught:
        log.warning("%s", w.message)
    manifest = {
        "artifact_version": __version__,
        "config": cfg,
        "config_path": config_path,
        "wall_time_s": time.perf_counter() - t0,
        "warnings": sorted({str(w.message) for w in caught}),
        "outputs": [{"path": p.relative_to(out).as_posix(), "sha256": _sha256(p)} for p in files],
    }
    _dump(out / "manifest.json", manifest)
    return EXIT_OK


def check(cfg: dict, seed: int = 0) -> int:
    from .checks import CASES, run_case
    case = cfg.get("case")
    if case not in CASES:
        raise InvalidInputError(f"case must be one of {sorted(CASES)}, got {case!r}")
    tol = cfg.get("tolerance")
    if tol is not None and (isinstance(tol, bool) or not isinstance(tol, (int, float)) or tol < 0):
        raise InvalidInputError("tolerance must be a non-negative number")
    rows = run_case(case, int(cfg.get("seed", seed)), tol)
    width = max(len(r["metric"]) for r in rows)
    print(f"{'metric':<{width}}  {'value':>12}  {'tolerance':>12}  result")
    for r in rows:
        print(f"{r['metric']:<{width}}  {r['value']:>12.4g}  {r['tolerance']:>12.4g}  "
              f"{'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_CHECK


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("KIMURA_MFG_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InvalidInputError("KIMURA_MFG_THREADS must be an integer") from None
    return None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="kimura-mfg", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    ap.add_argument("--check", action="store_true", help="run a registered acceptance case")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        n = _threads(args.threads)
        if n is not None and n < 1:
            raise InvalidInputError("thread count must be positive")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=n):
            if args.check:
                return check(cfg)
            return run(cfg, args.config)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
