from __future__ import annotations

import pytest

ANTI = {"d": 2, "epsilon": 0.5, "kappa": 15.25, "delta": 0.05, "T": 1.0,
        "g": {"kind": "anti_monotone_pair", "params": {"gamma": 1.0}}}

# one small config per command; output_dir is filled in per test
SMALL_CONFIGS = {
    "solve-master": {"model": ANTI, "numerics": {"grid_n": 40, "dt_pde": 1e-3}, "seed": 1},
    "simulate-mfg": {"model": ANTI, "numerics": {"grid_n": 40, "dt_pde": 1e-3, "dt_sde": 2e-3, "n_paths": 50},
                     "params": {"p0": [0.4, 0.6], "record_every": 50}, "seed": 1},
    "verify-value": {"model": ANTI, "numerics": {"grid_n": 40, "dt_pde": 1e-3, "dt_sde": 2e-3, "n_paths": 300},
                     "params": {"p0": [0.4, 0.6]}, "seed": 1},
    "zero-noise": {"model": {"d": 2, "epsilon": 0.0, "kappa": 0.1, "delta": 0.1, "T": 1.0,
                             "g": {"kind": "linear", "params": {"offset": -0.5, "matrix": [[1.0, 0.0], [0.0, 1.0]]}}},
                   "params": {"guess_grid": 11}, "seed": 1},
    "linear-kimura": {"numerics": {"grid_n": 50, "dt_pde": 4e-3}, "params": {"terminal": "quadratic"}},
    "coupling": {"model": {"d": 3, "epsilon": 0.5, "kappa": 2.0, "delta": 0.14, "T": 2.0},
                 "numerics": {"n_paths": 200, "dt_sde": 1e-3},
                 "params": {"m": 1, "p_circ": [0.3], "p": [0.5, 0.5], "rotated_steps": 2000}, "seed": 3},
    "particle": {"model": {"d": 2, "epsilon": 0.1, "kappa": 1.0, "delta": 0.1, "T": 0.5},
                 "numerics": {"n_paths": 50, "dt_sde": 1e-3},
                 "params": {"N": 40, "p0": [0.3, 0.7], "rates": [[0, 5], [5, 0]], "N_list": [50, 100]},
                 "seed": 3},
    "exp-moment": {"model": {"d": 2, "epsilon": 0.5, "kappa": 2.0, "delta": 0.17, "T": 0.2},
                   "numerics": {"n_paths": 200, "dt_sde": 1e-3}, "seed": 3},
    "diagnostics": {"model": {"d": 3, "epsilon": 0.3, "kappa": 1.0, "delta": 0.1, "T": 0.2},
                    "numerics": {"n_paths": 200, "dt_sde": 1e-2},
                    "params": {"N": 100, "n_replicates": 2000, "p0": [0.2, 0.3, 0.5]}, "seed": 3},
}


def small_config(command: str, out_dir) -> dict:
    cfg = {"command": command, "output_dir": str(out_dir)}
    cfg.update(SMALL_CONFIGS[command])
    return cfg


@pytest.fixture
def small_configs():
    return small_config
