from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from conftest import SMALL_CONFIGS, small_config
from kimura_mfg.cli import main


def run_cli(tmp_path: Path, cfg: dict, *extra: str) -> int:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return main(["--config", str(path), *extra])


def outputs(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.mark.parametrize("command", sorted(SMALL_CONFIGS))
def test_command_is_byte_reproducible(tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(tmp_path, small_config(command, a)) == 0
    assert run_cli(tmp_path, small_config(command, b)) == 0
    oa, ob = outputs(a), outputs(b)
    assert oa and oa == ob
    man = json.loads((a / "manifest.json").read_text())
    for entry in man["outputs"]:
        assert entry["sha256"] == hashlib.sha256((a / entry["path"]).read_bytes()).hexdigest()


def test_seed_override_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(tmp_path, small_config("exp-moment", a)) == 0
    assert run_cli(tmp_path, small_config("exp-moment", b), "--seed", "4") == 0
    assert outputs(a) != outputs(b)


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"command":\n "x",,}')
    assert main(["--config", str(bad)]) == 2
    assert "line" in capsys.readouterr().err
    assert run_cli(tmp_path, {"command": "nope", "output_dir": str(tmp_path)}) == 2
    cfg = small_config("linear-kimura", tmp_path / "o")
    cfg["numerics"] = {"grid_n": 50, "dt_pde": -1.0}
    assert run_cli(tmp_path, cfg) == 2
    # a time step that breaks the upwind bound is refused
    cfg = small_config("solve-master", tmp_path / "o")
    cfg["numerics"] = {"grid_n": 100, "dt_pde": 5e-2}
    assert run_cli(tmp_path, cfg) == 3


def test_check_mode(tmp_path, capsys):
    assert run_cli(tmp_path, {"case": "linear_oracle"}, "--check") == 0
    assert "PASS" in capsys.readouterr().out
    assert run_cli(tmp_path, {"case": "quadratic_oracle", "tolerance": 1e-9}, "--check") == 4
    assert run_cli(tmp_path, {"case": "missing"}, "--check") == 2
