import csv
import json
import subprocess
import sys

import pytest

from ybcavity.cli import COMMANDS, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main

FAST = {
    "master_seed": 3,
    "site": {"preset": "strong"},
    "noise": {"sigma": 0.0, "gamma_phi": 0.0},
    "protocol": {
        "shots": 400,
        "noise_samples": 2,
        "pump_offsets_MHz": [-5.0, 0.0, 5.0],
        "rabi_durations": {"start": 0.0, "stop": 2e-7, "num": 11},
        "ramsey_delays": {"start": 0.0, "stop": 2e-7, "num": 9},
        "echo_delays": {"start": 0.0, "stop": 4e-7, "num": 9},
        "g2_max_lag": 20,
        "g2_far_lag_min": 5,
    },
}
QUICK = ["lifetime", "pump-probe", "rabi", "ramsey", "echo", "g2", "ple", "lifetimes", "purcell", "reflection", "bragg"]


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def _run(tmp_path, sub, data=FAST, out="out", extra=()):
    cfg = _write(tmp_path, data)
    return main([sub, "--config", cfg, "--out", str(tmp_path / out), *extra])


def test_every_subcommand_is_listed():
    assert set(QUICK) | {"calibrate"} == set(COMMANDS)


@pytest.mark.parametrize("sub", QUICK)
def test_subcommand_writes_artifacts(tmp_path, sub, capsys):
    assert _run(tmp_path, sub) == EXIT_OK
    out = tmp_path / "out"
    with open(out / f"{sub}.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) >= 2 and all(len(r) == len(rows[0]) for r in rows)
    summary = json.loads((out / f"{sub}.json").read_text())
    assert summary["subcommand"] == sub
    assert summary["master_seed"] == 3
    assert len(summary["inputs_hash"]) == 64
    assert json.loads((out / "resolved_config.json").read_text())["master_seed"] == 3
    assert json.loads(capsys.readouterr().out) == summary["derived"]


@pytest.mark.parametrize("sub", ["g2", "rabi", "ple"])
def test_reruns_are_byte_identical(tmp_path, sub):
    assert _run(tmp_path, sub, out="a") == EXIT_OK
    assert _run(tmp_path, sub, out="b") == EXIT_OK
    for name in (f"{sub}.csv", f"{sub}.json", "resolved_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_record(tmp_path):
    _run(tmp_path, "g2", out="a")
    _run(tmp_path, "g2", out="b", extra=["--seed", "4"])
    a = json.loads((tmp_path / "a" / "g2.json").read_text())
    b = json.loads((tmp_path / "b" / "g2.json").read_text())
    assert b["master_seed"] == 4
    assert a["inputs_hash"] != b["inputs_hash"]


def test_shots_override(tmp_path):
    _run(tmp_path, "lifetime", extra=["--shots", "1234"])
    assert json.loads((tmp_path / "out" / "lifetime.json").read_text())["shots"] == 1234


def test_known_values(tmp_path, capsys):
    _run(tmp_path, "purcell")
    d = json.loads(capsys.readouterr().out)
    assert d["F_max"] == pytest.approx(236.9, abs=0.1)
    assert d["tau"] == pytest.approx(4.2e-6, rel=0.01)
    _run(tmp_path, "lifetime")
    d = json.loads(capsys.readouterr().out)
    assert d["tau_fit"] == pytest.approx(4.2e-6, rel=0.01)
    _run(tmp_path, "reflection")
    assert json.loads(capsys.readouterr().out)["Q_fit"] == pytest.approx(5300, rel=0.01)
    _run(tmp_path, "bragg")
    assert json.loads(capsys.readouterr().out)["design_in_gap"] is True


def test_config_errors_exit_2(tmp_path, capsys):
    assert _run(tmp_path, "purcell", {"levels": {"branch_A": 1.2}}) == EXIT_CONFIG
    assert "levels.branch_A" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"site\": [\n")
    assert main(["purcell", "--config", str(bad)]) == EXIT_CONFIG
    assert "line" in capsys.readouterr().err
    assert main(["purcell", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert _run(tmp_path, "purcell", [1, 2]) == EXIT_CONFIG


def test_numerical_failure_exit_3(tmp_path, capsys):
    data = {"ensemble": {"footprint_area": 1e-20}}
    assert _run(tmp_path, "lifetimes", data) == EXIT_NUMERICAL
    assert "no ions" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["purcell"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["purcell", "--config", "x", "--shots", "5", "--paper-scale"])


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, FAST)
    proc = subprocess.run(
        [sys.executable, "-m", "ybcavity", "purcell", "--config", cfg, "--out", str(tmp_path / "m")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["F_max"] == pytest.approx(236.9, abs=0.1)
