import json

import pytest
import yaml

from infostate.cli import main
from infostate.scenarios import SCENARIOS

BUILTINS = ["bench-bimodal", "cavity-hinfty", "lqg-1d", "qubit-stabilize"]


def _csvs(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def _write(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_list_is_stable(capsys):
    assert main(["list"]) == 0
    first = capsys.readouterr().out
    assert main(["list"]) == 0
    assert capsys.readouterr().out == first
    assert sorted(ln.split()[0] for ln in first.strip().splitlines()) == BUILTINS
    assert sorted(SCENARIOS) == BUILTINS


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_runs_with_defaults(name, tmp_path, capsys):
    out = tmp_path / name
    assert main(["run", name, "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["config"]["scenario"] == name
    assert "seed" in rep["defaulted"]
    assert (out / "metrics.csv").exists()
    assert "hash=" in capsys.readouterr().out


@pytest.mark.parametrize("name", BUILTINS)
def test_rerun_byte_identical(name, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", name, "--seed", "11", "--out", str(a)]) == 0
    assert main(["run", name, "--seed", "11", "--out", str(b)]) == 0
    ca, cb = _csvs(a), _csvs(b)
    assert ca and ca == cb


def test_seed_changes_output(tmp_path):
    main(["run", "lqg-1d", "--seed", "1", "--out", str(tmp_path / "a")])
    main(["run", "lqg-1d", "--seed", "2", "--out", str(tmp_path / "b")])
    assert _csvs(tmp_path / "a")["trajectory.csv"] != _csvs(tmp_path / "b")["trajectory.csv"]


def test_unknown_scenario(capsys):
    assert main(["run", "no-such-thing"]) == 2
    err = capsys.readouterr().err
    for name in BUILTINS:
        assert name in err


def test_validation_lists_every_problem(tmp_path, capsys):
    cfg = dict(scenario="lqg-1d", seed=1, solver=dict(T=1.0, dt=0.3, n_paths=1, bogus=3), cost=dict(mu=-1.0))
    assert main(["run", _write(tmp_path, "bad.yaml", cfg)]) == 2
    err = capsys.readouterr().err
    for word in ("dt", "n_paths", "bogus", "mu"):
        assert word in err


def test_config_file_requires_seed(tmp_path):
    assert main(["run", _write(tmp_path, "noseed.yaml", dict(scenario="lqg-1d"))]) == 2


def test_type_error_reported(tmp_path, capsys):
    cfg = dict(scenario="lqg-1d", seed=1, solver=dict(n_paths="many"))
    assert main(["run", _write(tmp_path, "typed.yaml", cfg)]) == 2
    assert "n_paths" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "cavity-hinfty", "--out", str(blocker / "sub")]) == 4


def test_output_field_used(tmp_path):
    out = tmp_path / "from_cfg"
    cfg = dict(scenario="cavity-hinfty", seed=0, output=str(out))
    assert main(["run", _write(tmp_path, "c.yaml", cfg)]) == 0
    assert (out / "report.json").exists()


def test_json_config_accepted(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(dict(scenario="cavity-hinfty", seed=0)))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 0


def test_qubit_report_contents(tmp_path):
    out = tmp_path / "q"
    cfg = dict(scenario="qubit-stabilize", seed=2, solver=dict(n_traj=200))
    assert main(["run", _write(tmp_path, "q.yaml", cfg), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["metrics"]["cost"]["stderr"] > 0
    assert rep["checks"]["innovations"]["passed"]
    assert "density_repairs" in rep["counters"]
    assert "solver.n_traj" not in rep["defaulted"]


def test_threads_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv("INFOSTATE_THREADS", "1")
    out = tmp_path / "t"
    assert main(["run", "cavity-hinfty", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["timing"]["threads"] == 1


def test_compare_identical_is_zero(tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "lqg-1d", "lqg-1d", "--seed", "4", "--out", str(out)]) == 0
    body = json.loads((out / "compare.json").read_text())
    assert body["difference"]["mean"] == 0.0 and body["difference"]["stderr"] == 0.0
    assert (out / "compare.csv").exists()


def test_compare_dp_beats_constant(tmp_path):
    a = _write(tmp_path, "a.yaml", dict(scenario="bench-bimodal", seed=3))
    b = _write(tmp_path, "b.yaml", dict(scenario="bench-bimodal", seed=3, controller=dict(type="constant", params=dict(value=1.0))))
    out = tmp_path / "cmp"
    assert main(["compare", a, b, "--out", str(out)]) == 0
    d = json.loads((out / "compare.json").read_text())["difference"]
    assert d["mean"] + 2 * d["stderr"] < 0


def test_compare_lqg_vs_detuned_gain(tmp_path):
    a = _write(tmp_path, "a.yaml", dict(scenario="lqg-1d", seed=5))
    b = _write(tmp_path, "b.yaml", dict(scenario="lqg-1d", seed=5, controller=dict(type="lqg", params=dict(gain_scale=3.0))))
    out = tmp_path / "cmp"
    assert main(["compare", a, b, "--out", str(out)]) == 0
    d = json.loads((out / "compare.json").read_text())["difference"]
    assert d["mean"] < 0


def test_compare_rejects_model_mismatch(tmp_path, capsys):
    a = _write(tmp_path, "a.yaml", dict(scenario="lqg-1d", seed=5))
    b = _write(tmp_path, "b.yaml", dict(scenario="lqg-1d", seed=5, model=dict(sigma=2.0)))
    assert main(["compare", a, b, "--out", str(tmp_path / "c")]) == 2
    assert "model" in capsys.readouterr().err


def test_compare_rejects_cavity(tmp_path):
    assert main(["compare", "cavity-hinfty", "cavity-hinfty", "--out", str(tmp_path / "c")]) == 2
