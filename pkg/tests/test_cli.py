import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from crystal import io
from crystal.cli import main
from crystal.config import ConfigError, load_config, parse_config, schema
from crystal.lattice import Cube, LatticeSpec, LatticeState

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
QUARTIC = {"d": 1, "nu": 1, "U": {"coeffs": [0, 1, 1], "variable": "xi_sq"}, "V": {"coeffs": [0, 1]}}


def _converge_cfg(**params):
    p = {"k": 1, "n_list": [3, 4, 5], "t": 0.5, "gamma": 1.5, "beta": 0.5}
    p.update(params)
    return {
        "version": 1,
        "kind": "converge",
        "spec": QUARTIC,
        "initial": {"type": "gibbs", "radius": 10, "seed": 3, "sweeps": 400, "burn_in": 100},
        "integrator": {"dt": 0.001, "t_final": 0.5},
        "params": p,
    }


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _run(tmp_path, cfg, kind=None, out="out", jobs=1):
    path = _write(tmp_path, cfg)
    code = main([kind or cfg["kind"], "--config", str(path), "--out", str(tmp_path / out), "--jobs", str(jobs)])
    return code, tmp_path / out


def test_schema_is_versioned():
    s = schema()
    assert s["properties"]["version"] == {"const": 1}
    assert set(s["$defs"]["params"]) == {
        "simulate", "converge", "mu-indep", "energy-growth", "lightcone", "gibbs", "superstability", "accept",
    }


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_bundled_configs_validate(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.kind == name.removesuffix(".yaml")


def test_unknown_keys_rejected():
    bad = _converge_cfg(colour="red")
    with pytest.raises(ConfigError, match="colour"):
        parse_config(bad)
    top = dict(_converge_cfg(), extra=1)
    with pytest.raises(ConfigError, match="extra"):
        parse_config(top)


def test_gamma_below_eta_d_exits_2(tmp_path, capsys):
    code, _ = _run(tmp_path, _converge_cfg(gamma=0.5))
    assert code == 2
    err = capsys.readouterr().err
    assert "gamma" in err and "(eta*d, 2)" in err


def test_a_must_exceed_one(tmp_path):
    assert _run(tmp_path, _converge_cfg(A=1.0))[0] == 2


def test_alpha_at_boundary_exits_2(tmp_path, capsys):
    cfg = {
        "version": 1, "kind": "lightcone", "spec": QUARTIC,
        "initial": {"type": "rest", "radius": 20},
        "integrator": {"dt": 0.001},
        "params": {"t_list": [1.0], "threshold": 1e-8, "alpha": 7 / 3},
    }
    assert _run(tmp_path, cfg)[0] == 2
    assert "strict" in capsys.readouterr().err
    cfg["params"]["alpha"] = 2.34
    assert _run(tmp_path, cfg)[0] == 0


def test_kind_mismatch_and_bad_file(tmp_path):
    assert _run(tmp_path, _converge_cfg(), kind="simulate")[0] == 2
    missing = main(["simulate", "--config", str(tmp_path / "nope.yaml")])
    assert missing == 2
    assert main(["simulate", "--config", str(_write(tmp_path, _converge_cfg())), "--jobs", "0"]) == 2


def test_negative_potential_rejected():
    cfg = _converge_cfg()
    cfg["spec"] = dict(QUARTIC, U={"coeffs": [1, -3, 1]})
    with pytest.raises(ConfigError, match="spec.U"):
        parse_config(cfg)


def test_blow_up_exits_3(tmp_path, capsys):
    cfg = {
        "version": 1, "kind": "simulate", "spec": QUARTIC,
        "initial": {"type": "excite", "radius": 2, "site": [0], "q": [5.0]},
        "integrator": {"dt": 1.0, "t_final": 50.0},
        "params": {},
    }
    code, out = _run(tmp_path, cfg)
    assert code == 3
    assert "step" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["status"] == "numerical failure"


def test_front_at_boundary_exits_3(tmp_path):
    cfg = {
        "version": 1, "kind": "lightcone", "spec": QUARTIC,
        "initial": {"type": "gibbs", "radius": 6, "sweeps": 200, "burn_in": 50},
        "integrator": {"dt": 0.001},
        "params": {"t_list": [4.0], "threshold": 1e-8, "alpha": 4.0},
    }
    assert _run(tmp_path, cfg)[0] == 3


def test_converge_artifacts_and_manifest(tmp_path):
    code, out = _run(tmp_path, _converge_cfg())
    assert code == 0
    lines = (out / "converge.csv").read_text().splitlines()
    assert lines[0] == "n,u_value,bound_2_pow,passes"
    assert len(lines) == 4
    summary = json.loads((out / "converge.json").read_text())
    assert {"k", "t", "n_star", "fitted_rate", "A", "gamma", "beta"} <= set(summary)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["config_sha256"]) == 64
    assert {"numpy", "scipy", "numba", "crystal", "python"} <= set(manifest["versions"])
    assert manifest["wall_time_s"] >= 0
    assert "status: ok" in (out / "report.txt").read_text()


def test_reruns_are_byte_identical_across_job_counts(tmp_path):
    cfg = _converge_cfg()
    _, a = _run(tmp_path, cfg, out="a", jobs=1)
    _, b = _run(tmp_path, cfg, out="b", jobs=2)
    _, c = _run(tmp_path, cfg, out="c", jobs=1)
    for name in ("converge.csv", "u_series.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_hash_covers_referenced_state_file(tmp_path):
    spec = LatticeSpec.from_coeffs(1, 1, U=[0, 1], V=[0, 1])
    q = np.linspace(-1, 1, 5).reshape(5, 1)
    io.write_state_csv(tmp_path / "x0.csv", LatticeState(spec, Cube((0,), 2), q, np.zeros_like(q)))
    cfg = {
        "version": 1, "kind": "simulate",
        "spec": {"d": 1, "nu": 1, "U": {"coeffs": [0, 1]}, "V": {"coeffs": [0, 1]}},
        "initial": {"type": "file", "path": "x0.csv"},
        "integrator": {"dt": 0.01, "t_final": 0.1},
        "params": {},
    }
    path = _write(tmp_path, cfg)
    h1 = load_config(path).sha256()
    x = load_config(path).build_initial()
    np.testing.assert_array_equal(x.q, q)
    io.write_state_csv(tmp_path / "x0.csv", LatticeState(spec, Cube((0,), 2), 2 * q, np.zeros_like(q)))
    assert load_config(path).sha256() != h1
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "sim")]) == 0
    assert (tmp_path / "sim" / "trajectory" / "trajectory.json").exists()


@pytest.mark.parametrize("name", ["simulate", "mu-indep", "gibbs", "superstability", "energy-growth"])
def test_bundled_configs_run(tmp_path, name):
    shutil.copy(CONFIGS / f"{name}.yaml", tmp_path / "c.yaml")
    code = main([name, "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")])
    assert code == 0
    assert (tmp_path / "o" / "manifest.json").exists()
    assert list((tmp_path / "o").glob("**/*.csv"))


def test_lightcone_artifacts(tmp_path):
    code = main(["lightcone", "--config", str(CONFIGS / "lightcone.yaml"), "--out", str(tmp_path / "o")])
    # the run completes; the front comparison itself is reported, not an error
    assert code == 0
    front = (tmp_path / "o" / "front.csv").read_text().splitlines()
    assert front[0] == "t,r_t,t_log_alpha_t,max_norm_at_front_plus_5"
    profile = (tmp_path / "o" / "profile.csv").read_text().splitlines()
    assert profile[0] == "seed,t,dist,delta_norm"


def test_accept_subset(tmp_path):
    cfg = {"version": 1, "kind": "accept", "params": {"criteria": [2, 4], "determinism": True}}
    code, out = _run(tmp_path, cfg)
    assert code == 0
    report = (out / "report.txt").read_text()
    assert "[PASS]  2" in report and "[PASS] 10" in report
    assert (out / "c02" / "oscillator.csv").exists()


def test_accept_failure_exits_1(tmp_path):
    cfg = {"version": 1, "kind": "accept", "params": {"criteria": [7], "determinism": False}}
    code, out = _run(tmp_path, cfg)
    assert code == 1
    assert "[FAIL]  7" in (out / "report.txt").read_text()
