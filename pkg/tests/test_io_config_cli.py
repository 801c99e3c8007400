import json
import re

import numpy as np
import pytest
from sklearn.base import clone

from mlposc import cli, io
from mlposc.config import DEFAULTS, ConfigError, parse_config, resolve
from mlposc.estimators import LocalLQGController, MemoryLimitedGridController, MemoryLimitedLQG
from mlposc.problems import memory_limited_lqg, obstacle_problem


def write_yaml(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# config -------------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    cfg, used = parse_config(write_yaml(tmp_path, ""), "lqg-memlim")
    assert cfg == DEFAULTS["lqg-memlim"]
    assert "sim.n_paths" in used and "model.A" in used


def test_override_is_applied_and_not_listed_as_default(tmp_path):
    cfg, used = parse_config(write_yaml(tmp_path, "sim:\n  n_paths: 7\nmodel:\n  A: -1\n"), "lqg-memlim")
    assert cfg["sim"]["n_paths"] == 7 and cfg["model"]["A"] == -1.0
    assert "sim.n_paths" not in used and "model.A" not in used
    assert DEFAULTS["lqg-memlim"]["sim"]["n_paths"] == 100


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"solver": {"dt": -1e-3}}, "solver.dt"),
        ({"solver": {"speed": 1}}, "unknown key"),
        ({"plot": {}}, "unknown section"),
        ({"sim": {"n_paths": 1.5}}, "expected integer"),
        ({"sim": {"n_paths": True}}, "expected integer"),
        ({"solver": {"damping": 2.0}}, "(0, 1]"),
        ({"sim": {"seed": -1}}, "unsigned 64-bit"),
        ({"model": {"A": "big"}}, "number or nested list"),
    ],
)
def test_bad_lqg_config_rejected(doc, fragment):
    with pytest.raises(ConfigError, match=re.escape(fragment)):
        resolve("lqg-memlim", doc)


def test_bad_obstacle_choices_rejected():
    with pytest.raises(ConfigError, match="scheme"):
        resolve("nonlqg-obstacle", {"grid": {"scheme": "central"}})
    with pytest.raises(ConfigError, match="control"):
        resolve("nonlqg-obstacle", {"sweep": {"control": "newton"}})
    with pytest.raises(ConfigError, match="at least 5"):
        resolve("nonlqg-obstacle", {"grid": {"n": 3}})
    with pytest.raises(ConfigError, match="at least 5"):
        resolve("nonlqg-obstacle", {"full_state": {"n_z": 2}})


def test_unknown_experiment_and_bad_root(tmp_path):
    with pytest.raises(ConfigError, match="unknown experiment"):
        resolve("nope")
    with pytest.raises(ConfigError, match="mapping"):
        parse_config(write_yaml(tmp_path, "- 1\n- 2\n"), "lqg-memlim")
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "missing.yaml", "lqg-memlim")
    with pytest.raises(ConfigError, match="YAML"):
        parse_config(write_yaml(tmp_path, "a: [1,\n"), "lqg-memlim")


def test_null_matrix_means_zero():
    cfg, _ = resolve("lqg-memlim", {"model": {"P": None}})
    assert cfg["model"]["P"] == 0.0


# io -----------------------------------------------------------------------

def test_number_formatting_is_fixed():
    assert io.fmt(-0.0) == "0"
    assert io.fmt(np.float64(1 / 3)) == "0.333333333333"
    assert io.fmt(np.nan) == "nan" and io.fmt(-np.inf) == "-inf"
    assert io.fmt(np.int64(3)) == "3" and io.fmt(True) == "1"


def test_manifest_lists_hashes(tmp_path):
    f = io.write_csv(tmp_path / "a.csv", ["x"], [[1.0], [2.0]])
    path = io.write_manifest(tmp_path, "demo", [f], {"k": np.float64(1.5)})
    doc = json.loads(path.read_text())
    assert doc["artifacts"][0]["sha256"] == io.sha256_file(f)
    assert doc["config"] == {"k": 1.5} and doc["status"] == "ok"


# cli ----------------------------------------------------------------------

SMALL_LQG = "model:\n  T: 1.0\nsolver:\n  dt: 0.01\nsim:\n  n_paths: 8\n  dt: 0.01\n"


def test_cli_missing_R_exits_with_config_error(tmp_path, caplog):
    cfg = write_yaml(tmp_path, "model:\n  T: 1.0\n  R: null\nsolver:\n  dt: 0.01\n")
    status = cli.main(["run", "lqg-memlim", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert status == cli.EXIT_CONFIG
    assert "R not positive definite" in caplog.text
    doc = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert doc["status"] == "invalid"


def test_cli_unknown_experiment(tmp_path):
    assert cli.main(["run", "nope", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_cli_bad_seed(tmp_path):
    assert cli.main(["run", "lqg-kalman-repro", "--seed", "-3", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    cfg = write_yaml(tmp_path, "model:\n  T: 1.0\nsolver:\n  dt: 0.01\n")
    assert cli.main(["run", "lqg-kalman-repro", "--config", str(cfg)]) == cli.EXIT_OK
    assert (tmp_path / "lqg-kalman-repro" / "kalman_equivalence.csv").is_file()
    monkeypatch.delenv(cli.OUT_ENV)
    assert str(cli.output_dir("x")) == "out/x"


def test_cli_rerun_is_byte_identical(tmp_path):
    cfg = write_yaml(tmp_path, SMALL_LQG)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["run", "lqg-memlim", "--config", str(cfg), "--out", str(out), "--seed", "42"]) == 0
    names = sorted(p.name for p in outs[0].iterdir())
    assert {"manifest.json", "objectives.csv", "paths.csv", "psi_pi.csv"} <= set(names)
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    doc = json.loads((outs[0] / "manifest.json").read_text())
    assert doc["seed"] == 42
    for entry in doc["artifacts"]:
        assert entry["sha256"] == io.sha256_file(outs[0] / entry["file"])


def test_cli_seed_changes_paths(tmp_path):
    cfg = write_yaml(tmp_path, SMALL_LQG)
    for s in ("1", "2"):
        cli.main(["run", "lqg-memlim", "--config", str(cfg), "--out", str(tmp_path / s), "--seed", s])
    assert (tmp_path / "1" / "paths.csv").read_bytes() != (tmp_path / "2" / "paths.csv").read_bytes()
    assert (tmp_path / "1" / "psi_pi.csv").read_bytes() == (tmp_path / "2" / "psi_pi.csv").read_bytes()


# estimators ---------------------------------------------------------------

def test_lqg_estimator_matches_policy():
    p = memory_limited_lqg(A=-1.0, T=1.0)
    est = MemoryLimitedLQG(dt=1e-3).fit(p)
    X = np.array([[0.0, 1.0], [0.5, -0.5], [0.5, 2.0]])
    u = est.predict(X)
    assert u.shape == (3, 2)
    for row, ui in zip(X, u):
        S = np.array([[0.0, row[1]]])
        np.testing.assert_allclose(ui, est.policy_(row[0], S)[0])
    assert est.get_params()["dt"] == 1e-3
    assert clone(est).get_params() == est.get_params()
    assert est.converged_ and np.isfinite(est.objective_)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))


def test_grid_estimator_fits_small_problem():
    p = memory_limited_lqg(A=-1.0, T=0.2)
    est = MemoryLimitedGridController(lo=-4, hi=4, n=21, control_bound=30.0, max_iter=5)
    assert clone(est).get_params()["n"] == 21
    est.fit(p)
    u = est.predict(np.array([[0.0, 0.0], [0.1, 1.0]]))
    assert u.shape == (2, 2) and np.all(np.isfinite(u))
    assert est.report_.iterations <= 5


def test_local_lqg_estimator_reads_filter_mean():
    est = LocalLQGController(dt=1e-2).fit(obstacle_problem())
    u = est.predict(np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 0.0]]))
    assert u[0, 0] < 0 < u[1, 0] and u[2, 0] == 0.0


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        MemoryLimitedLQG().predict(np.zeros((1, 2)))
