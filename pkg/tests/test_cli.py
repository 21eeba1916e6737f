import json

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from bclab import acceptance, cli
from bclab.acceptance import Criterion
from bclab.bundle import Grid1D
from bclab.cli import ConfigError, config_hash, emit_csv, env_overrides, load_config, read_csv, run
from bclab.presets import read_field_csv, write_field_csv
from bclab.recon import ReconResult, write_recon_csv

SMALL = {"grid": {"nx": 41}, "time": {"T": 0.5}, "rank": 1,
         "connection": {"preset": "zero"}, "potential": {"preset": "zero"}}


def write_config(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_defaults_validate():
    cfg = load_config(environ={})
    assert cfg["grid"]["nx"] == 201
    assert cfg["time"] == {"T": 1.5, "cfl": 0.5}


def test_unknown_preset_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path, {"connection": {"preset": "spiral"}})
    with pytest.raises(ConfigError) as info:
        load_config(cfg, environ={})
    assert info.value.field == "connection.preset"
    code = run(["simulate", "--config", cfg, "--out", str(tmp_path / "o")], environ={})
    assert code == cli.EXIT_CONFIG
    assert "connection.preset" in capsys.readouterr().err


def test_unknown_top_level_key_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write_config(tmp_path, {"gird": {"nx": 3}}), environ={})
    assert info.value.field == "gird"


def test_invalid_value_rejected():
    with pytest.raises(ConfigError) as info:
        load_config(environ={}, overrides={"grid": {"nx": -5}})
    assert "grid.nx" in str(info.value)


def test_env_override():
    env = {"BCLAB_GRID__NX": "101", "BCLAB_CONTROL__ALPHAS": "[0.1, 0.01]", "OTHER": "x"}
    assert env_overrides(env) == {"grid": {"nx": 101}, "control": {"alphas": [0.1, 0.01]}}
    cfg = load_config(environ=env)
    assert cfg["grid"]["nx"] == 101
    assert cfg["grid"]["length"] == 1.0


def test_preset_replaces_field_description(tmp_path):
    cfg = load_config(write_config(tmp_path, {"connection": {"preset": "zero"}}), environ={})
    assert cfg["connection"] == {"preset": "zero"}


def test_simulate_zero_source_gives_zero_field(tmp_path):
    data = dict(SMALL, source={"fiber": [0]}, connection={"preset": "random_fourier"})
    out = tmp_path / "sim"
    assert run(["simulate", "--config", write_config(tmp_path, data), "--out", str(out)], environ={}) == 0
    header, body = read_csv(out / "field.csv")
    assert header == ["t", "x", "Reu_0", "Imu_0"]
    assert body.shape[0] > 0
    assert np.all(body[:, 2:] == 0)
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok"
    assert man["metrics"]["max_abs_u"] == 0


def test_emit_csv_header_only(tmp_path):
    p = emit_csv(tmp_path / "e.csv", ["x", "y"], [])
    assert p.read_text().strip() == "x,y"
    header, body = read_csv(p)
    assert header == ["x", "y"] and body.shape == (0, 2)


def test_emit_csv_seventeen_digits(tmp_path):
    v = 0.1 + 0.2
    p = emit_csv(tmp_path / "d.csv", ["v"], [[v]])
    text = p.read_text().splitlines()[1]
    assert text == f"{v:.17g}"
    assert float(text) == v


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(n=st.integers(1, 3), nx=st.integers(3, 12), data=st.data())
def test_field_table_round_trip(tmp_path_factory, n, nx, data):
    g = Grid1D(1.0, nx)
    vals = data.draw(st.lists(finite, min_size=2 * nx * n * n, max_size=2 * nx * n * n))
    arr = np.asarray(vals).reshape(2, nx, n, n)
    coeff = arr[0] + 1j * arr[1]
    p = tmp_path_factory.mktemp("rt") / "f.csv"
    write_field_csv(p, g, coeff)
    g2, back = read_field_csv(p)
    assert g2 == g
    assert np.array_equal(back, coeff)


def test_recon_csv_schema_rank_one(tmp_path):
    k = 4
    res = ReconResult(nodes=np.linspace(0.2, 0.8, k), A=np.zeros((k, 1, 1), complex),
                      W=np.zeros((k, 1, 1), complex), V=np.ones((k, 1, 1), complex),
                      residual=np.full(k, 1e-3), condition=np.full(k, 10.0),
                      accepted=np.array([True, True, False, True]),
                      hermitian_deviation=np.zeros(k))
    header, body = read_csv(write_recon_csv(tmp_path / "r.csv", res))
    assert header == ["x", "ReA", "ImA", "ReV", "ImV", "residual", "cond"]
    assert body.shape == (3, 7)


def test_config_hash_ignores_out():
    a = load_config(environ={}, overrides={"out": "a"})
    b = load_config(environ={}, overrides={"out": "b"})
    c = load_config(environ={}, overrides={"seed": 9})
    assert config_hash(a) == config_hash(b) != config_hash(c)


def _manifest(path):
    m = json.loads((path / "manifest.json").read_text())
    m.pop("timings")
    m.pop("artifacts")
    return m


def test_manifest_deterministic(tmp_path):
    cfg = write_config(tmp_path, dict(SMALL, connection={"preset": "random_fourier"}))
    for name in ("r1", "r2"):
        assert run(["cylinder-check", "--config", cfg, "--out", str(tmp_path / name),
                    "--deterministic"], environ={}) == 0
    assert _manifest(tmp_path / "r1") == _manifest(tmp_path / "r2")
    a = json.loads((tmp_path / "r1" / "cylinder.json").read_text())
    b = json.loads((tmp_path / "r2" / "cylinder.json").read_text())
    assert a == b


def test_numerical_failure_exit_code(tmp_path, capsys):
    # lambda above the first Dirichlet eigenvalue violates the cylinder precondition
    cfg = write_config(tmp_path, dict(SMALL, cylinder={"lambda": 50.0}))
    code = run(["cylinder-check", "--config", cfg, "--out", str(tmp_path / "o")], environ={})
    assert code == cli.EXIT_NUMERIC
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == "numerical-failure"
    assert "lambda_1" in capsys.readouterr().err


def test_accept_failure_exit_code(tmp_path, monkeypatch, capsys):
    def fake(keys=None, workers=1, log=print):
        return [Criterion("A", "ok", True, {}, {}), Criterion("B", "bad", False, {}, {})]

    monkeypatch.setattr(acceptance, "run_all", fake)
    code = run(["accept", "--out", str(tmp_path / "o")], environ={})
    assert code == cli.EXIT_ACCEPT
    assert "1/2 criteria passed" in capsys.readouterr().out
    rows = json.loads((tmp_path / "o" / "acceptance.json").read_text())
    assert [r["passed"] for r in rows] == [True, False]


def test_gauge_compare_self(tmp_path):
    cfg = write_config(tmp_path, dict(SMALL, rank=2, connection={"preset": "random_fourier"}))
    out = tmp_path / "g"
    assert run(["gauge-compare", "--config", cfg, "--out", str(out)], environ={}) == 0
    data = json.loads((out / "gauge.json").read_text())
    assert data["equivalent"] and data["distance"] < 1e-10
    header, body = read_csv(out / "witness.csv")
    assert len(header) == 1 + 2 * 4 and body.shape[0] == 41
