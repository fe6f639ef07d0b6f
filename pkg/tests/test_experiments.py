import json

import numpy as np
import pytest

from caplat.cli import main as cli_main
from caplat.errors import InsufficientData
from caplat.experiments import (
    ExperimentConfig,
    _richardson,
    fit_rate,
    load_config,
    write_csv,
)


# ---------------------------------------------------------------------------
# rate classification


def test_fit_rate_exponential_data():
    rs = np.array([2.0, 4.0, 8.0, 16.0, 24.0])
    fit = fit_rate(rs, 5.0 * np.exp(-3.0 * rs))
    assert fit.model == "exponential"
    assert fit.rate == pytest.approx(3.0, abs=0.01)


def test_fit_rate_algebraic_data():
    rs = np.array([2.0, 4.0, 8.0, 16.0, 32.0])
    fit = fit_rate(rs, 7.0 * rs**-2.0)
    assert fit.model == "algebraic"
    assert fit.exponent == pytest.approx(2.0, abs=0.01)


def test_fit_rate_noise_floor_plateau():
    rs = np.array([2.0, 4.0, 8.0, 16.0, 32.0, 64.0])
    errs = np.maximum(np.exp(-rs), 1e-12)  # last rungs sit on the floor
    fit = fit_rate(rs, errs, noise_floor=1e-13)
    assert fit.n_used == 4  # the two plateau points are dropped
    assert fit.model == "exponential"
    assert fit.rate == pytest.approx(1.0, abs=0.01)


def test_fit_rate_needs_four_points():
    with pytest.raises(InsufficientData):
        fit_rate([1.0, 2.0, 3.0], [1.0, 0.1, 0.01])
    with pytest.raises(InsufficientData):
        fit_rate([1, 2, 3, 4, 5], np.exp(-np.arange(1, 6)), noise_floor=1.0)


def test_fit_rate_rejects_nonpositive_errors():
    with pytest.raises(InsufficientData):
        fit_rate([1, 2, 3, 4], [1.0, 0.1, 0.0, 0.01])


def test_richardson_recovers_algebraic_limit():
    rs = [4.0, 8.0, 16.0, 32.0]
    vals = [3.0 + 5.0 * r**-2.0 for r in rs]
    assert _richardson(rs, vals) == pytest.approx(3.0, abs=1e-12)


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_resolve_by_dimension():
    cfg = ExperimentConfig(d=3)
    assert cfg.order == 2
    assert cfg.bz_m == 16
    cfg1 = ExperimentConfig(d=1)
    assert cfg1.order == 4
    assert cfg1.bz_m == 1024


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_mapping({"d": 1, "cutoff": 3})
    with pytest.raises(ValueError):
        ExperimentConfig(d=4)
    with pytest.raises(ValueError):
        ExperimentConfig(backend="bem")


def test_load_config_toml_and_json(tmp_path):
    toml = tmp_path / "a.toml"
    toml.write_text('d = 2\nbackend = "multipole"\nr_ladder = [2, 3, 4, 6]\n')
    cfg = load_config(toml)
    assert cfg.d == 2 and cfg.r_ladder == [2, 3, 4, 6]

    js = tmp_path / "b.json"
    js.write_text(json.dumps({"d": 1, "eta": 0.5}))
    cfg2 = load_config(js)
    assert cfg2.d == 1 and cfg2.eta == 0.5


# ---------------------------------------------------------------------------
# persistence and CLI


def test_write_csv_deterministic_bytes(tmp_path):
    rows = [(1.0, 0.1 + 0.2), (2.0, 1e-17)]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(p1, ["r", "e"], rows)
    write_csv(p2, ["r", "e"], rows)
    assert p1.read_bytes() == p2.read_bytes()
    # full precision round-trips
    line = p1.read_text().splitlines()[1]
    assert float(line.split(",")[1]) == 0.1 + 0.2


def test_cli_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("d = 7\n")
    assert cli_main(["cap-finite", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    missing_r = tmp_path / "nor.toml"
    missing_r.write_text("d = 1\n")
    assert cli_main(["cap-finite", "--config", str(missing_r), "--out", str(tmp_path / "o")]) == 2


def test_cli_cap_finite_runs_and_writes_manifest(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("d = 1\nr = 2.0\norder = 2\n")
    out = tmp_path / "run"
    assert cli_main(["cap-finite", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["command"] == "cap-finite"
    assert manifest["config"]["d"] == 1
    assert (out / "capacitance.csv").exists()


def test_cli_output_is_reproducible(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("d = 1\nalphas = [0.1, 0.25, -0.4]\norder = 3\n")
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert cli_main(["cap-quasi", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append((out / "quasi.csv").read_bytes())
    assert outs[0] == outs[1]
