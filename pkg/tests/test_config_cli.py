import json

import numpy as np
import pytest

from mpcrl.cli import main
from mpcrl.config import load_config, parse_override
from mpcrl.exceptions import ConfigurationError
from mpcrl.pipeline import ARTIFACTS, read_run_table
from mpcrl.plant import read_timeseries_csv

TINY = """
[grid]
bins = 2
n_per_dim = 2
[gust]
n_realizations = 1
[evaluation]
n_runs = 2
gust_duration = 0.3
recovery_duration = 0.2
"""


@pytest.fixture(scope="module")
def tiny_toml(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    path = d / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained(tiny_toml, tmp_path_factory):
    out = tmp_path_factory.mktemp("art")
    assert main(["train", "--config", str(tiny_toml), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def evaluated(tiny_toml, trained):
    assert main(["evaluate", "--config", str(tiny_toml), "--out", str(trained), "--timeseries"]) == 0
    return trained


def test_defaults_load(default_config):
    assert default_config["grid"]["bins"] == 7
    assert default_config.r_max() == pytest.approx(0.5 * np.sqrt(5) / 7)
    assert default_config.config_hash() == load_config().config_hash()
    assert default_config.header().startswith("config_hash=")


def test_overrides_change_hash(default_config):
    other = default_config.with_overrides({"grid": {"bins": 5}})
    assert other.config_hash() != default_config.config_hash()
    assert parse_override("mpc.horizon=30") == {"mpc": {"horizon": 30}}
    assert parse_override("filter.mode=componentwise") == {"filter": {"mode": "componentwise"}}
    with pytest.raises(ConfigurationError):
        parse_override("horizon=3")


@pytest.mark.parametrize("text", [
    "[envelope]\nstate_lo = [0.1, -0.15, -0.4, -2.0, -0.35]\nstate_hi = [0.0, 0.15, 0.4, 2.0, 0.35]\n",
    "[grid]\nbogus = 1\n",
    "[mpc]\nhorizon = 1\n",
    "[plant]\npath = 'missing.toml'\n",
    "not toml [",
])
def test_invalid_configs_rejected(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_invalid_box_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[envelope]\ninput_lo = 0.3\ninput_hi = -0.3\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2
    assert main(["validate-model", "--set", "grid.nonexistent=1"]) == 2


def test_train_emits_artifacts_with_header(trained, tiny_toml):
    h = load_config(tiny_toml, [{"output": {"dir": str(trained)}}]).config_hash()
    for name in ARTIFACTS:
        text = (trained / name).read_text()
        if name.endswith(".json"):
            assert json.loads(text)["config_hash"] == f"config_hash={h}"
        else:
            assert text.splitlines()[0] == f"# config_hash={h}"
    summary = json.loads((trained / "train_summary.json").read_text())
    assert summary["certification_failures"] == 0 and summary["n_states"] == 16


def test_train_rerun_is_byte_identical(trained, tiny_toml, tmp_path):
    assert main(["train", "--config", str(tiny_toml), "--out", str(tmp_path)]) == 0
    for name in ARTIFACTS:
        a, b = (trained / name).read_bytes(), (tmp_path / name).read_bytes()
        if name.endswith(".json"):
            # the header carries the output dir through the config hash
            a, b = (json.loads(x) for x in (a, b))
            a.pop("config_hash"), b.pop("config_hash")
        else:
            a, b = a.split(b"\n", 1)[1], b.split(b"\n", 1)[1]
        assert a == b, name


def test_evaluate_smoke(evaluated):
    lines = [ln for ln in (evaluated / "metrics_summary.csv").read_text().splitlines() if not ln.startswith("#")]
    assert [ln.split(",")[0] for ln in lines[1:]] == ["MPC-RL", "LPV", "RL"]
    rows = read_run_table(evaluated / "metrics_runs.csv")
    assert len(rows) == 6
    assert {r["controller"] for r in rows} == {"MPC-RL", "LPV", "RL"}
    assert (evaluated / "timeseries" / "1_RL.csv").exists()


def test_evaluate_missing_qtable(tmp_path, tiny_toml, capsys):
    assert main(["evaluate", "--config", str(tiny_toml), "--out", str(tmp_path)]) == 2
    assert "qtable.json" in capsys.readouterr().err


def test_assert_ordering_flag_sets_exit_code(evaluated, tiny_toml, capsys, tmp_path):
    import shutil

    for name in ARTIFACTS:
        shutil.copy(evaluated / name, tmp_path / name)
    code = main(["evaluate", "--config", str(tiny_toml), "--out", str(tmp_path), "--runs", "1", "--assert-ordering"])
    out = capsys.readouterr().out
    ok = "FAIL" not in out
    assert code == (0 if ok else 1)


def test_replay_matches_original(evaluated, tiny_toml):
    for ctrl in ("MPC-RL", "LPV"):
        assert main(["replay", "1", "--controller", ctrl, "--config", str(tiny_toml), "--out", str(evaluated)]) == 0
        a = read_timeseries_csv(evaluated / "timeseries" / f"1_{ctrl}.csv")
        b = read_timeseries_csv(evaluated / f"replay_1_{ctrl}.csv")
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
    lines = (evaluated / "decisions_1.csv").read_text().splitlines()
    n_steps = int(round(0.5 / 1e-3))
    assert lines[0].startswith("# config_hash=") and len(lines) == 2 + n_steps


def test_replay_unknown_run(evaluated, tiny_toml, capsys):
    assert main(["replay", "99", "--config", str(tiny_toml), "--out", str(evaluated)]) == 2
    assert "99" in capsys.readouterr().err


def test_validate_model_default_passes(tmp_path):
    assert main(["validate-model", "--out", str(tmp_path), "--set", "validation.taylor_samples=200",
                 "--set", "validation.lpv_samples=20"]) == 0
    doc = json.loads((tmp_path / "validation.json").read_text())
    assert list(doc)[0] == "config_hash"
    assert doc["passed"] and doc["lpv"]["max_rel_traj_error"] < 0.01
    assert 0.5 <= doc["lpv"]["dominant_mode_hz"] <= 5


def test_validate_model_coarse_sample_time_fails(tmp_path):
    plant = tmp_path / "coarse.toml"
    from mpcrl.plant import DEFAULT_PLANT_FILE

    plant.write_text(DEFAULT_PLANT_FILE.read_text().replace("sample_time = 0.001", "sample_time = 0.05"))
    assert "0.05" in plant.read_text()
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(f"[plant]\npath = '{plant}'\n[validation]\ntaylor_samples = 100\n")
    assert main(["validate-model", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    doc = json.loads((tmp_path / "validation.json").read_text())
    assert not doc["taylor"]["passed"] and not doc["passed"]
    # running the pipeline with the same plant is a configuration error
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
