import json
import logging

import pytest

from econtrol import harness
from econtrol.cli import parse_and_dispatch
from econtrol.config import RunConfig, apply_overrides, load_config

BASE = {
    "problem": {"family": "toy"},
    "algorithm": {"method": "econtrol", "compressor": {"kind": "topk", "k": 1}, "gamma": 0.01, "eta": 0.5},
    "rounds": 20,
}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert parse_and_dispatch(["run", "--config", _write(tmp_path, BASE), "--out", str(out)]) == 0
    trace = harness.read_trace(out / "trace.csv")
    assert trace[-1].round == 20
    assert json.loads((out / "resolved-config.json").read_text())["algorithm"]["gamma"] == 0.01
    assert json.loads(capsys.readouterr().out)["rounds_run"] == 20


def test_missing_k_names_key(tmp_path, capsys):
    data = json.loads(json.dumps(BASE))
    del data["algorithm"]["compressor"]["k"]
    code = parse_and_dispatch(["run", "--config", _write(tmp_path, data), "--out", str(tmp_path / "o")])
    assert code != 0
    assert "compressor.k" in capsys.readouterr().err


def test_unknown_key_and_bad_file(tmp_path, capsys):
    data = {**BASE, "roundz": 3}
    assert parse_and_dispatch(["run", "--config", _write(tmp_path, data)]) != 0
    assert "roundz" in capsys.readouterr().err
    assert parse_and_dispatch(["run", "--config", str(tmp_path / "missing.json")]) != 0
    assert parse_and_dispatch(["run", "--bogus"]) != 0


def test_set_overrides_file_value(tmp_path):
    out = tmp_path / "out"
    code = parse_and_dispatch(["run", "--config", _write(tmp_path, BASE), "--set", "gamma=0.001", "--out", str(out)])
    assert code == 0
    assert json.loads((out / "resolved-config.json").read_text())["algorithm"]["gamma"] == 0.001


def test_invalid_override_key(tmp_path, capsys):
    code = parse_and_dispatch(["run", "--config", _write(tmp_path, BASE), "--set", "algorithm.speed=3"])
    assert code != 0
    assert "algorithm.speed" in capsys.readouterr().err


def test_duplicate_override_last_wins(caplog):
    with caplog.at_level(logging.INFO, logger="econtrol"):
        data = apply_overrides(BASE, ["gamma=0.1", "algorithm.gamma=0.2"])
    assert data["algorithm"]["gamma"] == 0.2
    assert "more than once" in caplog.text


def test_eta_filled_from_theory(tmp_path, caplog):
    data = json.loads(json.dumps(BASE))
    del data["algorithm"]["eta"]
    with caplog.at_level(logging.INFO, logger="econtrol"):
        cfg = load_config(_write(tmp_path, data))
    assert cfg.algorithm.eta == pytest.approx((1 / 3) / 400)
    assert "eta not set" in caplog.text


def test_rounds_zero_rejected(tmp_path, capsys):
    assert parse_and_dispatch(["run", "--config", _write(tmp_path, {**BASE, "rounds": 0})]) != 0
    assert "rounds" in capsys.readouterr().err


def test_resolved_config_round_trip(tmp_path):
    data = json.loads(json.dumps(BASE))
    del data["algorithm"]["gamma"]
    out = tmp_path / "out"
    assert parse_and_dispatch(["run", "--config", _write(tmp_path, data), "--out", str(out)]) == 0
    first = load_config(out / "resolved-config.json")
    assert first.to_json() == (out / "resolved-config.json").read_text()
    assert first == RunConfig.from_dict(json.loads(first.to_json()))


def test_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("ECONTROL_SEED", "7")
    assert load_config(_write(tmp_path, BASE)).master_seed == 7


def test_sweep_command(tmp_path):
    out = tmp_path / "sw"
    code = parse_and_dispatch(["sweep", "--config", _write(tmp_path, BASE), "--gammas", "0.001,0.01",
                               "--etas", "0.5", "--out", str(out)])
    assert code == 0
    best = json.loads((out / "best.json").read_text())
    assert best["label"] == "run_g0.01_eta0.5"
    assert (out / "run_g0.001_eta0.5" / "trace.csv").exists()
    assert (out / "run_g0.001_eta0.5" / "resolved-config.json").exists()


def test_sweep_no_stable_exit_code(tmp_path, capsys):
    data = json.loads(json.dumps(BASE))
    data["algorithm"].update(eta=1.0, h0="zero")
    data["rounds"] = 20_000
    data["eval_every"] = 100
    code = parse_and_dispatch(["sweep", "--config", _write(tmp_path, data), "--gammas", "1e-3,1e-2",
                               "--out", str(tmp_path / "sw")])
    assert code == 2
    assert "no stable configuration" in capsys.readouterr().err


def test_reproduce_appendix_c(tmp_path):
    out = tmp_path / "rep"
    assert parse_and_dispatch(["reproduce", "--preset", "appendixC_b", "--out", str(out)]) == 0
    diverging = harness.read_trace(out / "appendixC_b_eta1" / "trace.csv")
    converging = harness.read_trace(out / "appendixC_b_etadelta" / "trace.csv")
    assert diverging[-1].grad_norm_sq > 1e3
    assert converging[-1].grad_norm_sq < 1e-10
    summary = json.loads((out / "summary.json").read_text())
    assert [r["label"] for r in summary["runs"]] == ["appendixC_b_eta1", "appendixC_b_etadelta"]
    assert (out / "appendixC_b_eta1" / "resolved-config.json").exists()


def test_list_presets(capsys):
    assert parse_and_dispatch(["list-presets"]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["fig1", "fig2", "fig3", "appendixC_a", "appendixC_b"]
