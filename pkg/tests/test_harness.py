import math
from dataclasses import replace

import numpy as np
import pytest

from econtrol import harness
from econtrol.algorithms import AlgoConfig
from econtrol.compressors import CompressorSpec
from econtrol.config import AlgoSpec, OracleSpec, ProblemSpec, RunConfig
from econtrol.errors import ConfigError, InvariantViolation, NoStableConfiguration
from econtrol.harness import Simulation, TraceRecord
from econtrol.objectives import GradientOracle, make_toy_divergence

TOP1 = {"kind": "topk", "k": 1}


def _toy_cfg(method="econtrol", rounds=50, **algo):
    return RunConfig(ProblemSpec("toy"), AlgoSpec(method, algo.pop("compressor", TOP1), **algo), OracleSpec(),
                     rounds=rounds)


def _ls_cfg(method="econtrol", rounds=50, sigma=10.0, **algo):
    problem = ProblemSpec("least_squares", 0, {"n": 5, "d": 300, "zeta": 0.0, "b_mean": 1.0})
    algo.setdefault("compressor", {"kind": "topk", "k": 30})
    return RunConfig(problem, AlgoSpec(method, **algo), OracleSpec("gaussian", sigma), rounds=rounds)


def test_sgd_one_step():
    p = make_toy_divergence()
    sim = Simulation(p, GradientOracle(p), AlgoConfig("sgd", 0.5, CompressorSpec.identity(3)))
    sim.step()
    assert np.allclose(sim.server.x, -0.5 * np.array([1, 3, 3]), rtol=0, atol=1e-15)


def test_bits_topk():
    trace = harness.run(_ls_cfg(rounds=10, gamma=1e-3, eta=0.1))
    assert trace[-1].round == 10
    assert trace[-1].bits == 10 * 5 * 30 * (32 + 9) == 61500
    bits = [r.bits for r in trace]
    assert bits == sorted(bits)
    assert [r.round for r in trace] == list(range(11))


def test_bits_double_contractive_bills_both():
    cfg = _toy_cfg("double_contractive", rounds=4, gamma=1e-3, compressor2=TOP1)
    assert harness.run(cfg)[-1].bits == 4 * 2 * 2 * 34


def test_econtrol_identity_matches_sgd():
    a = harness.run(_ls_cfg("econtrol", rounds=200, gamma=1e-3, eta=0.5, compressor={"kind": "identity"}))
    b = harness.run(_ls_cfg("sgd", rounds=200, gamma=1e-3))
    assert np.allclose([r.loss for r in a], [r.loss for r in b], rtol=1e-12, atol=0)


def test_eval_every():
    cfg = RunConfig(ProblemSpec("toy"), AlgoSpec("econtrol", TOP1, gamma=1e-3, eta=0.5), OracleSpec(), 25, 10)
    trace = harness.run(cfg)
    assert [r.round for r in trace] == [0, 10, 20, 25]


def test_determinism_csv():
    cfg = _ls_cfg(rounds=30, gamma=1e-3, eta=0.1)
    assert harness.trace_to_csv(harness.run(cfg)) == harness.trace_to_csv(harness.run(cfg))


def test_randk_determinism():
    cfg = _ls_cfg("ec", rounds=20, gamma=1e-3, compressor={"kind": "randk", "k": 30})
    a, b = harness.run(cfg), harness.run(cfg)
    assert harness.trace_to_csv(a) == harness.trace_to_csv(b)
    c = harness.run(replace(cfg, master_seed=1))
    assert harness.trace_to_csv(a) != harness.trace_to_csv(c)


def test_csv_format(tmp_path):
    trace = [TraceRecord(0, 0, 1.0, 2.0, 0.1), TraceRecord(1, 34, 1 / 3, 0.5, 0.2)]
    text = harness.trace_to_csv(trace)
    lines = text.splitlines()
    assert lines[0] == "round,bits,loss,grad_norm_sq,dist_sq"
    assert lines[2] == "1,34,0.33333333333333331,0.5,0.20000000000000001"
    path = tmp_path / "t.csv"
    harness.write_trace(trace, path)
    assert harness.read_trace(path) == trace


def test_csv_diagnostic_columns():
    cfg = _toy_cfg(rounds=3, gamma=1e-3, eta=0.5)
    cfg.diagnostics = True
    header = harness.trace_to_csv(harness.run(cfg)).splitlines()[0]
    assert header == "round,bits,loss,grad_norm_sq,dist_sq,F_t,E_t,H_t,X_t"


@pytest.mark.parametrize("method,extra", [
    ("econtrol", {"eta": 0.1}), ("ec", {}), ("ec_ideal", {}), ("ef21", {}),
    ("double_contractive", {"compressor2": {"kind": "topk", "k": 30}}),
])
def test_runtime_invariants(method, extra):
    sim = Simulation.from_config(_ls_cfg(method, gamma=1e-3, **extra), check_invariants=True)
    sim.run(200, eval_every=50)
    assert sim.max_residual <= 1e-9
    assert sim.max_estimator_gap <= 1e-9


def test_invariant_violation_raises():
    sim = Simulation.from_config(_toy_cfg(gamma=1e-3, eta=0.5), check_invariants=True)
    sim.server.h = sim.server.h + 1.0
    with pytest.raises(InvariantViolation):
        sim.step()


def test_divergence_detection():
    assert harness.is_diverged([TraceRecord(0, 0, 1.0, 0), TraceRecord(1, 0, 2000.0, 0)])
    assert harness.is_diverged([TraceRecord(0, 0, 1.0, 0), TraceRecord(1, 0, math.nan, 0)])
    assert not harness.is_diverged([TraceRecord(0, 0, 1.0, 0), TraceRecord(1, 0, 999.0, 0)])
    # relative to f_star: a loss of 0 can still be far from optimal
    assert harness.is_diverged([TraceRecord(0, 0, 0.0, 0), TraceRecord(1, 0, 1e4, 0)], f_star=-9.5)


def test_run_stops_on_blow_up():
    trace = harness.run(_toy_cfg(rounds=100_000, gamma=7.36569563735987e-05, eta=1.0, h0="zero"))
    assert trace[-1].round < 100_000
    assert math.isfinite(trace[-1].loss)
    assert trace[-1].grad_norm_sq > 1e3


def test_sweep_single_point():
    cfg = _toy_cfg(gamma=None, eta=0.5)
    res = harness.sweep(cfg, [1e-3])
    assert len(res.cells) == 1 and res.best.config.algorithm.gamma == 1e-3


def test_sweep_no_stable_configuration():
    cfg = _toy_cfg(rounds=20_000, eta=1.0, h0="zero")
    cfg.eval_every = 100
    with pytest.raises(NoStableConfiguration) as exc:
        harness.sweep(cfg, [7.36569563735987e-05, 1e-3, 1e-2, 1e-1])
    assert all(c.diverged for c in exc.value.cells)


def test_sweep_toy_theory_grid():
    # neither stepsize diverges on this instance; the larger one ends lower
    g = 1 / (9600 * math.sqrt(2))
    cfg = _toy_cfg(rounds=5000, eta=1 / 3)
    cfg.eval_every = 100
    res = harness.sweep(cfg, [10 * g, g])
    assert not any(c.diverged for c in res.cells)
    assert res.best.config.algorithm.gamma == pytest.approx(10 * g)


def test_sweep_eta_grid_and_ties():
    cfg = _toy_cfg(rounds=20, eta=None)
    res = harness.sweep(cfg, [1e-3, 2e-3], etas=[0.1, 0.5])
    assert len(res.cells) == 4
    assert {c.config.label for c in res.cells} == {
        "run_g0.001_eta0.1", "run_g0.001_eta0.5", "run_g0.002_eta0.1", "run_g0.002_eta0.5"}
    # a stepsize grid with duplicates: ties go to the smaller stepsize
    cfg = _toy_cfg("sgd", rounds=5, compressor={"kind": "identity"})
    res = harness.sweep(cfg, [1e-3, 1e-3])
    assert res.best is res.cells[0]


def test_sweep_parallel_matches_serial():
    cfg = _toy_cfg(rounds=30, eta=0.5)
    a = harness.sweep(cfg, [1e-3, 1e-2])
    b = harness.sweep(cfg, [1e-3, 1e-2], workers=2)
    assert [harness.trace_to_csv(c.trace) for c in a.cells] == [harness.trace_to_csv(c.trace) for c in b.cells]


def test_sweep_empty_grid():
    with pytest.raises(ConfigError):
        harness.sweep(_toy_cfg(eta=0.5), [])


def test_plateau_error():
    trace = [TraceRecord(t, 0, 3.0, 0.0, 0.25) for t in range(12)]
    assert harness.plateau_error(trace) == 0.25
    assert harness.plateau_error(trace, metric="loss", f_star=1.0) == 2.0
    with pytest.raises(ConfigError):
        harness.plateau_error(trace[:5])
    with pytest.raises(ConfigError):
        harness.plateau_error([TraceRecord(t, 0, 1.0, 0.0) for t in range(12)])
    with pytest.raises(ConfigError):
        harness.plateau_error(trace, metric="loss")


def test_plateau_converged_run():
    cfg = _toy_cfg("ef21", rounds=2000, gamma=0.1)
    assert harness.plateau_error(harness.run(cfg)) <= 1e-10


def test_presets():
    c = harness.preset("appendixC_b")
    assert len(c) == 2
    assert {cfg.algorithm.eta for cfg in c} == {1.0, 1 / 3}
    assert all(cfg.algorithm.h0 == "zero" for cfg in c)
    assert all(cfg.algorithm.gamma == pytest.approx(1 / (9600 * math.sqrt(2))) for cfg in c)
    assert all(cfg.algorithm.h0 == "exact" for cfg in harness.preset("appendixC_a"))
    f1 = harness.preset("fig1")
    assert [cfg.algorithm.method for cfg in f1] == ["compressed_sgd", "ec", "econtrol"]
    assert len({cfg.problem.seed for cfg in f1}) == 1
    assert all(cfg.oracle.sigma == 10.0 and cfg.problem.params["d"] == 300 for cfg in f1)
    f2 = harness.preset("fig2")
    assert [cfg.problem.params["n"] for cfg in f2] == [1, 2, 4, 8, 16]
    assert all(cfg.algorithm.gamma == 1e-3 and cfg.oracle.sigma == 50.0 for cfg in f2)
    f3 = harness.preset("fig3")
    assert {(cfg.problem.params["zeta"], cfg.algorithm.method) for cfg in f3} == {
        (z, m) for z in (0.0, 10.0, 100.0) for m in ("sgd", "ec", "econtrol")}
    with pytest.raises(ConfigError):
        harness.preset("fig9")


def test_summary_fields():
    cfg = _toy_cfg(rounds=20, gamma=1e-3, eta=0.5)
    s = harness.summarize(cfg, harness.run(cfg))
    assert s["gamma_theory_max"] == pytest.approx(1 / (9600 * math.sqrt(2)))
    assert s["rounds_run"] == 20 and not s["diverged"]
    assert "plateau_dist_sq" in s
