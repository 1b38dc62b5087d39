"""Synchronous client/server simulation, stepsize sweeps and preset experiments."""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import diagnostics, streams
from .algorithms import ERROR_METHODS, ESTIMATOR_METHODS, Method, client_round, init, server_round
from .compressors import message_bits
from .config import AlgoSpec, OracleSpec, ProblemSpec, RunConfig
from .errors import ConfigError, InvariantViolation, NoStableConfiguration

DIVERGENCE_FACTOR = 1e3
INVARIANT_TOL = 1e-9


@dataclass
class TraceRecord:
    round: int
    bits: int
    loss: float
    grad_norm_sq: float
    dist_sq: float | None = None
    test_acc: float | None = None
    F_t: float | None = None
    E_t: float | None = None
    H_t: float | None = None
    X_t: float | None = None


CSV_COLUMNS = [f.name for f in fields(TraceRecord)]
REQUIRED_COLUMNS = CSV_COLUMNS[:4]


class Simulation:
    """One run of a method, advanced a synchronous round at a time.

    Client ``i`` draws its round-``t`` gradient from the stream keyed by
    (master_seed, client, t), so the trajectory does not depend on the
    order in which clients are visited.
    """

    def __init__(self, problem, oracle, algo, master_seed=0, x0=None, h_hat=None, diagnostics=False,
                 check_invariants=False):
        self.problem, self.oracle, self.algo = problem, oracle, algo
        self.master_seed = master_seed
        self.diagnostics = diagnostics
        self.check_invariants = check_invariants
        self.server, self.clients = init(problem, oracle, algo, master_seed, x0, h_hat)
        self.bits = 0
        self.max_residual = 0.0
        self.max_estimator_gap = 0.0
        self._compressor_rng = algo.compressor.needs_rng or (
            algo.compressor2 is not None and algo.compressor2.needs_rng)

    @classmethod
    def from_config(cls, config: RunConfig, **kw):
        problem, oracle, algo = config.build()
        return cls(problem, oracle, algo, config.master_seed, config.x0, diagnostics=config.diagnostics, **kw)

    @property
    def round(self):
        return self.server.round

    def gradients(self, t=None):
        t = self.server.round if t is None else t
        x = self.server.x
        if not self.oracle.needs_rng:
            return [self.oracle.sample(i, x) for i in range(self.problem.n)]
        return [self.oracle.sample(i, x, streams.client_rng(self.master_seed, streams.GRADIENT, i, t))
                for i in range(self.problem.n)]

    def record(self, grads=None) -> TraceRecord:
        p, x = self.problem, self.server.x
        g = p.grad(x)
        rec = TraceRecord(self.server.round, self.bits, p.value(x), float(g @ g))
        if p.x_star is not None:
            rec.dist_sq = float(np.sum((x - p.x_star) ** 2))
        if hasattr(p, "accuracy"):
            rec.test_acc = p.accuracy(x)
        if self.diagnostics:
            grads = self.gradients() if grads is None else grads
            snap = diagnostics.snapshot(p, self.server, self.clients, grads, self.algo)
            rec.F_t, rec.E_t, rec.H_t, rec.X_t = snap.F_t, snap.E_t, snap.H_t, snap.X_t
        return rec

    def step(self, grads=None):
        t = self.server.round
        grads = self.gradients() if grads is None else grads
        messages = []
        for i, (c, g) in enumerate(zip(self.clients, grads)):
            rng = None
            if self._compressor_rng:
                rng = streams.client_rng(self.master_seed, streams.COMPRESSOR, i, t)
            msgs = client_round(c, g, self.algo, rng)
            self.bits += sum(message_bits(m) for m in msgs)
            messages.append(msgs)
        server_round(self.server, messages, np.mean(grads, axis=0), self.algo)
        if self.check_invariants:
            self._check()

    def _check(self):
        s, m = self.server, self.algo.method
        scale = 1.0 + float(np.linalg.norm(s.x))
        if m in ERROR_METHODS:
            r = diagnostics.virtual_residual(s, self.clients, self.algo.gamma)
            self.max_residual = max(self.max_residual, r / scale)
            if r > INVARIANT_TOL * scale:
                raise InvariantViolation(f"round {s.round}: virtual iterate residual {r:.3e}")
        if m in ESTIMATOR_METHODS:
            gap = diagnostics.estimator_gap(s, self.clients)
            self.max_estimator_gap = max(self.max_estimator_gap, gap)
            if gap > INVARIANT_TOL * (1.0 + float(np.linalg.norm(s.h))):
                raise InvariantViolation(f"round {s.round}: server estimator drifted by {gap:.3e}")

    def run(self, rounds, eval_every=1, stop=None) -> list[TraceRecord]:
        """Advance ``rounds`` rounds, recording every ``eval_every`` rounds and at the end.

        ``stop(record)`` may return True to end the run early at a record.
        A non-finite loss always ends the run.
        """
        trace = []
        for _ in range(rounds):
            t = self.server.round
            grads = self.gradients()
            if t % eval_every == 0:
                rec = self.record(grads)
                trace.append(rec)
                if not math.isfinite(rec.loss) or (stop is not None and stop(rec)):
                    return trace
            self.step(grads)
        trace.append(self.record())
        return trace


def run(config: RunConfig, stop=None, check_invariants=False, stop_on_divergence=True) -> list[TraceRecord]:
    """Execute ``config`` and return its trace.

    By default the run ends at the first record whose loss gap exceeds 1e3
    times the initial one.
    """
    sim = Simulation.from_config(config, check_invariants=check_invariants)
    if stop is None and stop_on_divergence:
        stop = _divergence_stop(sim.problem.f_star)
    with np.errstate(over="ignore", invalid="ignore"):
        return sim.run(config.rounds, config.eval_every, stop)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def trace_to_csv(trace: list[TraceRecord]) -> str:
    cols = REQUIRED_COLUMNS + [c for c in CSV_COLUMNS[4:] if any(getattr(r, c) is not None for r in trace)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in trace:
        w.writerow([_fmt(getattr(r, c)) for c in cols])
    return buf.getvalue()


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        fh.write(trace_to_csv(trace))


def read_trace(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        kw = {}
        for k, v in row.items():
            if v == "":
                continue
            kw[k] = int(v) if k in ("round", "bits") else float(v)
        out.append(TraceRecord(**kw))
    return out


# ---------------------------------------------------------------- sweeps


def loss_gap(trace, f_star=None):
    base = 0.0 if f_star is None else f_star
    return np.array([r.loss - base for r in trace])


def is_diverged(trace, f_star=None, factor=DIVERGENCE_FACTOR) -> bool:
    gaps = loss_gap(trace, f_star)
    if not np.all(np.isfinite(gaps)):
        return True
    return bool(np.any(gaps > factor * abs(gaps[0])))


@dataclass
class SweepCell:
    config: RunConfig
    trace: list
    diverged: bool
    score: float


@dataclass
class SweepResult:
    best: SweepCell
    cells: list


def _divergence_stop(f_star):
    state = {}

    def stop(rec):
        gap = rec.loss - (f_star or 0.0)
        if "g0" not in state:
            state["g0"] = abs(gap)
            return False
        return not math.isfinite(gap) or gap > DIVERGENCE_FACTOR * state["g0"]

    return stop


def _run_cell(config):
    return run(config), config.problem.build().f_star


def sweep(base: RunConfig, gammas, etas=None, criterion="final_loss", workers=1) -> SweepResult:
    """Grid search over stepsizes (and eta for EControl).

    A cell diverges when its loss gap becomes non-finite or exceeds 1e3 times
    its initial value. ``criterion`` is ``final_loss`` or ``min_loss``; ties
    go to the smaller stepsize. Raises NoStableConfiguration when every cell
    diverges.
    """
    if not gammas:
        raise ConfigError("sweep needs at least one stepsize")
    is_econtrol = base.algorithm.method == Method.ECONTROL.value
    eta_grid = list(etas) if (etas and is_econtrol) else [base.algorithm.eta]
    configs = []
    for g, e in itertools.product(sorted(gammas), eta_grid):
        label = f"{base.label}_g{g:g}" + (f"_eta{e:g}" if is_econtrol and e is not None else "")
        configs.append(replace(base, algorithm=replace(base.algorithm, gamma=g, eta=e), label=label))
    configs = [c.resolved() for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(c) for c in configs]
    cells = []
    for cfg, (trace, f_star) in zip(configs, results):
        div = is_diverged(trace, f_star)
        gaps = loss_gap(trace, f_star)
        score = float(gaps[-1] if criterion == "final_loss" else np.min(gaps))
        cells.append(SweepCell(cfg, trace, div, math.inf if div else score))
    stable = [c for c in cells if not c.diverged]
    if not stable:
        err = NoStableConfiguration("no stable configuration: every run diverged")
        err.cells = cells
        raise err
    best = min(stable, key=lambda c: (c.score, c.config.algorithm.gamma))
    return SweepResult(best, cells)


def plateau_error(trace, tail_fraction=0.25, metric="dist", f_star=None) -> float:
    """Mean error over the last ``tail_fraction`` of the records.

    ``metric`` is ``dist`` (squared distance to the minimiser) or ``loss``
    (loss minus ``f_star``).
    """
    if len(trace) < 10:
        raise ConfigError("plateau_error needs at least 10 records")
    tail = trace[-max(1, int(round(tail_fraction * len(trace)))):]
    if metric == "dist":
        vals = [r.dist_sq for r in tail]
        if any(v is None for v in vals):
            raise ConfigError("plateau_error: trace has no dist_sq column")
    elif metric == "loss":
        if f_star is None:
            raise ConfigError("plateau_error: loss metric needs f_star")
        vals = [r.loss - f_star for r in tail]
    else:
        raise ConfigError(f"plateau_error: unknown metric {metric!r}")
    return float(np.mean(vals))


# ---------------------------------------------------------------- presets

GAMMA_GRID = [5e-5, 1e-4, 5e-4, 1e-3, 1e-2, 1e-1]
ETA_GRID = [1e-3, 5e-3, 1e-2, 5e-2, 1e-1]

PRESETS = {
    "fig1": "compressed SGD vs EC vs EControl, least squares n=5 d=300 zeta=0 sigma=10, Top-K 10%",
    "fig2": "EControl with n in {1,2,4,8,16}, d=200 zeta=100 sigma=50, gamma=0.001",
    "fig3": "SGD vs EC vs EControl across zeta in {0,10,100}, n=5 d=300 sigma=10",
    "appendixC_a": "toy problem, Top-1, exact gradients, h0 = local gradients, eta in {1, delta}",
    "appendixC_b": "toy problem, Top-1, exact gradients, h0 = 0, eta in {1, delta}",
}

# best final loss gap over GAMMA_GRID x ETA_GRID with 3000 rounds, seed 0
TUNED = {
    "fig1": {"compressed_sgd": {"gamma": 5e-4}, "ec": {"gamma": 5e-4}, "econtrol": {"gamma": 5e-4, "eta": 0.1}},
    "fig3": {
        zeta: {"sgd": {"gamma": 5e-4}, "ec": {"gamma": 5e-4}, "econtrol": {"gamma": 5e-4, "eta": 0.1}}
        for zeta in (0, 10, 100)
    },
}
# eta = delta = 0.1 gave the cleanest halving across the client counts
FIG2_ETA = 0.1

FIG_ROUNDS = {"fig1": 3000, "fig2": 20000, "fig3": 3000}
APPENDIX_C_ROUNDS = 200_000
FIG2_CLIENTS = (1, 2, 4, 8, 16)


def _topk10(d):
    return {"kind": "topk", "k": d // 10}


def _ls(n, d, zeta, seed):
    return ProblemSpec("least_squares", seed, {"n": n, "d": d, "zeta": zeta, "b_mean": 1.0})


def preset(name, master_seed=0, problem_seed=0) -> list[RunConfig]:
    """Run configurations of a named synthetic experiment."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if name == "fig1":
        out = []
        for method, params in TUNED["fig1"].items():
            algo = AlgoSpec(method, _topk10(300), **params)
            out.append(RunConfig(_ls(5, 300, 0.0, problem_seed), algo, OracleSpec("gaussian", 10.0),
                                 FIG_ROUNDS["fig1"], 10, master_seed, label=f"fig1_{method}"))
        return out
    if name == "fig2":
        return [
            RunConfig(_ls(n, 200, 100.0, problem_seed), AlgoSpec("econtrol", _topk10(200), gamma=1e-3, eta=FIG2_ETA),
                      OracleSpec("gaussian", 50.0), FIG_ROUNDS["fig2"], 10, master_seed, label=f"fig2_n{n}")
            for n in FIG2_CLIENTS
        ]
    if name == "fig3":
        out = []
        for zeta, methods in TUNED["fig3"].items():
            for method, params in methods.items():
                comp = {"kind": "identity"} if method == "sgd" else _topk10(300)
                out.append(RunConfig(_ls(5, 300, float(zeta), problem_seed), AlgoSpec(method, comp, **params),
                                     OracleSpec("gaussian", 10.0), FIG_ROUNDS["fig3"], 10, master_seed,
                                     label=f"fig3_zeta{zeta}_{method}"))
        return out
    h0 = "exact" if name == "appendixC_a" else "zero"
    delta = 1.0 / 3.0
    # gamma* = delta / (3200 sqrt(2) L) with L = 1 on the toy problem
    gamma = delta / (3200 * math.sqrt(2))
    return [
        RunConfig(ProblemSpec("toy"), AlgoSpec("econtrol", {"kind": "topk", "k": 1}, gamma=gamma, eta=eta, h0=h0),
                  OracleSpec("exact"), APPENDIX_C_ROUNDS, 1000, master_seed, label=f"{name}_eta{tag}")
        for eta, tag in ((1.0, "1"), (delta, "delta"))
    ]


def summarize(config: RunConfig, trace, problem=None) -> dict:
    """Plateau and convergence statistics for one finished run."""
    from .algorithms import theory_params
    from .config import _compressor_from_dict

    problem = problem or config.problem.build()
    comp = _compressor_from_dict(config.algorithm.compressor, problem.d, "algorithm.compressor")
    comp2 = None
    if config.algorithm.compressor2 is not None:
        comp2 = _compressor_from_dict(config.algorithm.compressor2, problem.d, "algorithm.compressor2")
    tp = theory_params(config.algorithm.method, problem, comp, comp2)
    last = trace[-1]
    out = {
        "label": config.label,
        "method": config.algorithm.method,
        "gamma": config.algorithm.gamma,
        "eta": config.algorithm.eta,
        "gamma_theory_max": tp["gamma_max"],
        "eta_theory": tp["eta"],
        "rounds_run": last.round,
        "bits": last.bits,
        "final_loss": last.loss,
        "final_grad_norm_sq": last.grad_norm_sq,
        "min_grad_norm_sq": min(r.grad_norm_sq for r in trace),
        "diverged": is_diverged(trace, problem.f_star),
    }
    if problem.f_star is not None:
        out["f_star"] = problem.f_star
        out["final_loss_gap"] = last.loss - problem.f_star
        if len(trace) >= 10:
            out["plateau_loss_gap"] = plateau_error(trace, metric="loss", f_star=problem.f_star)
            out["plateau_dist_sq"] = plateau_error(trace, metric="dist")
    return out
