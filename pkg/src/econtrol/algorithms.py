"""Error-compensated compressed SGD methods as synchronous round state machines.

Each method is split into a client step (``client_round``), which turns the
client's fresh stochastic gradient into one or two compressed messages and
updates the client's private state, and a server step (``server_round``),
which aggregates the messages into the next model iterate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import streams
from .compressors import CompressorSpec, SparseMessage, compress, delta, dense_message
from .errors import ConfigError, ContractViolation
from .objectives import GradientOracle, Problem, sample_gradient


class Method(str, Enum):
    ECONTROL = "econtrol"
    EC = "ec"
    EC_IDEAL = "ec_ideal"
    EC_APPROX = "ec_approx"
    COMPRESSED_SGD = "compressed_sgd"
    DOUBLE_CONTRACTIVE = "double_contractive"
    EF21 = "ef21"
    EF21_HB = "ef21_hb"
    SGD = "sgd"


# methods whose server keeps a running mean of the client estimators
ESTIMATOR_METHODS = {Method.ECONTROL, Method.DOUBLE_CONTRACTIVE, Method.EF21, Method.EF21_HB}
# methods for which x_t - x~_t == gamma * mean(e_t)
ERROR_METHODS = {Method.ECONTROL, Method.EC, Method.EC_IDEAL, Method.EC_APPROX, Method.DOUBLE_CONTRACTIVE}

H0_MODES = ("oracle", "exact", "zero")


@dataclass
class AlgoConfig:
    """Hyperparameters of one method.

    ``h0`` selects the initial client estimators for methods that keep one:
    ``"oracle"`` draws one stochastic gradient per client, ``"exact"`` uses
    the local full gradient and ``"zero"`` starts from the zero vector.
    ``warmup_rounds`` feeds EC-Approximate from an EF21 pre-phase.
    """

    method: Method
    gamma: float
    compressor: CompressorSpec
    eta: float | None = None
    compressor2: CompressorSpec | None = None
    momentum: float | None = None
    h0: str | None = None
    warmup_rounds: int | None = None

    def __post_init__(self):
        self.method = Method(self.method)
        if not self.gamma > 0:
            raise ConfigError(f"algorithm.gamma: must be positive, got {self.gamma}")
        if self.method is Method.ECONTROL:
            if self.eta is None:
                raise ConfigError("algorithm.eta: required for econtrol")
            if not 0 < self.eta <= 1:
                raise ConfigError(f"algorithm.eta: must lie in (0, 1], got {self.eta}")
        if self.method is Method.DOUBLE_CONTRACTIVE and self.compressor2 is None:
            raise ConfigError("algorithm.compressor2: required for double_contractive")
        if self.method is Method.EF21_HB:
            if self.momentum is None:
                self.momentum = 0.1
            if not 0 < self.momentum <= 1:
                raise ConfigError("algorithm.momentum: must lie in (0, 1]")
        if self.h0 is None:
            self.h0 = "exact" if self.method in (Method.EF21, Method.EF21_HB) else "oracle"
        if self.h0 not in H0_MODES:
            raise ConfigError(f"algorithm.h0: must be one of {H0_MODES}, got {self.h0!r}")


@dataclass
class ClientState:
    e: np.ndarray
    h: np.ndarray
    h_fixed: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class ServerState:
    x: np.ndarray
    h: np.ndarray
    x_virtual: np.ndarray
    round: int = 0


def _initial_estimators(problem, oracle, config, x0, master_seed):
    if config.h0 == "zero":
        return np.zeros((problem.n, problem.d))
    if config.h0 == "exact" or not oracle.needs_rng:
        return np.array([problem.client_grad(i, x0) for i in range(problem.n)])
    return np.array([
        sample_gradient(oracle, i, x0, streams.client_rng(master_seed, streams.INIT, i, 0))
        for i in range(problem.n)
    ])


def init(problem: Problem, oracle: GradientOracle, config: AlgoConfig, master_seed=0, x0=None,
         h_hat=None):
    """Build the server state and one state per client before round 0.

    Raises ConfigError when EC-Ideal has no closed-form minimiser or
    EC-Approximate has neither a supplied ``h_hat`` table nor warm-up rounds.
    """
    d, n = problem.d, problem.n
    x0 = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    if x0.shape != (d,):
        raise ConfigError(f"x0: expected dimension {d}")
    for spec in (config.compressor, config.compressor2):
        if spec is not None and spec.dim != d:
            raise ConfigError(f"algorithm.compressor: dimension {spec.dim} does not match problem dimension {d}")
    m = config.method
    h = np.zeros((n, d))
    fixed = None
    if m is Method.EC_IDEAL:
        if problem.x_star is None:
            raise ConfigError("ec_ideal needs a problem with a known minimiser")
        fixed = np.array([problem.client_grad(i, problem.x_star) for i in range(n)])
    elif m is Method.EC_APPROX:
        if h_hat is None:
            if config.warmup_rounds is None:
                raise ConfigError("ec_approx needs an h_hat table or algorithm.warmup_rounds")
            h_hat = run_ef21_warmup(problem, oracle, config.warmup_rounds, compressor=config.compressor,
                                    x0=x0, master_seed=master_seed)
        fixed = np.array(h_hat, dtype=float).reshape(n, d)
    elif m in ESTIMATOR_METHODS:
        h = _initial_estimators(problem, oracle, config, x0, master_seed)

    clients = []
    for i in range(n):
        c = ClientState(e=np.zeros(d), h=h[i].copy())
        if fixed is not None:
            c.h_fixed = fixed[i].copy()
        if m is Method.EF21_HB:
            c.v = h[i].copy()
        clients.append(c)
    server_h = fixed.mean(0) if fixed is not None else h.mean(0)
    server = ServerState(x=x0.copy(), h=server_h, x_virtual=x0.copy())
    return server, clients


def client_round(client: ClientState, g, config: AlgoConfig, rng=None) -> list[SparseMessage]:
    """Advance one client by one round and return the messages it uploads."""
    g = np.asarray(g, dtype=float)
    if g.shape != client.e.shape:
        raise ContractViolation(f"gradient of shape {g.shape} does not match state {client.e.shape}")
    m, C = config.method, config.compressor
    if m is Method.ECONTROL:
        msg = compress(C, config.eta * client.e + g - client.h, rng)
        delta_ = msg.densify()
        client.e = client.e + g - client.h - delta_
        client.h = client.h + delta_
        return [msg]
    if m is Method.EC:
        msg = compress(C, client.e + g, rng)
        client.e = client.e + g - msg.densify()
        return [msg]
    if m in (Method.EC_IDEAL, Method.EC_APPROX):
        msg = compress(C, client.e + g - client.h_fixed, rng)
        client.e = client.e + g - client.h_fixed - msg.densify()
        return [msg]
    if m is Method.COMPRESSED_SGD:
        return [compress(C, g, rng)]
    if m is Method.DOUBLE_CONTRACTIVE:
        msg = compress(C, client.e + g - client.h, rng)
        msg2 = compress(config.compressor2, g - client.h, rng)
        client.e = client.e + g - client.h - msg.densify()
        client.h = client.h + msg2.densify()
        return [msg, msg2]
    if m is Method.EF21:
        msg = compress(C, g - client.h, rng)
        client.h = client.h + msg.densify()
        return [msg]
    if m is Method.EF21_HB:
        beta = config.momentum
        client.v = (1 - beta) * client.v + beta * g
        msg = compress(C, client.v - client.h, rng)
        client.h = client.h + msg.densify()
        return [msg]
    if m is Method.SGD:
        return [dense_message(g)]
    raise ConfigError(f"unknown method {m}")


def server_round(server: ServerState, messages, grad_mean, config: AlgoConfig) -> None:
    """Aggregate one round of client messages into the next iterate.

    ``messages`` holds one list per client as returned by ``client_round``.
    ``grad_mean`` is the mean of this round's raw client gradients and only
    drives the virtual iterate.
    """
    per_client = 2 if config.method is Method.DOUBLE_CONTRACTIVE else 1
    if any(len(ms) != per_client for ms in messages):
        raise ContractViolation(f"{config.method.value} expects {per_client} message(s) per client")
    n = len(messages)
    mean = sum(ms[0].densify() for ms in messages) / n
    m, gamma = config.method, config.gamma
    if m is Method.ECONTROL:
        server.x = server.x - gamma * server.h - gamma * mean
        server.h = server.h + mean
    elif m in (Method.EC, Method.COMPRESSED_SGD, Method.SGD):
        server.x = server.x - gamma * mean
    elif m in (Method.EC_IDEAL, Method.EC_APPROX):
        server.x = server.x - gamma * server.h - gamma * mean
    elif m is Method.DOUBLE_CONTRACTIVE:
        server.x = server.x - gamma * server.h - gamma * mean
        server.h = server.h + sum(ms[1].densify() for ms in messages) / n
    elif m in (Method.EF21, Method.EF21_HB):
        # the estimator is refreshed with the gradient at x_t before it is used for the step
        server.h = server.h + mean
        server.x = server.x - gamma * server.h
    server.x_virtual = server.x_virtual - gamma * np.asarray(grad_mean)
    server.round += 1


def run_ef21_warmup(problem: Problem, oracle: GradientOracle, rounds: int, gamma=None, compressor=None,
                    x0=None, master_seed=0) -> np.ndarray:
    """Run EF21 for ``rounds`` steps and return the final client estimators.

    Starts from h_i = grad f_i(x0); each round takes a step with the mean
    estimator, then every client refreshes its estimator with a compressed
    gradient difference at the new point. The default stepsize is
    delta / (100 L). Returns an (n, d) array.
    """
    if rounds < 0:
        raise ConfigError("warmup rounds must be nonnegative")
    compressor = compressor or CompressorSpec.identity(problem.d)
    if gamma is None:
        gamma = theory_params(Method.EF21, problem, compressor)["gamma_max"]
    cfg = AlgoConfig(Method.EF21, gamma, compressor)
    x = np.zeros(problem.d) if x0 is None else np.array(x0, dtype=float)
    clients = [ClientState(e=np.zeros(problem.d), h=problem.client_grad(i, x)) for i in range(problem.n)]
    for t in range(rounds):
        x = x - gamma * np.mean([c.h for c in clients], axis=0)
        for i, c in enumerate(clients):
            rng = streams.client_rng(master_seed, streams.WARMUP, i, t)
            client_round(c, sample_gradient(oracle, i, x, rng), cfg, rng)
    return np.array([c.h for c in clients])


def theory_params(method, problem: Problem, compressor: CompressorSpec, compressor2=None) -> dict:
    """Theoretical hyperparameters of ``method``.

    Returns ``eta`` (EControl only, else None) and ``gamma_max``, the largest
    stepsize covered by its convergence guarantee.
    """
    method = Method(method)
    dl = delta(compressor)
    eta = None
    if method is Method.ECONTROL:
        eta = dl / 400
        gamma = dl / (3200 * math.sqrt(2) * problem.L_tilde)
    elif method in (Method.EC_IDEAL, Method.EC_APPROX):
        gamma = dl / (8 * math.sqrt(6) * problem.L)
    elif method is Method.DOUBLE_CONTRACTIVE:
        d2 = delta(compressor2) if compressor2 is not None else dl
        gamma = dl * d2 / (64 * math.sqrt(2) * problem.L_tilde)
    elif method in (Method.EF21, Method.EF21_HB):
        gamma = dl / (100 * problem.L)
    else:
        gamma = 1 / (4 * problem.L)
    return {"eta": eta, "gamma_max": gamma}
