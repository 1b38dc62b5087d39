"""Analysis quantities observed along a single trajectory.

The Lyapunov ingredients here are per-run surrogates of quantities that the
convergence analysis defines in expectation; they are monitors, not proofs.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .algorithms import AlgoConfig, ClientState, Method, ServerState
from .errors import ContractViolation
from .objectives import Problem


@dataclass
class DiagSnapshot:
    round: int
    E_t: float
    H_t: float
    grad_norm_sq: float
    F_t: float | None = None
    X_t: float | None = None


def snapshot(problem: Problem, server: ServerState, clients: list[ClientState], gradients,
             config: AlgoConfig) -> DiagSnapshot:
    """Diagnostics at the start of a round, given that round's raw gradients.

    ``H_t`` uses the EControl message argument eta*e + g - h; methods without
    eta use eta = 1 and methods with a frozen estimator use it in place of h.
    """
    eta = config.eta if config.method is Method.ECONTROL else 1.0
    E = float(np.mean([c.e @ c.e for c in clients]))
    H = 0.0
    for c, g in zip(clients, gradients):
        h = c.h_fixed if c.h_fixed is not None else c.h
        r = eta * c.e + g - h
        H += float(r @ r)
    H /= len(clients)
    full = problem.grad(server.x)
    F = X = None
    if problem.f_star is not None:
        F = max(problem.value(server.x) - problem.f_star, 0.0)
    if problem.x_star is not None:
        dx = server.x_virtual - problem.x_star
        X = float(dx @ dx)
    return DiagSnapshot(server.round, E, H, float(full @ full), F, X)


def virtual_residual(server: ServerState, clients: list[ClientState], gamma: float) -> float:
    """Norm of (x_t - x~_t) - gamma * mean(e_t), zero for error-compensated methods."""
    e_mean = np.mean([c.e for c in clients], axis=0)
    return float(np.linalg.norm(server.x - server.x_virtual - gamma * e_mean))


def estimator_gap(server: ServerState, clients: list[ClientState]) -> float:
    return float(np.linalg.norm(server.h - np.mean([c.h for c in clients], axis=0)))


def lyapunov_weights(config: AlgoConfig, problem: Problem, delta: float, k: float = 100.0):
    """Weights (a, b) of Psi = X + a H + b E with b = 48 k L gamma^3 / delta, a = 512 k b / delta^2."""
    b = 48 * k * problem.L * config.gamma**3 / delta
    a = 512 * k * b / delta**2
    return a, b


class OutputRule(str, Enum):
    WEIGHTED = "weighted"
    UNIFORM = "uniform"


def output_weights(num_iterates: int, mode=OutputRule.WEIGHTED, mu_gamma: float = 0.0) -> np.ndarray:
    """Selection probabilities over iterates x_0..x_T.

    The weighted rule is proportional to (1 - mu*gamma/2)^-(t+1), accumulated
    in log space so long traces do not overflow.
    """
    if num_iterates < 1:
        raise ContractViolation("cannot pick from an empty trace")
    mode = OutputRule(mode)
    if mode is OutputRule.UNIFORM or mu_gamma == 0:
        return np.full(num_iterates, 1.0 / num_iterates)
    if not 0 < mu_gamma < 2:
        raise ContractViolation("weighted output needs 0 <= mu*gamma < 2")
    logw = -(np.arange(num_iterates) + 1) * np.log1p(-mu_gamma / 2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def pick_output(trace, mode=OutputRule.WEIGHTED, mu_gamma: float = 0.0, rng=None) -> int:
    """Index of the output iterate drawn from ``trace`` (a sequence of iterates)."""
    p = output_weights(len(trace), mode, mu_gamma)
    rng = rng if rng is not None else np.random.default_rng()
    return int(rng.choice(len(p), p=p))


def heterogeneity_at_opt(problem: Problem) -> float | None:
    """Mean squared norm of the local gradients at the minimiser, or None if unknown."""
    if problem.x_star is None:
        return None
    return float(np.mean([np.sum(problem.client_grad(i, problem.x_star) ** 2) for i in range(problem.n)]))
