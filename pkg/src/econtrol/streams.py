"""Deterministic per-client random streams.

Every draw a client makes is keyed by (master seed, purpose, client, round),
so results do not depend on the order in which clients are processed.
"""
import numpy as np

GRADIENT = 0
COMPRESSOR = 1
INIT = 2
WARMUP = 3


def client_rng(master_seed: int, purpose: int, client: int, round_: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, purpose, client, round_]))
