"""Error-compensated distributed SGD with contractive compression (EControl and baselines)."""
from .algorithms import AlgoConfig, ClientState, Method, ServerState, client_round, init, run_ef21_warmup, server_round, theory_params
from .compressors import CompressorSpec, SparseMessage, compress, delta, densify, message_bits
from .config import RunConfig, load_config
from .errors import ConfigError, ContractViolation, InvariantViolation, NoStableConfiguration
from .harness import Simulation, TraceRecord, plateau_error, preset, run, sweep
from .objectives import (
    GradientOracle,
    LabeledDataset,
    make_least_squares,
    make_logistic,
    make_toy_divergence,
    partition_by_label,
    sample_gradient,
)

__version__ = "0.1.0"
