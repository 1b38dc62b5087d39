"""Run configuration: JSON schema, validation, overrides and object builders."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .algorithms import AlgoConfig, Method, theory_params
from .compressors import CompressorSpec, Kind
from .errors import ConfigError
from .objectives import (
    GradientOracle,
    OracleMode,
    load_csv_dataset,
    make_least_squares,
    make_logistic,
    make_synthetic_classification,
    make_toy_divergence,
    partition_by_label,
)

log = logging.getLogger(__name__)

PROBLEM_KEYS = {
    "least_squares": {"n": None, "d": None, "zeta": 0.0, "b_mean": 1.0},
    "toy": {},
    "logistic": {
        "n": 10, "csv": None, "header": False, "num_samples": 1000, "num_features": 20,
        "num_classes": 10, "skew": 0.5, "l2": 1e-3, "test_fraction": 0.1,
    },
}


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check_keys(data, allowed, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")


@dataclass
class ProblemSpec:
    family: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data, path="problem"):
        _require(isinstance(data, dict) and "family" in data, f"{path}.family", "required")
        family = data["family"]
        _require(family in PROBLEM_KEYS, f"{path}.family", f"unknown family {family!r}")
        defaults = PROBLEM_KEYS[family]
        _check_keys(data, set(defaults) | {"family", "seed"}, path)
        params = {k: data.get(k, v) for k, v in defaults.items()}
        for k, v in params.items():
            _require(v is not None or k == "csv", f"{path}.{k}", "required")
        seed = data.get("seed", 0)
        _require(isinstance(seed, int) and seed >= 0, f"{path}.seed", "must be a nonnegative integer")
        if family == "least_squares":
            for k in ("n", "d"):
                _require(isinstance(params[k], int) and params[k] >= 1, f"{path}.{k}", "must be a positive integer")
            _require(params["zeta"] >= 0, f"{path}.zeta", "must be nonnegative")
        return cls(family, seed, params)

    def to_dict(self):
        return {"family": self.family, "seed": self.seed, **self.params}

    def build(self):
        p = self.params
        if self.family == "toy":
            return make_toy_divergence()
        if self.family == "least_squares":
            return make_least_squares(p["n"], p["d"], p["zeta"], p["b_mean"], self.seed)
        if p["csv"]:
            data = load_csv_dataset(p["csv"], header=p["header"])
        else:
            data = make_synthetic_classification(p["num_samples"], p["num_features"], p["num_classes"], self.seed)
        rng = np.random.default_rng(self.seed)
        test_mask = rng.random(len(data)) < p["test_fraction"]
        train, test = data.subset(~test_mask), data.subset(test_mask)
        parts = partition_by_label(train, p["n"], p["skew"], self.seed)
        return make_logistic(train, parts, p["l2"], test if len(test) else None)


@dataclass
class OracleSpec:
    mode: str = "exact"
    sigma: float = 0.0
    batch_size: int | None = None

    @classmethod
    def from_dict(cls, data, path="oracle"):
        _check_keys(data, {"mode", "sigma", "batch_size"}, path)
        spec = cls(**data)
        _require(spec.mode in [m.value for m in OracleMode], f"{path}.mode", f"unknown mode {spec.mode!r}")
        _require(spec.sigma >= 0, f"{path}.sigma", "must be nonnegative")
        return spec

    def build(self, problem):
        return GradientOracle(problem, OracleMode(self.mode), self.sigma, self.batch_size)


def _compressor_from_dict(data, dim, path):
    _require(isinstance(data, dict), path, "expected an object {kind, k}")
    _check_keys(data, {"kind", "k"}, path)
    _require("kind" in data, f"{path}.kind", "required")
    _require(data["kind"] in [k.value for k in Kind], f"{path}.kind", f"unknown kind {data['kind']!r}")
    if data["kind"] != Kind.IDENTITY.value:
        _require("k" in data, f"{path}.k", "required")
        _require(isinstance(data["k"], int) and 1 <= data["k"] <= dim, f"{path}.k",
                 f"must be an integer in [1, {dim}]")
    return CompressorSpec(Kind(data["kind"]), dim, data.get("k"))


@dataclass
class AlgoSpec:
    method: str
    compressor: dict
    gamma: float | None = None
    eta: float | None = None
    compressor2: dict | None = None
    momentum: float | None = None
    h0: str | None = None
    warmup_rounds: int | None = None

    @classmethod
    def from_dict(cls, data, path="algorithm"):
        _check_keys(data, {f.name for f in fields(cls)}, path)
        _require("method" in data, f"{path}.method", "required")
        _require(data["method"] in [m.value for m in Method], f"{path}.method", f"unknown method {data['method']!r}")
        if "compressor" not in data:
            if data["method"] == Method.SGD.value:
                data = {**data, "compressor": {"kind": "identity"}}
            else:
                raise ConfigError(f"{path}.compressor: required")
        spec = cls(**data)
        if spec.gamma is not None:
            _require(spec.gamma > 0, f"{path}.gamma", "must be positive")
        if spec.eta is not None:
            _require(0 < spec.eta <= 1, f"{path}.eta", "must lie in (0, 1]")
        return spec

    def build(self, problem) -> AlgoConfig:
        c1 = _compressor_from_dict(self.compressor, problem.d, "algorithm.compressor")
        c2 = None
        if self.compressor2 is not None:
            c2 = _compressor_from_dict(self.compressor2, problem.d, "algorithm.compressor2")
        if self.gamma is None or (self.method == Method.ECONTROL.value and self.eta is None):
            raise ConfigError("algorithm: gamma/eta unresolved; call resolve() first")
        return AlgoConfig(Method(self.method), self.gamma, c1, self.eta, c2, self.momentum, self.h0,
                          self.warmup_rounds)

    def resolve(self, problem) -> "AlgoSpec":
        """Fill a missing stepsize (and EControl eta) from the theory parameters."""
        c1 = _compressor_from_dict(self.compressor, problem.d, "algorithm.compressor")
        c2 = None if self.compressor2 is None else _compressor_from_dict(self.compressor2, problem.d,
                                                                          "algorithm.compressor2")
        out = replace(self)
        tp = theory_params(self.method, problem, c1, c2)
        if out.gamma is None:
            out.gamma = tp["gamma_max"]
            log.info("gamma not set, using theoretical value %.6g", out.gamma)
        if out.method == Method.ECONTROL.value and out.eta is None:
            out.eta = tp["eta"]
            log.info("eta not set, using theoretical value %.6g", out.eta)
        return out


@dataclass
class RunConfig:
    problem: ProblemSpec
    algorithm: AlgoSpec
    oracle: OracleSpec = field(default_factory=OracleSpec)
    rounds: int = 1000
    eval_every: int = 1
    master_seed: int = 0
    diagnostics: bool = False
    x0: list | None = None
    label: str = "run"

    def __post_init__(self):
        _require(isinstance(self.rounds, int) and self.rounds >= 1, "rounds", "must be an integer >= 1")
        _require(isinstance(self.eval_every, int) and self.eval_every >= 1, "eval_every",
                 "must be an integer >= 1")
        _require(isinstance(self.master_seed, int) and self.master_seed >= 0, "master_seed",
                 "must be a nonnegative integer")

    @classmethod
    def from_dict(cls, data):
        top = {f.name for f in fields(cls)}
        _check_keys(data, top, "")
        _require("problem" in data, "problem", "required")
        _require("algorithm" in data, "algorithm", "required")
        kw = {k: v for k, v in data.items() if k not in ("problem", "algorithm", "oracle")}
        return cls(
            problem=ProblemSpec.from_dict(data["problem"]),
            algorithm=AlgoSpec.from_dict(data["algorithm"]),
            oracle=OracleSpec.from_dict(data.get("oracle", {})),
            **kw,
        )

    def to_dict(self):
        return {
            "problem": self.problem.to_dict(),
            "oracle": asdict(self.oracle),
            "algorithm": asdict(self.algorithm),
            "rounds": self.rounds,
            "eval_every": self.eval_every,
            "master_seed": self.master_seed,
            "diagnostics": self.diagnostics,
            "x0": self.x0,
            "label": self.label,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def resolved(self, problem=None) -> "RunConfig":
        problem = problem or self.problem.build()
        return replace(self, algorithm=self.algorithm.resolve(problem))

    def build(self):
        """Return (problem, oracle, AlgoConfig) for a resolved configuration."""
        problem = self.problem.build()
        algo = self.algorithm.resolve(problem).build(problem)
        return problem, self.oracle.build(problem), algo


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


ALIASES = {name: "algorithm." + name for name in ("gamma", "eta", "method", "momentum", "h0", "warmup_rounds")}
ALIASES.update({"sigma": "oracle.sigma", "mode": "oracle.mode", "batch_size": "oracle.batch_size",
                "k": "algorithm.compressor.k"})


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key=value`` strings to a raw config dict; later keys win."""
    data = json.loads(json.dumps(data))
    seen = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        path = ALIASES.get(key, key)
        if path in seen:
            log.info("override %s given more than once; last value wins", key)
        seen[path] = raw
        parts = path.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p, {}), dict):
                raise ConfigError(f"{key}: invalid override key")
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path, overrides=None, resolve=True) -> RunConfig:
    """Read a JSON run configuration, apply overrides and fill theory defaults."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    data = apply_overrides(data, overrides)
    env_seed = os.environ.get("ECONTROL_SEED")
    if env_seed is not None:
        data["master_seed"] = int(env_seed)
    cfg = RunConfig.from_dict(data)
    if resolve:
        cfg = cfg.resolved()
    return cfg
