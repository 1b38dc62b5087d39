"""Contractive compression operators and the sparse messages they produce."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractViolation

VALUE_BITS = 32


class Kind(str, Enum):
    TOPK = "topk"
    RANDK = "randk"
    IDENTITY = "identity"


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind
    dim: int
    k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.dim < 1:
            raise ConfigError(f"compressor.dim: must be positive, got {self.dim}")
        if self.kind is Kind.IDENTITY:
            object.__setattr__(self, "k", self.dim)
        elif self.k is None:
            raise ConfigError("compressor.k: required for kind " + self.kind.value)
        elif not 1 <= self.k <= self.dim:
            raise ConfigError(f"compressor.k: need 1 <= k <= {self.dim}, got {self.k}")

    @classmethod
    def topk(cls, k, dim):
        return cls(Kind.TOPK, dim, k)

    @classmethod
    def randk(cls, k, dim):
        return cls(Kind.RANDK, dim, k)

    @classmethod
    def identity(cls, dim):
        return cls(Kind.IDENTITY, dim)

    @property
    def needs_rng(self) -> bool:
        return self.kind is Kind.RANDK

    def to_dict(self):
        if self.kind is Kind.IDENTITY:
            return {"kind": self.kind.value}
        return {"kind": self.kind.value, "k": self.k}


@dataclass(frozen=True, eq=False)
class SparseMessage:
    """One uplink transmission: ``values`` at sorted ``indices`` of a ``dim``-vector."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ContractViolation("indices and values must be 1-d and of equal length")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0)):
            raise ContractViolation("indices must be strictly increasing within [0, dim)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def _trusted(cls, dim, indices, values):
        # operators below build well-formed messages; skip the validation cost
        msg = object.__new__(cls)
        object.__setattr__(msg, "dim", dim)
        object.__setattr__(msg, "indices", indices)
        object.__setattr__(msg, "values", values)
        return msg

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseMessage):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def densify(msg: SparseMessage) -> np.ndarray:
    return msg.densify()


def dense_message(x: np.ndarray) -> SparseMessage:
    return SparseMessage._trusted(x.size, np.arange(x.size), x.copy())


def _topk_indices(x, k):
    if k == 1:
        # argmax returns the first maximiser, i.e. the lower index on ties
        return np.array([np.argmax(np.abs(x))])
    order = np.argsort(-np.abs(x), kind="stable")
    return np.sort(order[:k])


def compress(spec: CompressorSpec, x, rng: np.random.Generator | None = None) -> SparseMessage:
    """Apply the operator named by ``spec`` to ``x``.

    Top-K keeps the ``k`` largest-magnitude entries (lower index wins ties).
    Rand-K keeps ``k`` uniformly chosen coordinates without rescaling. Neither
    touches the kept values, so ``compress(spec, 0)`` is exactly zero.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise ContractViolation(f"expected a vector of dimension {spec.dim}, got shape {x.shape}")
    if spec.kind is Kind.IDENTITY:
        return dense_message(x)
    if spec.kind is Kind.TOPK:
        idx = _topk_indices(x, spec.k)
    else:
        if rng is None:
            raise ContractViolation("randk requires a random stream")
        idx = np.sort(rng.choice(spec.dim, size=spec.k, replace=False))
    return SparseMessage._trusted(spec.dim, idx, x[idx])


def delta(spec: CompressorSpec) -> float:
    if spec.kind is Kind.IDENTITY:
        return 1.0
    return spec.k / spec.dim


def index_bits(dim: int) -> int:
    return math.ceil(math.log2(dim)) if dim > 1 else 0


def message_bits(msg: SparseMessage) -> int:
    """Bits on the wire: 32-bit values, plus ceil(log2 d)-bit indices unless dense."""
    if msg.nnz == msg.dim:
        return msg.dim * VALUE_BITS
    return msg.nnz * (VALUE_BITS + index_bits(msg.dim))
