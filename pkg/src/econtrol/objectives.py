"""Benchmark problems, gradient oracles and data partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractViolation


class Problem:
    """``n`` client objectives over R^d; the global objective is their mean.

    Subclasses provide ``client_value``, ``client_grad`` and the smoothness
    constants ``L_i``, ``L`` and ``mu``. ``x_star``/``f_star`` are None when
    no closed form exists.
    """

    n: int
    d: int
    L_i: np.ndarray
    L: float
    mu: float = 0.0
    x_star: np.ndarray | None = None
    f_star: float | None = None

    @property
    def L_tilde(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.L_i))))

    @property
    def L_max(self) -> float:
        return float(np.max(self.L_i))

    def client_value(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def client_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, x):
        return float(np.mean([self.client_value(i, x) for i in range(self.n)]))

    def grad(self, x):
        return np.mean([self.client_grad(i, x) for i in range(self.n)], axis=0)

    def _check(self, x):
        if np.shape(x) != (self.d,):
            raise ContractViolation(f"expected a vector of dimension {self.d}, got shape {np.shape(x)}")


class QuadraticProblem(Problem):
    """f_i(x) = 1/2 ||a_i x - b_i||^2 + c_i with scalar a_i.

    Every Hessian is a multiple of the identity, so the smoothness constants,
    the strong convexity constant and the minimiser are all closed form.
    """

    def __init__(self, scales, targets, consts=None):
        self.scales = np.asarray(scales, dtype=float)
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))
        self.n, self.d = self.targets.shape
        if self.scales.shape != (self.n,):
            raise ConfigError("one scale per client required")
        self.consts = np.zeros(self.n) if consts is None else np.asarray(consts, dtype=float)
        sq = self.scales**2
        self.L_i = sq
        self.L = float(sq.mean())
        self.mu = self.L
        self.x_star = (self.scales[:, None] * self.targets).sum(0) / sq.sum()
        self.f_star = self.value(self.x_star)

    def client_value(self, i, x):
        r = self.scales[i] * x - self.targets[i]
        return 0.5 * float(r @ r) + self.consts[i]

    def client_grad(self, i, x):
        self._check(x)
        a = self.scales[i]
        return a * (a * x - self.targets[i])

    def value(self, x):
        r = self.scales[:, None] * x - self.targets
        return float(0.5 * np.mean(np.einsum("ij,ij->i", r, r)) + self.consts.mean())

    def grad(self, x):
        self._check(x)
        a = self.scales
        return (a[:, None] * (a[:, None] * x - self.targets)).mean(0)


def make_least_squares(n, d, zeta, b_mean=None, seed=0) -> QuadraticProblem:
    """Synthetic least squares with A_i = (i^2/n) I and b_i ~ N(b, zeta^2/i^2 I).

    Each b_i is drawn from its own child stream of ``seed``, so client ``i``'s
    data does not depend on ``n`` or on any other client. ``seed`` may also be
    a list of per-client seeds.
    """
    if n < 1 or d < 1:
        raise ConfigError(f"least squares needs n >= 1 and d >= 1, got n={n}, d={d}")
    if zeta < 0:
        raise ConfigError("zeta must be nonnegative")
    b = np.ones(d) if b_mean is None else np.broadcast_to(np.asarray(b_mean, dtype=float), (d,))
    idx = np.arange(1, n + 1)
    if np.ndim(seed) == 0:
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    else:
        if len(seed) != n:
            raise ConfigError("need one seed per client")
        streams = [np.random.default_rng(s) for s in seed]
    targets = np.empty((n, d))
    for i, rng in zip(idx, streams):
        noise = rng.standard_normal(d)
        targets[i - 1] = b + (zeta / i) * noise if zeta > 0 else b
    return QuadraticProblem(idx**2 / n, targets)


TOY_SHIFTS = np.array([[1.0, 1.0, 5.0], [1.0, 5.0, 1.0]])


def make_toy_divergence() -> QuadraticProblem:
    """Two clients in R^3 with f_i(x) = c_i.x + 1/2 ||x||^2."""
    # c.x + |x|^2/2 == |x + c|^2/2 - |c|^2/2
    return QuadraticProblem(np.ones(2), -TOY_SHIFTS, -0.5 * (TOY_SHIFTS**2).sum(1))


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features must be (num_samples, num_features) matching labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features must be finite")

    def __len__(self):
        return self.labels.size

    @property
    def num_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


def load_csv_dataset(path, header=False, num_classes=None) -> LabeledDataset:
    """Rows of real features with the integer label in the last column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r]
    data = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(float(r[-1])) for r in rows])
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(data, labels, num_classes)


def make_synthetic_classification(num_samples=1000, num_features=20, num_classes=10, seed=0,
                                  separation=2.0) -> LabeledDataset:
    """Balanced Gaussian blobs; a desk-scale stand-in for an image dataset."""
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((num_classes, num_features)) / np.sqrt(num_features)
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    features = centers[labels] + rng.standard_normal((num_samples, num_features)) / np.sqrt(num_features)
    return LabeledDataset(features, labels, num_classes)


def partition_by_label(dataset: LabeledDataset, n, skew_fraction=0.5, seed=0):
    """Split sample indices across ``n`` clients.

    A ``skew_fraction`` share of every label's samples goes to client
    ``label % n``; the remainder is shuffled and dealt out evenly. With more
    labels than clients the label blocks wrap round-robin.
    """
    if not 0.0 <= skew_fraction <= 1.0:
        raise ConfigError("skew_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(n)]
    rest = []
    for label in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == label))
        m = int(round(skew_fraction * idx.size))
        shards[label % n].extend(idx[:m].tolist())
        rest.extend(idx[m:].tolist())
    rest = rng.permutation(np.array(rest, dtype=np.int64))
    for i, part in enumerate(np.array_split(rest, n)):
        shards[i].extend(part.tolist())
    return [np.sort(np.array(s, dtype=np.int64)) for s in shards]


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


class LogisticProblem(Problem):
    """Multiclass softmax regression, one data shard per client.

    The parameter vector packs the (num_classes x num_features) weight matrix
    row-major followed by one bias per class. The ridge term covers the whole
    vector.

    Smoothness: the softmax cross-entropy Hessian of one sample is
    (diag(p) - p p^T) kron (a a^T) with a the bias-augmented features, and
    diag(p) - p p^T has spectral norm at most 1/2. Hence
    L_i = max_j (||a_j||^2 + 1) / 2 + l2 is an upper bound; the global L is
    bounded by the mean of the L_i.
    """

    def __init__(self, dataset: LabeledDataset, partition, l2=0.0, test: LabeledDataset | None = None):
        if any(len(p) == 0 for p in partition):
            raise ConfigError("every client needs at least one sample")
        self.dataset = dataset
        self.shards = [np.asarray(p, dtype=np.int64) for p in partition]
        self.l2 = float(l2)
        self.test = test
        self.n = len(self.shards)
        self.num_classes = dataset.num_classes
        self.num_features = dataset.num_features
        self.d = self.num_classes * (self.num_features + 1)
        sq = (dataset.features**2).sum(1) + 1.0
        self.L_i = np.array([0.5 * sq[s].max() + self.l2 for s in self.shards])
        self.L = float(self.L_i.mean())
        self.mu = self.l2

    def unpack(self, x):
        c, f = self.num_classes, self.num_features
        return x[: c * f].reshape(c, f), x[c * f:]

    def _logits(self, x, features):
        w, b = self.unpack(x)
        return features @ w.T + b

    def _loss(self, x, idx):
        z = self._logits(x, self.dataset.features[idx])
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(1))
        ce = lse - z[np.arange(len(idx)), self.dataset.labels[idx]]
        return float(ce.mean()) + 0.5 * self.l2 * float(x @ x)

    def _grad(self, x, idx):
        a = self.dataset.features[idx]
        p = _softmax(self._logits(x, a))
        p[np.arange(len(idx)), self.dataset.labels[idx]] -= 1.0
        p /= len(idx)
        return np.concatenate([(p.T @ a).ravel(), p.sum(0)]) + self.l2 * x

    def client_value(self, i, x):
        return self._loss(x, self.shards[i])

    def client_grad(self, i, x):
        self._check(x)
        return self._grad(x, self.shards[i])

    def client_batch_grad(self, i, x, rng, batch_size):
        shard = self.shards[i]
        return self._grad(x, shard[rng.integers(0, shard.size, size=batch_size)])

    def accuracy(self, x, data: LabeledDataset | None = None):
        data = self.test if data is None else data
        if data is None:
            return None
        pred = self._logits(x, data.features).argmax(1)
        return float(np.mean(pred == data.labels))


def make_logistic(dataset, partition, l2=0.0, test=None) -> LogisticProblem:
    return LogisticProblem(dataset, partition, l2, test)


class OracleMode(str, Enum):
    EXACT = "exact"
    GAUSSIAN = "gaussian"
    MINIBATCH = "minibatch"


@dataclass(frozen=True)
class GradientOracle:
    problem: Problem
    mode: OracleMode = OracleMode.EXACT
    sigma: float = 0.0
    batch_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", OracleMode(self.mode))
        if self.sigma < 0:
            raise ConfigError("oracle.sigma: must be nonnegative")
        if self.mode is OracleMode.MINIBATCH:
            if not hasattr(self.problem, "client_batch_grad"):
                raise ConfigError("oracle.mode: minibatch sampling needs a finite-sum problem")
            if not self.batch_size or self.batch_size < 1:
                raise ConfigError("oracle.batch_size: must be a positive integer")

    @property
    def needs_rng(self):
        return self.mode is OracleMode.MINIBATCH or (self.mode is OracleMode.GAUSSIAN and self.sigma > 0)

    def sample(self, i, x, rng=None):
        return sample_gradient(self, i, x, rng)


def sample_gradient(oracle: GradientOracle, i, x, rng=None) -> np.ndarray:
    """Stochastic gradient of client ``i`` at ``x``.

    Gaussian mode adds isotropic noise with coordinate variance sigma^2/d, so
    the expected squared noise norm is sigma^2.
    """
    p = oracle.problem
    if oracle.mode is OracleMode.MINIBATCH:
        p._check(x)
        return p.client_batch_grad(i, x, rng, oracle.batch_size)
    g = p.client_grad(i, x)
    if oracle.mode is OracleMode.GAUSSIAN and oracle.sigma > 0:
        g = g + (oracle.sigma / np.sqrt(p.d)) * rng.standard_normal(p.d)
    return g
