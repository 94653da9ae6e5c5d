"""Small-scale supervised training of deep maxout and ReLU networks.

Networks are trained with softmax cross-entropy using the hand-derived
gradients of :mod:`maxoutlab.network`. Two optimizers are provided, SGD with
Nesterov momentum and Adam, both in the form used by Keras.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import network as nc
from .network import Architecture, InitScheme, ParamSet

SPLITS = ("train", "val", "test")
DIVERGED_LOSS = 1e30


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError("features must be (n, n0) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isin(self.split, SPLITS)):
            raise DatasetError(f"split tags must be one of {SPLITS}")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.features[mask], self.labels[mask]

    def counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.split == s)) for s in SPLITS}


def read_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read rows of real features followed by an integer label; ``#`` lines are skipped."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DatasetError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} cells, got {len(row)}")
            try:
                feats = [float(v) for v in row[:-1]]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric feature cell") from None
            try:
                lab = float(row[-1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric label {row[-1]!r}") from None
            if lab != int(lab) or lab < 0:
                raise DatasetError(f"{path}:{lineno}: label must be a non-negative integer, got {row[-1]!r}")
            rows.append(feats)
            labels.append(int(lab))
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DatasetError(f"{path}: non-finite feature values")
    return X, np.array(labels, dtype=np.int64)


def synthetic_data(spec: dict, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs or interleaved spirals.

    ``{"kind": "blobs", "n_samples": n, "centers": [[...], ...], "scales": [...]}``
    or ``{"kind": "spirals", "n_samples": n, "n_classes": k, "noise": s, "turns": r}``.
    """
    rng = np.random.default_rng(seed)
    kind = spec.get("kind")
    n = int(spec["n_samples"])
    if kind == "blobs":
        centers = np.asarray(spec["centers"], dtype=np.float64)
        k = centers.shape[0]
        scales = np.broadcast_to(np.asarray(spec.get("scales", 1.0), dtype=np.float64), (k,))
        y = np.arange(n) % k
        X = centers[y] + scales[y, None] * rng.standard_normal((n, centers.shape[1]))
    elif kind == "spirals":
        k = int(spec.get("n_classes", 2))
        turns = float(spec.get("turns", 1.0))
        y = np.arange(n) % k
        r = rng.uniform(0.05, 1.0, size=n)
        theta = 2 * math.pi * (turns * r + y / k)
        X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        X += float(spec.get("noise", 0.02)) * rng.standard_normal(X.shape)
    else:
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    return X, y.astype(np.int64)


def _iris() -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_iris

    d = load_iris()
    return d.data.astype(np.float64), d.target.astype(np.int64)


def load_dataset(source: Union[str, dict], split: Sequence[float] = (0.6, 0.2, 0.2),
                 seed: int = 0, class_count: Optional[int] = None,
                 stratify: bool = True) -> Dataset:
    """Load, split and standardize a dataset.

    ``source`` is a CSV path, the string ``"iris"``, or a synthetic spec dict.
    The split is shuffled with ``seed`` (stratified by label when possible)
    and features are standardized with the train split's mean and std.
    """
    if isinstance(source, dict):
        X, y = synthetic_data(source, seed)
    elif source == "iris":
        X, y = _iris()
    else:
        X, y = read_csv_dataset(source)
    k = int(y.max()) + 1 if class_count is None else int(class_count)
    if y.max() >= k:
        raise DatasetError(f"label {int(y.max())} outside declared class count {k}")
    fr = np.asarray(split, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negative numbers summing to 1, got {split}")

    from sklearn.model_selection import train_test_split

    n = len(y)
    idx = np.arange(n)
    n_test = int(round(fr[2] * n))
    n_val = int(round(fr[1] * n))
    strat = y if stratify and np.bincount(y).min() >= 2 else None
    tags = np.full(n, "train", dtype=object)
    rest = idx
    if n_test:
        rest, test = train_test_split(idx, test_size=n_test, random_state=seed, stratify=strat)
        tags[test] = "test"
    if n_val:
        strat_rest = None if strat is None else y[rest]
        _, val = train_test_split(rest, test_size=n_val, random_state=seed + 1, stratify=strat_rest)
        tags[val] = "val"
    tags = tags.astype(str)

    train = X[tags == "train"]
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return Dataset((X - mu) / sd, y, k, tags)


# optimizers -----------------------------------------------------------------

class SGDNesterov:
    """``v <- m v - lr g``; ``w <- w + m v - lr g``."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: Optional[list[np.ndarray]] = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        m = self.momentum
        for p, g, v in zip(params, grads, self.velocity):
            v *= m
            v -= lr * g
            p += m * v - lr * g


class Adam:
    """Adam with bias correction folded into the step size."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Optional[list[np.ndarray]] = None
        self.v: Optional[list[np.ndarray]] = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd_nesterov"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def build(self):
        if self.name == "sgd_nesterov":
            return SGDNesterov(self.momentum)
        if self.name == "adam":
            return Adam(self.beta1, self.beta2, self.eps)
        raise ValueError(f"unknown optimizer {self.name!r}")


@dataclass(frozen=True)
class TrainConfig:
    arch: Architecture
    scheme: InitScheme
    optimizer: OptimizerConfig = OptimizerConfig()
    learning_rate: float = 0.01
    lr_halving_period_epochs: Optional[int] = 100
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    grad_check: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_halving_period_epochs:
            return self.learning_rate
        return self.learning_rate * 0.5 ** (epoch // self.lr_halving_period_epochs)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(),
                "scheme": {"c": self.scheme.c, "bias_mode": self.scheme.bias_mode,
                           "seed": self.scheme.seed},
                "optimizer": {"name": self.optimizer.name, "momentum": self.optimizer.momentum,
                              "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                              "eps": self.optimizer.eps},
                "learning_rate": self.learning_rate,
                "lr_halving_period_epochs": self.lr_halving_period_epochs,
                "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed}


@dataclass
class TrainResult:
    train_loss: list[float]
    train_accuracy: list[float]
    val_accuracy: Optional[float]
    test_accuracy: Optional[float]
    diverged: bool
    wall_time: float
    config: dict
    params: ParamSet = field(repr=False)
    grad_check_max_rel_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "train_accuracy": self.train_accuracy,
                "val_accuracy": self.val_accuracy, "test_accuracy": self.test_accuracy,
                "diverged": self.diverged, "wall_time": self.wall_time, "config": self.config,
                "grad_check_max_rel_error": self.grad_check_max_rel_error}


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def loss_and_grads(params: ParamSet, X: np.ndarray, y: np.ndarray) -> tuple[float, ParamSet]:
    trace = nc.forward(params, X)
    loss, g = softmax_cross_entropy(trace.output, y)
    return loss, nc.backward(params, trace, g)


def evaluate(params: ParamSet, data: Dataset, split: str = "test") -> tuple[float, float]:
    """Accuracy and mean cross-entropy on one split."""
    X, y = data.subset(split)
    if y.size == 0:
        raise DatasetError(f"split {split!r} is empty")
    with np.errstate(all="ignore"):
        logits = nc.forward(params, X).output
        if not np.all(np.isfinite(logits)):
            return float(np.mean(np.zeros_like(y) == y)), DIVERGED_LOSS
        loss, _ = softmax_cross_entropy(logits, y)
    return float(np.mean(np.argmax(logits, axis=1) == y)), loss


def _grad_check(params: ParamSet, grads: ParamSet, X, y, rng, n_checks: int = 3,
                h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients on random weights."""
    worst = 0.0
    arrays, garrays = params.arrays(), grads.arrays()
    weight_slots = list(range(0, len(arrays), 2))
    for _ in range(n_checks):
        s = weight_slots[rng.integers(len(weight_slots))]
        j = rng.integers(arrays[s].size)
        flat = arrays[s].reshape(-1)
        old = flat[j]
        flat[j] = old + h
        lp = softmax_cross_entropy(nc.forward(params, X).output, y)[0]
        flat[j] = old - h
        lm = softmax_cross_entropy(nc.forward(params, X).output, y)[0]
        flat[j] = old
        fd = (lp - lm) / (2 * h)
        an = garrays[s].reshape(-1)[j]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def train(config: TrainConfig, data: Dataset) -> TrainResult:
    """Mini-batch training; a non-finite loss marks the run diverged and stops updates."""
    arch = config.arch
    if arch.nL != data.class_count:
        raise ValueError(f"output width {arch.nL} != class count {data.class_count}")
    if arch.n0 != data.n_features:
        raise ValueError(f"input width {arch.n0} != feature count {data.n_features}")
    start = time.perf_counter()
    params = nc.init_params(arch, config.scheme)
    opt = config.optimizer.build()
    X, y = data.subset("train")
    n = y.size
    losses, accs = [], []
    diverged = False
    worst_check = 0.0 if config.grad_check else None
    for epoch in range(config.epochs):
        if diverged:
            losses.append(DIVERGED_LOSS)
            accs.append(accs[-1] if accs else 0.0)
            continue
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(epoch,)))
        order = rng.permutation(n)
        lr = config.lr_at(epoch)
        with np.errstate(all="ignore"):
            for lo in range(0, n, config.batch_size):
                b = order[lo:lo + config.batch_size]
                loss, grads = loss_and_grads(params, X[b], y[b])
                if not math.isfinite(loss):
                    diverged = True
                    break
                opt.step(params.arrays(), grads.arrays(), lr)
        acc, loss = evaluate(params, data, "train")
        if diverged or not math.isfinite(loss) or loss >= DIVERGED_LOSS:
            diverged = True
            loss = DIVERGED_LOSS
        elif config.grad_check:
            _, grads = loss_and_grads(params, X, y)
            worst_check = max(worst_check, _grad_check(params, grads, X, y, rng))
        losses.append(loss)
        accs.append(acc)
    val = evaluate(params, data, "val")[0] if np.any(data.split == "val") else None
    test = evaluate(params, data, "test")[0] if np.any(data.split == "test") else None
    return TrainResult(losses, accs, val, test, diverged, time.perf_counter() - start,
                       config.to_dict(), params, worst_check)


@dataclass(frozen=True)
class SchemeSpec:
    """One initialization to compare. ``activation`` overrides the architecture's."""

    name: str
    c: float
    activation: str = "maxout"
    learning_rate: Optional[float] = None


def run_seed(seed: int, run: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(run,)).generate_state(1)[0])


def compare_inits(data: Dataset, arch: Architecture, schemes: Sequence[SchemeSpec],
                  optimizer: OptimizerConfig = OptimizerConfig(), n_runs: int = 4,
                  seed: int = 0, learning_rate: float = 0.01,
                  lr_halving_period_epochs: Optional[int] = 100, epochs: int = 500,
                  batch_size: int = 32) -> list[dict]:
    """Train every scheme ``n_runs`` times and tabulate mean and std test accuracy.

    Run ``r`` of every scheme shares the same derived seed, so schemes differ
    only in their initialization. The std is the population std over runs.
    """
    if len(schemes) < 2:
        raise ValueError("need at least two schemes to compare")
    table = []
    for spec in schemes:
        a = replace(arch, activation=spec.activation)
        accs = []
        for r in range(n_runs):
            s = run_seed(seed, r)
            cfg = TrainConfig(a, InitScheme(spec.c, seed=s), optimizer,
                              spec.learning_rate if spec.learning_rate is not None else learning_rate,
                              lr_halving_period_epochs, epochs, batch_size, s)
            accs.append(train(cfg, data).test_accuracy)
        accs = np.array(accs, dtype=np.float64)
        table.append({"scheme": spec.name, "c": spec.c, "mean_acc": float(accs.mean()),
                      "std_acc": float(accs.std()), "n_runs": n_runs,
                      "accuracies": accs.tolist()})
    return table
