"""Synthetic domain-shift benchmark, source training, online evaluation, grid runner.

Streams are Gaussian class blobs, shifted at test time and row-normalized
(the same preprocessing the feature files carry). Labels ride along for
scoring only; every method sees features first and labels never.
"""

from __future__ import annotations

import dataclasses
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import engine as eng
from . import tastbn as bn
from .errors import EmptyGrid
from .mathcore import normalize_rows, softmax_rows
from .supportset import LinearHead, filter_by_entropy, init_from_classifier, update

METHODS = ("none", "t3a", "tast", "tast_n", "tast_bn", "tentclf", "plclf")


@dataclass(frozen=True)
class MeanShift:
    scale: float = 1.5  # displacement norm in units of the class covariance scale


@dataclass(frozen=True)
class Rotation:
    angles: tuple[float, ...] = (180.0,)  # degrees, applied to dim pairs (0,1),(2,3),...


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float = 1.0


@dataclass
class SyntheticSpec:
    n_classes: int = 5
    dim: int = 16
    n_train: int = 1000
    n_test: int = 2000
    class_means: np.ndarray | None = None  # (K, dim); drawn from seed when None
    class_cov_scale: float = 1.0
    mean_radius: float = 3.0
    shift: MeanShift | Rotation | GaussianNoise | None = field(default_factory=MeanShift)
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_train < 10 * self.n_classes or self.n_test < 10 * self.n_classes:
            raise ValueError("need at least 10 samples per class")
        return self


@dataclass
class DomainData:
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray


def _draw_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(size=(spec.n_classes, spec.dim))
    means = spec.mean_radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    for i in range(spec.n_classes):
        for j in range(i + 1, spec.n_classes):
            if np.allclose(means[i], means[j]):
                raise ValueError(f"class means {i} and {j} coincide")
    return means


def _apply_shift(X: np.ndarray, shift, cov_scale: float, rng: np.random.Generator) -> np.ndarray:
    if shift is None:
        return X
    if isinstance(shift, MeanShift):
        direction = rng.normal(size=X.shape[1])
        direction /= np.linalg.norm(direction)
        return X + shift.scale * cov_scale * direction
    if isinstance(shift, Rotation):
        out = X.copy()
        for j in range(X.shape[1] // 2):
            theta = np.deg2rad(shift.angles[j % len(shift.angles)])
            c, s = np.cos(theta), np.sin(theta)
            a, b = out[:, 2 * j].copy(), out[:, 2 * j + 1].copy()
            out[:, 2 * j] = c * a - s * b
            out[:, 2 * j + 1] = s * a + c * b
        return out
    if isinstance(shift, GaussianNoise):
        return X + rng.normal(scale=shift.sigma, size=X.shape)
    raise TypeError(f"unknown shift {shift!r}")


def generate(spec: SyntheticSpec) -> DomainData:
    """Row-normalized Gaussian blobs; the test stream is the source
    distribution pushed through the configured shift before normalization."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = spec.class_means if spec.class_means is not None else _draw_means(spec, rng)
    means = np.asarray(means, dtype=float)
    if means.shape != (spec.n_classes, spec.dim):
        raise ValueError(f"class_means {means.shape} vs ({spec.n_classes}, {spec.dim})")

    def blob(n):
        y = rng.integers(0, spec.n_classes, size=n)
        X = means[y] + spec.class_cov_scale * rng.normal(size=(n, spec.dim))
        return X, y

    train_X, train_y = blob(spec.n_train)
    test_X, test_y = blob(spec.n_test)
    test_X = _apply_shift(test_X, spec.shift, spec.class_cov_scale, rng)
    return DomainData(
        train_X=normalize_rows(train_X),
        train_y=train_y,
        test_X=normalize_rows(test_X),
        test_y=test_y,
    )


def split_train_val(data: DomainData, val_frac: float = 0.2, seed: int = 0):
    """Held-out split of the source data for hyperparameter selection."""
    n = data.train_X.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_frac * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (data.train_X[train_idx], data.train_y[train_idx],
            data.train_X[val_idx], data.train_y[val_idx])


def train_source_head(train_X, train_y, epochs: int = 300, lr: float = 0.5) -> LinearHead:
    """Multinomial logistic regression by full-batch gradient descent."""
    X = np.asarray(train_X, dtype=float)
    y = np.asarray(train_y, dtype=int)
    classes = np.unique(y)
    K = int(classes.max()) + 1
    if len(classes) < 2:
        raise ValueError("source training needs at least 2 classes present")
    n, d = X.shape
    W = np.zeros((K, d))
    b = np.zeros(K)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        P = softmax_rows(X @ W.T + b)
        G = (P - onehot) / n
        W -= lr * (G.T @ X)
        b -= lr * G.sum(axis=0)
    head = LinearHead(W, b)
    acc = float((np.argmax(head.logits(X), axis=1) == y).mean())
    if acc < 0.9:
        warnings.warn(f"source head converged to train accuracy {acc:.3f} < 0.9")
    return head


def train_source_bn(
    train_X, train_y, hidden: int = 16, d_z: int = 16,
    epochs: int = 400, lr: float = 0.01, seed: int = 0,
) -> tuple[bn.ToyBNExtractor, LinearHead]:
    """Jointly train the toy BN network and its linear head with Adam on
    full-batch cross-entropy, then freeze everything except (gamma, beta)."""
    from .mathcore import AdamState, adam_step

    X = np.asarray(train_X, dtype=float)
    y = np.asarray(train_y, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("source training needs at least 2 classes present")
    K = int(y.max()) + 1
    ext = bn.new_toy_extractor(X.shape[1], hidden, d_z, rng=seed)
    head = LinearHead(np.random.default_rng(seed + 1).normal(scale=0.1, size=(K, d_z)), np.zeros(K))
    params = ["W1", "b1", "gamma", "beta", "W2", "b2"]
    states = {p: AdamState.zeros(getattr(ext, p).shape) for p in params}
    states["head_W"] = AdamState.zeros(head.W.shape)
    states["head_b"] = AdamState.zeros(head.b.shape)
    for _ in range(epochs):
        _, grads = bn.training_loss_and_grads(ext, head, X, y)
        for p in params:
            setattr(ext, p, adam_step(getattr(ext, p), grads[p], states[p], lr))
        head = LinearHead(
            adam_step(head.W, grads["head_W"], states["head_W"], lr),
            adam_step(head.b, grads["head_b"], states["head_b"], lr),
        )
    probs, _, _ = bn.training_forward(ext, head, X)
    acc = float((np.argmax(probs, axis=1) == y).mean())
    if acc < 0.9:
        warnings.warn(f"source BN network converged to train accuracy {acc:.3f} < 0.9")
    ext.adam_gamma = AdamState.zeros(ext.gamma.shape)
    ext.adam_beta = AdamState.zeros(ext.beta.shape)
    return ext, head


@dataclass
class RunRecord:
    method: str
    config: dict
    batch_accuracy: list[float] = field(default_factory=list)
    cumulative_accuracy: list[float] = field(default_factory=list)
    mean_loss: list[float | None] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    n_scored: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.cumulative_accuracy[-1] if self.cumulative_accuracy else float("nan")

    def rows(self) -> list[dict]:
        return [
            {
                "method": self.method,
                "config": self.config,
                "batch_index": i,
                "batch_accuracy": self.batch_accuracy[i],
                "cumulative_accuracy": self.cumulative_accuracy[i],
                "mean_loss": self.mean_loss[i],
                "wall_ms": self.wall_ms[i],
            }
            for i in range(len(self.batch_accuracy))
        ]


def _batch_slices(n: int, batch_size: int, min_last: int) -> list[slice]:
    slices = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(slices) > 1 and (slices[-1].stop - slices[-1].start) < min_last:
        slices = slices[:-1]
    return slices


def run_online(method: str, model, test_X, test_y, batch_size: int, config=None) -> RunRecord:
    """Process the stream once, in order, scoring each batch after prediction.

    ``model`` is a LinearHead for feature methods or an (extractor, head)
    pair for tast_bn. Nothing resets between batches.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; pick one of {METHODS}")
    X = np.asarray(test_X, dtype=float)
    y = np.asarray(test_y, dtype=int)

    if method == "tast_bn":
        extractor, head = model
        cfg = config if config is not None else bn.TastBnConfig()
        engine = bn.TastBnEngine(extractor, head, cfg)
        cfg_dict = cfg.to_dict()
        min_last = 2
    else:
        head = model
        cfg = config if config is not None else eng.TastConfig()
        cfg_dict = cfg.to_dict()
        min_last = 1
        engine = None
        support = None
        opt_state = None
        if method == "tast":
            engine = eng.TastEngine(head, cfg)
        elif method in ("t3a", "tast_n"):
            support = init_from_classifier(head)
        elif method in ("tentclf", "plclf"):
            head = head.copy()
            opt_state = eng.HeadOptState.for_head(head)

    record = RunRecord(method=method, config=dict(cfg_dict, batch_size=batch_size))
    n_correct = 0
    for sl in _batch_slices(X.shape[0], batch_size, min_last):
        F, labels = X[sl], y[sl]
        t0 = time.perf_counter()
        loss = None
        if method == "none":
            if isinstance(model, tuple):
                ext, h = model
                preds = np.argmax(h.probabilities(bn.bn_forward(ext, F)), axis=1)
            else:
                preds = np.argmax(head.probabilities(F), axis=1)
        elif method == "tast":
            preds = np.array([p for p, _ in eng.adapt_batch(engine, F)])
            loss = float(np.mean(engine.last_batch_losses)) if engine.last_batch_losses else None
        elif method == "tast_bn":
            preds = np.array([p for p, _ in bn.adapt_batch_bn(engine, F)])
            loss = float(np.mean(engine.last_batch_losses)) if engine.last_batch_losses else None
        elif method in ("t3a", "tast_n"):
            update(support, F, head.probabilities(F))
            filter_by_entropy(support, cfg.m)
            if method == "t3a":
                preds = np.array([eng.t3a_predict(head, support, F[x]) for x in range(F.shape[0])])
            else:
                preds = np.array(
                    [eng.tast_n_predict(support, F[x], cfg.ns, cfg.tau)[0] for x in range(F.shape[0])]
                )
        elif method == "tentclf":
            preds = np.argmax(head.probabilities(F), axis=1)
            loss = eng.mean_prediction_entropy(head, F)
            head = eng.tentclf_step(head, F, cfg.lr, opt_state)
        elif method == "plclf":
            preds = np.argmax(head.probabilities(F), axis=1)
            loss = eng.confident_pl_loss(head, F)
            head = eng.plclf_step(head, F, cfg.lr, opt=opt_state)
        wall = (time.perf_counter() - t0) * 1000.0

        n_correct += int((preds == labels).sum())
        record.n_scored += len(labels)
        record.batch_accuracy.append(float((preds == labels).mean()))
        record.cumulative_accuracy.append(n_correct / record.n_scored)
        record.mean_loss.append(loss)
        record.wall_ms.append(wall)
    return record


def default_grid(base: eng.TastConfig | None = None) -> list[eng.TastConfig]:
    """The 4 x 2 x 6 search grid over (ns, steps, m), lexicographic order."""
    base = base if base is not None else eng.TastConfig()
    return [
        dataclasses.replace(base, ns=ns, steps=t, m=m)
        for ns, t, m in product((1, 2, 4, 8), (1, 3), (1, 5, 20, 50, 100, -1))
    ]


def _grid_eval(args):
    method, model, X, y, batch_size, cfg = args
    return run_online(method, model, X, y, batch_size, cfg).final_accuracy


def grid_search(method: str, model, val_X, val_y, batch_size: int, grid):
    """Exhaustively evaluate the grid on the validation stream; returns the
    best config (ties to the first in grid order) and all accuracies."""
    grid = list(grid)
    if not grid:
        raise EmptyGrid("grid_search needs at least one configuration")
    tasks = [(method, model, val_X, val_y, batch_size, cfg) for cfg in grid]
    workers = os.environ.get("TAFS_THREADS")
    workers = os.cpu_count() if workers in (None, "", "0") else int(workers)
    if workers > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(grid))) as pool:
            accs = list(pool.map(_grid_eval, tasks))
    else:
        accs = [_grid_eval(t) for t in tasks]
    best = int(np.argmax(accs))  # first max wins: grid-order tie-break
    return grid[best], accs
