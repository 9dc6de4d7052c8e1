"""Batch-norm variant on a fixed two-layer extractor.

The network is Linear -> BN -> ReLU -> Linear with unit-normalized outputs;
only the BN affine parameters (gamma, beta) train at test time. The support
set stores raw inputs because the embedding space drifts; every forward pass
normalizes both the test batch and the support entries with the test batch's
statistics.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import adapter as ad
from .errors import BatchTooSmall, EmptySupportSet, NoPrototypes, ZeroNormVector
from .mathcore import (
    LOG_CLAMP,
    NORM_FLOOR,
    AdamState,
    adam_step,
    as_rng,
    kaiming_normal,
    softmax_rows,
)
from .supportset import (
    RAW,
    LinearHead,
    SupportSet,
    filter_by_entropy,
    init_empty,
    nearest_neighbors,
    update,
)

BN_EPS = 1e-5


@dataclass
class ToyBNExtractor:
    W1: np.ndarray  # (h, d_in), frozen
    b1: np.ndarray  # (h,), frozen
    gamma: np.ndarray  # (h,), trainable at test time
    beta: np.ndarray   # (h,), trainable at test time
    W2: np.ndarray  # (d_z, h), frozen
    b2: np.ndarray  # (d_z,), frozen
    adam_gamma: AdamState = None
    adam_beta: AdamState = None

    def __post_init__(self):
        for name in ("W1", "b1", "gamma", "beta", "W2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.adam_gamma is None:
            self.adam_gamma = AdamState.zeros(self.gamma.shape)
        if self.adam_beta is None:
            self.adam_beta = AdamState.zeros(self.beta.shape)

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_z(self) -> int:
        return self.W2.shape[0]

    def copy(self) -> "ToyBNExtractor":
        return ToyBNExtractor(
            self.W1.copy(), self.b1.copy(), self.gamma.copy(), self.beta.copy(),
            self.W2.copy(), self.b2.copy(),
            dataclasses.replace(self.adam_gamma, m=self.adam_gamma.m.copy(), v=self.adam_gamma.v.copy()),
            dataclasses.replace(self.adam_beta, m=self.adam_beta.m.copy(), v=self.adam_beta.v.copy()),
        )


def new_toy_extractor(d_in: int, hidden: int, d_z: int, rng=0) -> ToyBNExtractor:
    gen = as_rng(rng)
    # small nonzero b2 keeps rows with fully dead ReLUs away from the zero
    # embedding (those rows would otherwise break unit normalization)
    return ToyBNExtractor(
        W1=kaiming_normal(hidden, d_in, gen),
        b1=np.zeros(hidden),
        gamma=np.ones(hidden),
        beta=np.zeros(hidden),
        W2=kaiming_normal(d_z, hidden, gen),
        b2=0.1 * gen.normal(size=d_z),
    )


@dataclass
class _ForwardCache:
    xhat: np.ndarray
    u: np.ndarray
    h: np.ndarray
    z: np.ndarray
    z_norm: np.ndarray
    zhat: np.ndarray


def _batch_stats(extractor: ToyBNExtractor, X_stats: np.ndarray):
    A = X_stats @ extractor.W1.T + extractor.b1
    mu = A.mean(axis=0)
    var = A.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    return mu, inv_std


def _forward_group(extractor: ToyBNExtractor, X, mu, inv_std) -> _ForwardCache:
    A = np.asarray(X, dtype=float) @ extractor.W1.T + extractor.b1
    xhat = (A - mu) * inv_std
    u = extractor.gamma * xhat + extractor.beta
    h = np.maximum(u, 0.0)
    z = h @ extractor.W2.T + extractor.b2
    z_norm = np.linalg.norm(z, axis=1)
    if np.any(z_norm < NORM_FLOOR):
        raise ZeroNormVector("extractor produced a zero embedding")
    return _ForwardCache(xhat=xhat, u=u, h=h, z=z, z_norm=z_norm, zhat=z / z_norm[:, None])


def bn_forward(extractor: ToyBNExtractor, X) -> np.ndarray:
    """Unit-normalized embeddings of X, with BN statistics taken from X itself."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise BatchTooSmall(f"bn_forward needs >= 2 rows, got {X.shape}")
    mu, inv_std = _batch_stats(extractor, X)
    return _forward_group(extractor, X, mu, inv_std).zhat


def embed_with_batch_stats(extractor: ToyBNExtractor, X_batch, X_other):
    """Embed the batch and a second group, both normalized by the batch's stats."""
    X_batch = np.asarray(X_batch, dtype=float)
    if X_batch.shape[0] < 2:
        raise BatchTooSmall(f"need >= 2 stats rows, got {X_batch.shape}")
    mu, inv_std = _batch_stats(extractor, X_batch)
    zb = _forward_group(extractor, X_batch, mu, inv_std).zhat
    zo = _forward_group(extractor, X_other, mu, inv_std).zhat if len(X_other) else np.zeros((0, extractor.d_z))
    return zb, zo


def _affine_backward(extractor: ToyBNExtractor, cache: _ForwardCache, g_zhat):
    """Backward from unit-normalized embeddings to (gamma, beta) for one group."""
    inner = (g_zhat * cache.zhat).sum(axis=1, keepdims=True)
    g_z = (g_zhat - inner * cache.zhat) / cache.z_norm[:, None]
    g_h = g_z @ extractor.W2
    g_u = g_h * (cache.u > 0.0)
    return (g_u * cache.xhat).sum(axis=0), g_u.sum(axis=0)


@dataclass
class TastBnConfig:
    ns: int = 1
    steps: int = 1
    m: int = -1
    tau: float = 0.1
    lr: float = 1e-3
    global_cap: int | None = 150
    fixed_prototypes: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TastBnEngine:
    """Owns the extractor copy, the raw-input support set, and the config."""

    def __init__(self, extractor: ToyBNExtractor, head: LinearHead, config: TastBnConfig):
        self.extractor = extractor.copy()
        self.head = head.copy()
        self.config = config
        self.support: SupportSet = init_empty(
            head.n_classes, mode=RAW, per_class_cap=config.m, global_cap=config.global_cap
        )
        self.batch_counter = 0
        self.last_batch_losses: list[float] = []
        if config.fixed_prototypes:
            norms = np.linalg.norm(head.W, axis=1)
            if np.any(norms < NORM_FLOOR):
                raise ZeroNormVector("classifier row with near-zero norm")
            self.fixed_protos = head.W / norms[:, None]
        else:
            self.fixed_protos = None


def _prototypes_from(zhat_support, support_classes, n_classes, fixed_protos):
    """(present class ids, prototype matrix, per-class counts or None)."""
    if fixed_protos is not None:
        return np.arange(n_classes), fixed_protos, None
    present = np.unique(support_classes)
    if len(present) == 0:
        raise NoPrototypes("no class has support entries")
    pos = {int(k): j for j, k in enumerate(present)}
    entry_pos = np.array([pos[int(k)] for k in support_classes])
    counts = np.bincount(entry_pos, minlength=len(present)).astype(float)
    protos = np.zeros((len(present), zhat_support.shape[1]))
    np.add.at(protos, entry_pos, zhat_support)
    protos /= counts[:, None]
    return present, protos, (entry_pos, counts)


def _entry_distributions(zhat_support, present, protos, n_classes, tau):
    D, C, _, _ = ad._cosine_matrix(zhat_support, protos)
    probs_present = softmax_rows(-D / tau)
    probs = np.zeros((zhat_support.shape[0], n_classes))
    probs[:, present] = probs_present
    votes = present[np.argmax(probs_present, axis=1)]
    return probs, votes


def bn_loss_and_gradients(engine: TastBnEngine, X, neighbor_lists) -> tuple[float, np.ndarray, np.ndarray]:
    """Self-training loss over the batch and exact (gamma, beta) gradients.

    Gradients flow through the test embeddings and (unless prototypes are
    fixed) through the support embeddings inside the prototypes; the
    neighbor-vote pseudo-labels are constants.
    """
    ext = engine.extractor
    X = np.asarray(X, dtype=float)
    mu, inv_std = _batch_stats(ext, X)
    batch_cache = _forward_group(ext, X, mu, inv_std)

    entries = engine.support.entries()
    if not entries:
        raise EmptySupportSet("loss needs support entries")
    keys = np.stack([e.key for e in entries])
    classes = np.array([e.pseudo_class for e in entries])
    support_cache = _forward_group(ext, keys, mu, inv_std)

    present, protos, mean_info = _prototypes_from(
        support_cache.zhat, classes, engine.head.n_classes, engine.fixed_protos
    )
    entry_probs, votes = _entry_distributions(
        support_cache.zhat, present, protos, engine.head.n_classes, engine.config.tau
    )

    n_batch = X.shape[0]
    n_present = len(present)
    T_present = np.zeros((n_batch, n_present))
    for x, nbrs in enumerate(neighbor_lists):
        hist = ad.vote_histogram(votes[nbrs.indices], engine.head.n_classes)
        T_present[x] = hist[present]

    tau = engine.config.tau
    D, C, v_norm, mu_norm = ad._cosine_matrix(batch_cache.zhat, protos)
    P = softmax_rows(-D / tau)
    loss = float(np.mean(-(T_present * np.log(np.maximum(P, LOG_CLAMP))).sum(axis=1)))

    active = P > LOG_CLAMP
    mass = (T_present * active).sum(axis=1, keepdims=True)
    A = (T_present * active - P * mass) / (tau * n_batch)

    V_hat = batch_cache.zhat / v_norm[:, None]
    MU_hat = protos / mu_norm[:, None]
    g_V = -(A @ MU_hat - (A * C).sum(axis=1, keepdims=True) * V_hat) / v_norm[:, None]

    g_gamma, g_beta = _affine_backward(ext, batch_cache, g_V)
    if engine.fixed_protos is None:
        g_MU = -(A.T @ V_hat - (A * C).sum(axis=0)[:, None] * MU_hat) / mu_norm[:, None]
        entry_pos, counts = mean_info
        g_support = g_MU[entry_pos] / counts[entry_pos][:, None]
        gg, gb = _affine_backward(ext, support_cache, g_support)
        g_gamma = g_gamma + gg
        g_beta = g_beta + gb
    return loss, g_gamma, g_beta


def adapt_batch_bn(engine: TastBnEngine, raw_batch) -> list[tuple[int, np.ndarray]]:
    """One full adaptation step on a raw-input batch; returns
    (predicted_class, distribution) per example."""
    X = np.asarray(raw_batch, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise BatchTooSmall(f"adapt_batch_bn needs >= 2 rows, got {X.shape}")
    cfg = engine.config
    ext = engine.extractor
    K = engine.head.n_classes

    # 1) absorb the batch under the current network's probabilities
    Z_b = bn_forward(ext, X)
    base_probs = engine.head.probabilities(Z_b)
    update(engine.support, X, base_probs)
    filter_by_entropy(engine.support, cfg.m)

    # 2) neighbors in the current embedding space, computed once
    keys = engine.support.key_matrix()
    _, Z_s = embed_with_batch_stats(ext, X, keys)
    neighbor_lists = [
        nearest_neighbors(engine.support, Z_b[x], cfg.ns, key_matrix=Z_s)
        for x in range(X.shape[0])
    ]

    # 3) T gradient steps on (gamma, beta)
    losses = []
    for _ in range(cfg.steps):
        loss, g_gamma, g_beta = bn_loss_and_gradients(engine, X, neighbor_lists)
        ext.gamma = adam_step(ext.gamma, g_gamma, ext.adam_gamma, cfg.lr)
        ext.beta = adam_step(ext.beta, g_beta, ext.adam_beta, cfg.lr)
        losses.append(loss)
    engine.last_batch_losses = losses

    # 4) neighbor-averaged distributions with the final parameters
    entries = engine.support.entries()
    if entries:
        keys = np.stack([e.key for e in entries])
        classes = np.array([e.pseudo_class for e in entries])
        Z_b2, Z_s2 = embed_with_batch_stats(ext, X, keys)
        present, protos, _ = _prototypes_from(Z_s2, classes, K, engine.fixed_protos)
        entry_probs, _ = _entry_distributions(Z_s2, present, protos, K, cfg.tau)
        out = []
        for x, nbrs in enumerate(neighbor_lists):
            dist = entry_probs[nbrs.indices].mean(axis=0)
            out.append((int(np.argmax(dist)), dist))
    else:
        # cold-start guard: no support at all, fall back to the base classifier
        probs = engine.head.probabilities(bn_forward(ext, X))
        out = [(int(np.argmax(probs[x])), probs[x]) for x in range(X.shape[0])]
    engine.batch_counter += 1
    return out


def training_forward(extractor: ToyBNExtractor, head: LinearHead, X):
    """Full forward for source training; returns (probabilities, caches)."""
    X = np.asarray(X, dtype=float)
    mu, inv_std = _batch_stats(extractor, X)
    cache = _forward_group(extractor, X, mu, inv_std)
    probs = head.probabilities(cache.zhat)
    return probs, cache, inv_std


def training_loss_and_grads(extractor: ToyBNExtractor, head: LinearHead, X, labels):
    """Cross-entropy loss and exact gradients for every parameter, including
    the full BN backward through the batch statistics (needed for W1, b1)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    probs, cache, inv_std = training_forward(extractor, head, X)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean())

    g_logits = (probs - onehot) / n
    g_Wh = g_logits.T @ cache.zhat
    g_bh = g_logits.sum(axis=0)
    g_zhat = g_logits @ head.W

    inner = (g_zhat * cache.zhat).sum(axis=1, keepdims=True)
    g_z = (g_zhat - inner * cache.zhat) / cache.z_norm[:, None]
    g_W2 = g_z.T @ cache.h
    g_b2 = g_z.sum(axis=0)
    g_h = g_z @ extractor.W2
    g_u = g_h * (cache.u > 0.0)
    g_gamma = (g_u * cache.xhat).sum(axis=0)
    g_beta = g_u.sum(axis=0)

    g_xhat = g_u * extractor.gamma
    sum_g = g_xhat.sum(axis=0)
    sum_gx = (g_xhat * cache.xhat).sum(axis=0)
    g_a = (inv_std / n) * (n * g_xhat - sum_g - cache.xhat * sum_gx)
    g_W1 = g_a.T @ X
    g_b1 = g_a.sum(axis=0)

    return loss, {
        "W1": g_W1, "b1": g_b1, "gamma": g_gamma, "beta": g_beta,
        "W2": g_W2, "b2": g_b2, "head_W": g_Wh, "head_b": g_bh,
    }
