"""Per-batch adaptation loop and the frozen-backbone baselines.

The engine consumes pre-normalized feature vectors from a frozen extractor.
Each batch: (1) the support set absorbs the batch under the base classifier's
probabilities and is entropy-filtered, (2) neighbors are retrieved once in
feature space and frozen, (3) every member takes T sequential self-training
steps, (4) the prediction is the argmax of the member-averaged neighbor
distributions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import adapter as ad
from .errors import EmptyBatch, EmptyNeighborList, EmptySupportSet
from .mathcore import AdamState, adam_step, entropy_rows
from .supportset import (
    LinearHead,
    NeighborList,
    SupportSet,
    filter_by_entropy,
    init_from_classifier,
    nearest_neighbors,
    update,
)

PL_THRESHOLD = 0.9


@dataclass
class TastConfig:
    ne: int = 20            # ensemble size
    ns: int = 1             # neighbors consulted per query
    steps: int = 1          # gradient steps per batch
    m: int = -1             # per-class support cap; -1 keeps everything
    tau: float = 0.1
    lr: float = 1e-3
    seed: int = 0
    d_phi: int | None = None  # adapter output dim; default d_z // 4

    def validate(self) -> "TastConfig":
        if self.ne < 1 or self.ns < 1 or self.steps < 0:
            raise ValueError(f"bad config {self}")
        if self.m != -1 and self.m < 1:
            raise ValueError(f"per-class cap must be >= 1 or -1, got {self.m}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TastEngine:
    """Owns the support set and the adapter ensemble for one test stream."""

    def __init__(self, head: LinearHead, config: TastConfig):
        config.validate()
        self.head = head.copy()
        self.config = config
        self.support: SupportSet = init_from_classifier(self.head)
        self.support.per_class_cap = config.m
        self.adapter = ad.new_ensemble(
            d_z=head.dim,
            d_phi=config.d_phi,
            n_members=config.ne,
            rng=np.random.default_rng(config.seed),
        )
        self.batch_counter = 0
        self.last_batch_losses: list[float] = []


def pseudo_label(adapter, member, neighbors: NeighborList, prototypes, n_classes, tau) -> np.ndarray:
    """Vote histogram of the neighbors' prototype-classifier argmaxes.

    Entries are exact multiples of 1/len(neighbors); votes are one-hot.
    """
    if len(neighbors) == 0:
        raise EmptyNeighborList("pseudo_label needs at least one neighbor")
    votes = []
    for entry, _ in neighbors.entries:
        probs = ad.proto_distribution(
            ad.forward(adapter, member, entry.key), prototypes, n_classes, tau
        )
        votes.append(int(np.argmax(probs)))
    return ad.vote_histogram(np.array(votes), n_classes)


def member_predict(adapter, member, neighbors: NeighborList, prototypes, n_classes, tau) -> np.ndarray:
    """Mean of the neighbors' soft prototype distributions (not the query's own)."""
    if len(neighbors) == 0:
        raise EmptyNeighborList("member_predict needs at least one neighbor")
    acc = np.zeros(n_classes)
    for entry, _ in neighbors.entries:
        acc += ad.proto_distribution(
            ad.forward(adapter, member, entry.key), prototypes, n_classes, tau
        )
    return acc / len(neighbors)


def adapt_batch(engine: TastEngine, batch_features) -> list[tuple[int, np.ndarray]]:
    """Run one full adaptation step on a batch of pre-normalized features and
    return (predicted_class, averaged_distribution) per example."""
    F = np.asarray(batch_features, dtype=float)
    if F.ndim != 2 or F.shape[0] == 0:
        raise EmptyBatch("adapt_batch needs a non-empty (B, d_z) feature matrix")
    cfg = engine.config

    # 1) absorb the batch under the base classifier, then entropy-filter
    base_probs = engine.head.probabilities(F)
    update(engine.support, F, base_probs)
    filter_by_entropy(engine.support, cfg.m)

    # 2) neighbors retrieved once in feature space, frozen across the T steps
    neighbor_lists = [nearest_neighbors(engine.support, F[x], cfg.ns) for x in range(F.shape[0])]

    # 3) sequential member updates
    losses = []
    for _ in range(cfg.steps):
        for i in range(cfg.ne):
            loss, grads = ad.loss_and_gradients(
                engine.adapter, i, F, neighbor_lists, engine.support, cfg.tau
            )
            ad.apply_update(engine.adapter, i, grads, cfg.lr)
            losses.append(loss)
    engine.last_batch_losses = losses

    # 4) member-averaged neighbor distributions, argmax ties to lowest index
    avg = np.zeros((F.shape[0], engine.support.n_classes))
    for i in range(cfg.ne):
        view = ad.member_view(engine.adapter, i, engine.support, cfg.tau)
        for x, nbrs in enumerate(neighbor_lists):
            avg[x] += view.entry_probs[nbrs.indices].mean(axis=0)
    avg /= cfg.ne
    engine.batch_counter += 1
    return [(int(np.argmax(avg[x])), avg[x]) for x in range(F.shape[0])]


def class_centroids(support: SupportSet) -> list[tuple[int, np.ndarray]]:
    """Feature-space per-class key means for the non-empty classes."""
    out = []
    for k in range(support.n_classes):
        cls = support.classes[k]
        if cls:
            out.append((k, np.stack([e.key for e in cls]).mean(axis=0)))
    return out


def t3a_predict(head: LinearHead, support: SupportSet, query) -> int:
    """Nearest feature-space centroid under cosine distance; ties to lowest class."""
    query = np.asarray(query, dtype=float)
    if query.shape != (head.dim,):
        raise ValueError(f"query {query.shape} vs head dim {head.dim}")
    cents = class_centroids(support)
    if not cents:
        raise EmptySupportSet("t3a_predict needs a non-empty support set")
    from .mathcore import cosine_distance

    dists = [cosine_distance(query, mu) for _, mu in cents]
    return int(cents[int(np.argmin(dists))][0])


def tast_n_predict(support: SupportSet, query, ns: int, tau: float) -> tuple[int, np.ndarray]:
    """Neighbor-vote prediction directly in feature space, no trained modules:
    prototypes are key centroids, neighbors' soft distributions are averaged."""
    cents = class_centroids(support)
    if not cents:
        raise EmptySupportSet("tast_n_predict needs a non-empty support set")
    nbrs = nearest_neighbors(support, query, ns)
    acc = np.zeros(support.n_classes)
    for entry, _ in nbrs.entries:
        acc += _centroid_distribution(entry.key, cents, support.n_classes, tau)
    acc /= len(nbrs)
    return int(np.argmax(acc)), acc


def _centroid_distribution(v, cents, n_classes, tau) -> np.ndarray:
    from .mathcore import cosine_distance, softmax_from_distances

    dists = np.array([cosine_distance(v, mu) for _, mu in cents])
    probs = softmax_from_distances(dists, tau)
    full = np.zeros(n_classes)
    for (k, _), p in zip(cents, probs):
        full[k] = p
    return full


@dataclass
class HeadOptState:
    """Persistent Adam accumulators for the last-layer baselines."""

    W: AdamState
    b: AdamState

    @classmethod
    def for_head(cls, head: LinearHead) -> "HeadOptState":
        return cls(W=AdamState.zeros(head.W.shape), b=AdamState.zeros(head.b.shape))


def mean_prediction_entropy(head: LinearHead, F) -> float:
    """Mean Shannon entropy of the head's softmax over the batch."""
    return float(entropy_rows(head.probabilities(F)).mean())


def entropy_gradients(head: LinearHead, F) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of mean_prediction_entropy w.r.t. (W, b)."""
    F = np.asarray(F, dtype=float)
    P = head.probabilities(F)
    logp = np.log(np.maximum(P, 1e-300))
    H = -(P * logp).sum(axis=1, keepdims=True)
    g_logits = -P * (logp + H) / F.shape[0]
    return g_logits.T @ F, g_logits.sum(axis=0)


def tentclf_step(head: LinearHead, batch_features, lr: float, opt: HeadOptState | None = None) -> LinearHead:
    """One Adam step on (W, b) minimizing the batch's mean prediction entropy."""
    F = np.asarray(batch_features, dtype=float)
    if F.shape[0] == 0:
        raise EmptyBatch("tentclf_step needs a non-empty batch")
    if opt is None:
        opt = HeadOptState.for_head(head)
    g_W, g_b = entropy_gradients(head, F)
    return LinearHead(adam_step(head.W, g_W, opt.W, lr), adam_step(head.b, g_b, opt.b, lr))


def confident_pl_loss(head: LinearHead, F, threshold: float = PL_THRESHOLD) -> float | None:
    """Mean CE between one-hot argmax pseudo-labels and the head's softmax,
    over examples whose max probability clears the threshold; None if none do."""
    P = head.probabilities(F)
    mask = P.max(axis=1) >= threshold
    if not mask.any():
        return None
    sel = P[mask]
    picked = sel[np.arange(sel.shape[0]), np.argmax(sel, axis=1)]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def pl_gradients(head: LinearHead, F, threshold: float = PL_THRESHOLD):
    """Exact gradient of confident_pl_loss w.r.t. (W, b); None if no example qualifies."""
    F = np.asarray(F, dtype=float)
    P = head.probabilities(F)
    mask = P.max(axis=1) >= threshold
    if not mask.any():
        return None
    Fsel = F[mask]
    Psel = P[mask]
    onehot = np.zeros_like(Psel)
    onehot[np.arange(Psel.shape[0]), np.argmax(Psel, axis=1)] = 1.0
    g_logits = (Psel - onehot) / Psel.shape[0]
    return g_logits.T @ Fsel, g_logits.sum(axis=0)


def plclf_step(
    head: LinearHead,
    batch_features,
    lr: float,
    threshold: float = PL_THRESHOLD,
    opt: HeadOptState | None = None,
) -> LinearHead:
    """One Adam step on confident pseudo-labels; a full no-op if none qualify."""
    F = np.asarray(batch_features, dtype=float)
    if F.shape[0] == 0:
        raise EmptyBatch("plclf_step needs a non-empty batch")
    grads = pl_gradients(head, F, threshold)
    if grads is None:
        return head
    if opt is None:
        opt = HeadOptState.for_head(head)
    g_W, g_b = grads
    return LinearHead(adam_step(head.W, g_W, opt.W, lr), adam_step(head.b, g_b, opt.b, lr))
