"""Pseudo-labeled support set: seeding, per-batch updates, entropy filtering, cosine kNN.

The set holds one list per class. In "feature" mode keys are unit-norm
embeddings; in "raw" mode keys are raw inputs and retrieval compares against
caller-supplied embeddings of those inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySupportSet,
    ZeroNormVector,
)
from .mathcore import (
    NORM_FLOOR,
    entropy_rows,
    shannon_entropy,
    softmax_rows,
)

FEATURE = "feature"
RAW = "raw"

UNIT_NORM_TOL = 1e-6


@dataclass
class LinearHead:
    """Last-layer linear classifier: logits = W f + b, one row per class."""

    W: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.W.shape[0] < 2:
            raise ValueError(f"head needs a (K>=2, d) weight, got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch(
                f"head bias {self.b.shape} does not match weight {self.W.shape}"
            )

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def logits(self, F) -> np.ndarray:
        return np.asarray(F, dtype=float) @ self.W.T + self.b

    def probabilities(self, F) -> np.ndarray:
        return softmax_rows(self.logits(F))

    def copy(self) -> "LinearHead":
        return LinearHead(self.W.copy(), self.b.copy())


@dataclass
class SupportEntry:
    key: np.ndarray
    pseudo_class: int
    entropy: float
    seq: int


@dataclass
class SupportSet:
    n_classes: int
    mode: str = FEATURE
    per_class_cap: int = -1  # -1 = unlimited; the default m for filter passes
    global_cap: int | None = None
    classes: list[list[SupportEntry]] = field(default_factory=list)
    next_seq: int = 0

    def __post_init__(self):
        if self.mode not in (FEATURE, RAW):
            raise ValueError(f"unknown support mode {self.mode!r}")
        if not self.classes:
            self.classes = [[] for _ in range(self.n_classes)]

    def __len__(self) -> int:
        return sum(len(c) for c in self.classes)

    def entries(self) -> list[SupportEntry]:
        """All entries in canonical order: class ascending, insertion order within."""
        out = []
        for cls in self.classes:
            out.extend(cls)
        return out

    def key_matrix(self) -> np.ndarray:
        """Keys stacked row-wise in entries() order."""
        ents = self.entries()
        if not ents:
            raise EmptySupportSet("support set is empty")
        return np.stack([e.key for e in ents])

    def class_counts(self) -> np.ndarray:
        return np.array([len(c) for c in self.classes], dtype=int)


def init_from_classifier(head: LinearHead) -> SupportSet:
    """Seed one entry per class from the normalized classifier weight rows.

    Entry k gets key w_k/||w_k||, pseudo-class k, and the entropy of the
    classifier's own softmax at that key; these seed entries are ordinary
    entries afterwards (filterable, evictable).
    """
    norms = np.linalg.norm(head.W, axis=1)
    if np.any(norms < NORM_FLOOR):
        bad = int(np.argmax(norms < NORM_FLOOR))
        raise ZeroNormVector(f"classifier row {bad} has near-zero norm")
    keys = head.W / norms[:, None]
    sset = SupportSet(n_classes=head.n_classes, mode=FEATURE)
    for k in range(head.n_classes):
        probs = head.probabilities(keys[k])
        sset.classes[k].append(
            SupportEntry(key=keys[k].copy(), pseudo_class=k,
                         entropy=shannon_entropy(probs), seq=k)
        )
    sset.next_seq = head.n_classes
    return sset


def init_empty(
    n_classes: int,
    mode: str = RAW,
    per_class_cap: int = -1,
    global_cap: int | None = None,
) -> SupportSet:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    return SupportSet(n_classes=n_classes, mode=mode,
                      per_class_cap=per_class_cap, global_cap=global_cap)


def update(sset: SupportSet, keys, base_probs) -> SupportSet:
    """Append each item to the argmax class of its base-classifier probabilities.

    Entropy is cached at insertion and reused by every later filter pass.
    Argmax ties go to the lowest class index. If a global cap is configured
    and exceeded, the highest-entropy entries (ties: oldest seq) are evicted
    until the set fits.
    """
    keys = np.asarray(keys, dtype=float)
    base_probs = np.asarray(base_probs, dtype=float)
    if keys.ndim != 2 or base_probs.ndim != 2:
        raise DimensionMismatch("update expects (n, d) keys and (n, K) probabilities")
    if base_probs.shape != (keys.shape[0], sset.n_classes):
        raise DimensionMismatch(
            f"probabilities {base_probs.shape} do not match "
            f"{keys.shape[0]} items x {sset.n_classes} classes"
        )
    if len(sset) and keys.shape[1] != sset.entries()[0].key.shape[0]:
        raise DimensionMismatch(
            f"key dim {keys.shape[1]} does not match stored dim "
            f"{sset.entries()[0].key.shape[0]}"
        )
    if sset.mode == FEATURE:
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0) > UNIT_NORM_TOL))
            raise ValueError(f"feature keys must be unit-norm (row {bad}: {norms[bad]:.6f})")

    ents = entropy_rows(base_probs)
    labels = np.argmax(base_probs, axis=1)
    for j in range(keys.shape[0]):
        sset.classes[int(labels[j])].append(
            SupportEntry(key=keys[j].copy(), pseudo_class=int(labels[j]),
                         entropy=float(ents[j]), seq=sset.next_seq)
        )
        sset.next_seq += 1

    if sset.global_cap is not None and len(sset) > sset.global_cap:
        _evict_to_global_cap(sset)
    return sset


def _evict_to_global_cap(sset: SupportSet) -> None:
    all_entries = sset.entries()
    n_drop = len(all_entries) - sset.global_cap
    order = sorted(all_entries, key=lambda e: (-e.entropy, e.seq))
    dropped = {id(e) for e in order[:n_drop]}
    for k in range(sset.n_classes):
        sset.classes[k] = [e for e in sset.classes[k] if id(e) not in dropped]


def filter_by_entropy(sset: SupportSet, m: int | None = None) -> SupportSet:
    """Keep the m lowest-entropy entries per class (ties: smaller seq); m = -1
    keeps all. Defaults to the set's configured per-class cap."""
    if m is None:
        m = sset.per_class_cap
    if m == -1:
        return sset
    if m < 1:
        raise ValueError(f"per-class cap must be >= 1 or -1, got {m}")
    for k in range(sset.n_classes):
        cls = sset.classes[k]
        if len(cls) <= m:
            continue
        keep = sorted(range(len(cls)), key=lambda j: (cls[j].entropy, cls[j].seq))[:m]
        sset.classes[k] = [cls[j] for j in sorted(keep)]
    return sset


@dataclass
class NeighborList:
    """Neighbors sorted by ascending distance, ties broken by smaller seq.

    ``indices`` are positions into SupportSet.entries() order at retrieval
    time, used to look entries up in stacked per-entry matrices.
    """

    entries: list[tuple[SupportEntry, float]]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, d in self.entries])

    @property
    def beta(self) -> float:
        return self.entries[-1][1]


def _query_keys(sset: SupportSet, key_matrix) -> tuple[list[SupportEntry], np.ndarray]:
    ents = sset.entries()
    if not ents:
        raise EmptySupportSet("cannot retrieve neighbors from an empty support set")
    if key_matrix is None:
        if sset.mode == RAW:
            raise ValueError("raw-input mode needs caller-supplied embeddings")
        keys = sset.key_matrix()
    else:
        keys = np.asarray(key_matrix, dtype=float)
        if keys.shape[0] != len(ents):
            raise DimensionMismatch(
                f"embedding matrix has {keys.shape[0]} rows for {len(ents)} entries"
            )
    return ents, keys


def nearest_neighbors(sset: SupportSet, query, n_neighbors: int, key_matrix=None) -> NeighborList:
    """The n_neighbors entries closest to query under cosine distance (pooled
    across classes), sorted ascending with ties broken by smaller seq.

    Returns all entries when the set is smaller. In raw mode pass the
    embeddings of the stored inputs as ``key_matrix``.
    """
    if n_neighbors < 1:
        raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors}")
    ents, keys = _query_keys(sset, key_matrix)
    query = np.asarray(query, dtype=float)
    qn = float(np.linalg.norm(query))
    if qn < NORM_FLOOR:
        raise ZeroNormVector("query has near-zero norm")
    knorms = np.linalg.norm(keys, axis=1)
    if np.any(knorms < NORM_FLOOR):
        raise ZeroNormVector("a support key has near-zero norm")
    # row-wise reduction, not gemv: BLAS may round identical rows differently
    # depending on their position, which would break exact tie ordering
    dists = 1.0 - (keys * query).sum(axis=1) / (knorms * qn)
    seqs = np.array([e.seq for e in ents])
    order = np.lexsort((seqs, dists))[: min(n_neighbors, len(ents))]
    return NeighborList(
        entries=[(ents[j], float(dists[j])) for j in order],
        indices=np.asarray(order, dtype=int),
    )


def brute_force_neighbors(sset: SupportSet, query, n_neighbors: int, key_matrix=None) -> NeighborList:
    """Test oracle: per-entry scalar scan with the same tie rule."""
    from .mathcore import cosine_distance

    if n_neighbors < 1:
        raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors}")
    ents, keys = _query_keys(sset, key_matrix)
    scored = []
    for j, e in enumerate(ents):
        scored.append((cosine_distance(keys[j], query), e.seq, j, e))
    scored.sort(key=lambda t: (t[0], t[1]))
    top = scored[: min(n_neighbors, len(scored))]
    return NeighborList(
        entries=[(e, float(d)) for d, _, _, e in top],
        indices=np.array([j for _, _, j, _ in top], dtype=int),
    )
