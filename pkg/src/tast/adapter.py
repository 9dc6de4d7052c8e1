"""Ensemble of rank-one-factored linear adaptation modules.

Member i computes v = (W_shared * r_i s_i^T) z, evaluated in factored form as
r_i * (W_shared (s_i * z)). The self-training loss per member is the mean
cross-entropy between the (stop-gradient) neighbor-vote pseudo-label of each
test point and its prototype-softmax distribution; gradients are exact and
flow through both the test embedding and the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBatch,
    IndexOutOfRange,
    NoPrototypes,
    ZeroNormVector,
)
from .mathcore import (
    LOG_CLAMP,
    NORM_FLOOR,
    AdamState,
    adam_step,
    as_rng,
    cosine_distance,
    kaiming_normal,
    softmax_from_distances,
    softmax_rows,
)
from .supportset import SupportSet


@dataclass
class EnsembleAdapter:
    W_shared: np.ndarray  # (d_phi, d_z)
    fast_r: np.ndarray    # (N_e, d_phi), entries in {-1, +1} at init
    fast_s: np.ndarray    # (N_e, d_z)
    adam_W: AdamState
    adam_r: list[AdamState]
    adam_s: list[AdamState]

    @property
    def n_members(self) -> int:
        return self.fast_r.shape[0]

    @property
    def d_phi(self) -> int:
        return self.W_shared.shape[0]

    @property
    def d_z(self) -> int:
        return self.W_shared.shape[1]


@dataclass
class AdapterGradients:
    g_W: np.ndarray  # (d_phi, d_z)
    g_r: np.ndarray  # (d_phi,)
    g_s: np.ndarray  # (d_z,)


def default_d_phi(d_z: int) -> int:
    return max(1, d_z // 4)


def new_ensemble(d_z: int, d_phi: int | None = None, n_members: int = 20, rng=0) -> EnsembleAdapter:
    """Kaiming-initialized shared weight; fast factors drawn uniformly from {-1, +1}.

    Draw order (W, then all r, then all s) is part of the determinism contract.
    """
    if d_phi is None:
        d_phi = default_d_phi(d_z)
    if d_phi < 1 or d_z < 1 or n_members < 1:
        raise ValueError(f"bad ensemble shape d_z={d_z}, d_phi={d_phi}, n={n_members}")
    gen = as_rng(rng)
    W = kaiming_normal(d_phi, d_z, gen)
    r = gen.integers(0, 2, size=(n_members, d_phi)).astype(float) * 2.0 - 1.0
    s = gen.integers(0, 2, size=(n_members, d_z)).astype(float) * 2.0 - 1.0
    return EnsembleAdapter(
        W_shared=W,
        fast_r=r,
        fast_s=s,
        adam_W=AdamState.zeros((d_phi, d_z)),
        adam_r=[AdamState.zeros(d_phi) for _ in range(n_members)],
        adam_s=[AdamState.zeros(d_z) for _ in range(n_members)],
    )


def _check_member(adapter: EnsembleAdapter, member: int) -> None:
    if not 0 <= member < adapter.n_members:
        raise IndexOutOfRange(f"member {member} outside [0, {adapter.n_members})")


def forward(adapter: EnsembleAdapter, member: int, z) -> np.ndarray:
    """Member embedding r_i * (W_shared (s_i * z))."""
    _check_member(adapter, member)
    z = np.asarray(z, dtype=float)
    if z.shape != (adapter.d_z,):
        raise DimensionMismatch(f"input {z.shape} vs d_z={adapter.d_z}")
    return adapter.fast_r[member] * (adapter.W_shared @ (adapter.fast_s[member] * z))


def forward_batch(adapter: EnsembleAdapter, member: int, Z) -> np.ndarray:
    """forward() over the rows of Z."""
    _check_member(adapter, member)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != adapter.d_z:
        raise DimensionMismatch(f"batch {Z.shape} vs d_z={adapter.d_z}")
    return ((Z * adapter.fast_s[member]) @ adapter.W_shared.T) * adapter.fast_r[member]


def materialized_weight(adapter: EnsembleAdapter, member: int) -> np.ndarray:
    """Explicit member weight W * r s^T; kept for oracle tests."""
    _check_member(adapter, member)
    return adapter.W_shared * np.outer(adapter.fast_r[member], adapter.fast_s[member])


def compute_prototypes(adapter: EnsembleAdapter, member: int, sset: SupportSet):
    """Per-class means of member embeddings of the support keys.

    Returns [(class_id, prototype_vector)] for non-empty classes only.
    """
    out = []
    for k in range(sset.n_classes):
        cls = sset.classes[k]
        if not cls:
            continue
        H = forward_batch(adapter, member, np.stack([e.key for e in cls]))
        out.append((k, H.mean(axis=0)))
    return out


def proto_distribution(v, prototypes, n_classes: int, tau: float) -> np.ndarray:
    """Softmax over cosine distances to the listed prototypes, scattered to a
    length-n_classes vector with zeros at the omitted classes."""
    if not prototypes:
        raise NoPrototypes("no class has support entries")
    v = np.asarray(v, dtype=float)
    dists = np.array([cosine_distance(v, mu) for _, mu in prototypes])
    probs = softmax_from_distances(dists, tau)
    full = np.zeros(n_classes)
    for (k, _), p in zip(prototypes, probs):
        full[k] = p
    return full


@dataclass
class MemberView:
    """Member-space quantities shared by the loss and the prediction paths."""

    present: np.ndarray       # (P,) class ids with support
    counts: np.ndarray        # (P,) entries per present class
    prototypes: np.ndarray    # (P, d_phi)
    embeddings: np.ndarray    # (|S|, d_phi) member embeddings, entries() order
    entry_class_pos: np.ndarray  # (|S|,) index into present for each entry
    entry_probs: np.ndarray   # (|S|, n_classes) per-entry prototype softmax
    entry_votes: np.ndarray   # (|S|,) argmax class id per entry


def _cosine_matrix(A: np.ndarray, B: np.ndarray):
    """Pairwise 1 - cos between rows of A and rows of B, plus the pieces the
    backward pass reuses."""
    a_norm = np.linalg.norm(A, axis=1)
    b_norm = np.linalg.norm(B, axis=1)
    if np.any(a_norm < NORM_FLOOR) or np.any(b_norm < NORM_FLOOR):
        raise ZeroNormVector("zero-norm row in cosine matrix")
    cos = (A @ B.T) / np.outer(a_norm, b_norm)
    return 1.0 - cos, cos, a_norm, b_norm


def member_view(adapter: EnsembleAdapter, member: int, sset: SupportSet, tau: float) -> MemberView:
    entries = sset.entries()
    if not entries:
        raise NoPrototypes("no class has support entries")
    keys = np.stack([e.key for e in entries])
    classes = np.array([e.pseudo_class for e in entries])
    present = np.unique(classes)
    pos_of_class = {int(k): j for j, k in enumerate(present)}
    entry_pos = np.array([pos_of_class[int(k)] for k in classes])

    H = forward_batch(adapter, member, keys)
    counts = np.bincount(entry_pos, minlength=len(present)).astype(float)
    protos = np.zeros((len(present), adapter.d_phi))
    np.add.at(protos, entry_pos, H)
    protos /= counts[:, None]

    dists, _, _, _ = _cosine_matrix(H, protos)
    probs_present = softmax_rows(-dists / tau)
    probs = np.zeros((len(entries), sset.n_classes))
    probs[:, present] = probs_present
    votes = present[np.argmax(probs_present, axis=1)]
    return MemberView(
        present=present,
        counts=counts,
        prototypes=protos,
        embeddings=H,
        entry_class_pos=entry_pos,
        entry_probs=probs,
        entry_votes=votes,
    )


def vote_histogram(votes_of_neighbors: np.ndarray, n_classes: int) -> np.ndarray:
    """Normalized vote counts; entries are exact multiples of 1/len."""
    counts = np.bincount(votes_of_neighbors, minlength=n_classes).astype(float)
    return counts / len(votes_of_neighbors)


def loss_and_gradients(
    adapter: EnsembleAdapter,
    member: int,
    batch_features,
    neighbor_lists,
    sset: SupportSet,
    tau: float,
) -> tuple[float, AdapterGradients]:
    """Mean cross-entropy between neighbor-vote pseudo-labels (constants) and
    the member's prototype softmax of each test point, with exact gradients
    for (W_shared, r_i, s_i) through both the test embeddings and the
    prototypes.
    """
    F = np.asarray(batch_features, dtype=float)
    if F.ndim != 2 or F.shape[0] == 0:
        raise EmptyBatch("batch_features must be a non-empty (B, d_z) array")
    if len(neighbor_lists) != F.shape[0]:
        raise DimensionMismatch(
            f"{len(neighbor_lists)} neighbor lists for batch of {F.shape[0]}"
        )
    view = member_view(adapter, member, sset, tau)
    entries = sset.entries()
    keys = np.stack([e.key for e in entries])
    n_batch = F.shape[0]
    present = view.present
    n_present = len(present)

    # stop-gradient pseudo-labels, restricted to the present classes
    T_present = np.zeros((n_batch, n_present))
    for x, nbrs in enumerate(neighbor_lists):
        if len(nbrs) == 0:
            raise EmptyBatch(f"empty neighbor list for batch item {x}")
        hist = vote_histogram(view.entry_votes[nbrs.indices], sset.n_classes)
        T_present[x] = hist[present]

    V = forward_batch(adapter, member, F)
    D, C, v_norm, mu_norm = _cosine_matrix(V, view.prototypes)
    P = softmax_rows(-D / tau)

    loss = float(np.mean(-(T_present * np.log(np.maximum(P, LOG_CLAMP))).sum(axis=1)))

    # dL/dD; the mask handles entries flattened by the log clamp
    active = P > LOG_CLAMP
    mass = (T_present * active).sum(axis=1, keepdims=True)
    A = (T_present * active - P * mass) / (tau * n_batch)

    V_hat = V / v_norm[:, None]
    MU_hat = view.prototypes / mu_norm[:, None]

    # d(1 - cos)/dv = -(mu_hat - cos * v_hat) / |v|
    g_V = -(A @ MU_hat - (A * C).sum(axis=1, keepdims=True) * V_hat) / v_norm[:, None]
    g_MU = -(A.T @ V_hat - (A * C).sum(axis=0)[:, None] * MU_hat) / mu_norm[:, None]

    # prototypes are class means, so each support row inherits g_MU / count
    g_H = g_MU[view.entry_class_pos] / view.counts[view.entry_class_pos][:, None]

    Z_all = np.vstack([F, keys])
    G_all = np.vstack([g_V, g_H])
    r = adapter.fast_r[member]
    s = adapter.fast_s[member]
    A_in = Z_all * s
    B_mid = A_in @ adapter.W_shared.T
    g_B = G_all * r
    g_W = g_B.T @ A_in
    g_A = g_B @ adapter.W_shared
    g_s = (g_A * Z_all).sum(axis=0)
    g_r = (G_all * B_mid).sum(axis=0)
    return loss, AdapterGradients(g_W=g_W, g_r=g_r, g_s=g_s)


def apply_update(adapter: EnsembleAdapter, member: int, grads: AdapterGradients, lr: float) -> EnsembleAdapter:
    """Adam-step the shared weight (shared state, one step per member per
    gradient step) and the member's fast factors (per-member states)."""
    _check_member(adapter, member)
    adapter.W_shared = adam_step(adapter.W_shared, grads.g_W, adapter.adam_W, lr)
    adapter.fast_r[member] = adam_step(
        adapter.fast_r[member], grads.g_r, adapter.adam_r[member], lr
    )
    adapter.fast_s[member] = adam_step(
        adapter.fast_s[member], grads.g_s, adapter.adam_s[member], lr
    )
    return adapter
