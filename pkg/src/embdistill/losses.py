"""Metric-learning and distillation criteria with hand-derived gradients.

Every loss takes a batch of student embeddings (n x d) and returns a
:class:`LossOutput` whose ``value`` is the mean over the batch and whose
``grads`` map each trainable input (``"emb"``, ``"proxies"``,
``"projection"``) to its gradient. Distances are the dimension-normalized
squared Euclidean distance of :func:`embdistill.tensor.squared_dist`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .tensor import as_matrix, pairwise_sq_dist, pairwise_sq_dist_grad

LOG_CLAMP = 1e-12
REPLICATOR_EPS = 1e-12
DB_EPS = 1e-8


@dataclass
class LossOutput:
    value: float
    grads: dict[str, np.ndarray]
    per_sample: np.ndarray
    counters: dict[str, int] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass
class ProxyBank:
    """One trainable proxy vector per training class."""

    proxies: np.ndarray
    class_ids: list[int]

    def __post_init__(self):
        self.proxies = np.asarray(self.proxies, dtype=np.float64)
        self.class_ids = [int(c) for c in self.class_ids]
        if self.proxies.shape[0] != len(self.class_ids):
            raise DimensionError("one proxy per class required")
        self._index = {c: i for i, c in enumerate(self.class_ids)}
        if len(self._index) != len(self.class_ids):
            raise ConfigError("duplicate class id in proxy bank")

    @classmethod
    def create(cls, class_ids: Sequence[int], dim: int, seed: int = 0, std: float = 0.01) -> "ProxyBank":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(len(class_ids), dim)), list(class_ids))

    def index_of(self, labels) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError(f"no proxy for class {exc.args[0]}") from None


@dataclass
class CentroidBank:
    """Frozen per-class teacher centroids and a trainable teacher->student map."""

    centroids: np.ndarray
    class_ids: list[int]
    projection: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.centroids.setflags(write=False)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.class_ids = [int(c) for c in self.class_ids]
        if self.centroids.shape[0] != len(self.class_ids):
            raise DimensionError("one centroid per class required")
        if self.projection.shape[1] != self.centroids.shape[1]:
            raise DimensionError("projection input size must equal the teacher dimension")
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @classmethod
    def from_teacher(cls, teacher_vectors, labels, student_dim: int, seed: int = 0) -> "CentroidBank":
        """Centroids are the class means of the teacher embeddings over the
        whole training set; noise items (label < 0) are ignored."""
        T = np.asarray(teacher_vectors, dtype=np.float64)
        labels = np.asarray(labels)
        classes = sorted(int(c) for c in np.unique(labels) if c >= 0)
        cents = np.stack([T[labels == c].mean(axis=0) for c in classes])
        bound = 1.0 / np.sqrt(T.shape[1])
        proj = np.random.default_rng(seed).uniform(-bound, bound, size=(student_dim, T.shape[1]))
        return cls(cents, classes, proj)

    def index_of(self, labels) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError(f"no centroid for class {exc.args[0]}") from None


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _softmax(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=1, keepdims=True)


# --- triplet --------------------------------------------------------------------


def mine_triplets(dist, labels):
    """Hardest positive (farthest same-class, self excluded) and hardest
    negative (closest other-class) per anchor; ties go to the lowest index.

    Returns ``(pos, neg, valid)``; invalid anchors have index -1.
    """
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(labels)
    n = dist.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=bool)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    other = labels[:, None] != labels[None, :]
    valid = same.any(axis=1) & other.any(axis=1)
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(other, dist, np.inf), axis=1)
    pos = np.where(valid, pos, -1)
    neg = np.where(valid, neg, -1)
    return pos, neg, valid


def triplet_loss(emb, labels, margin: float = 1.0) -> LossOutput:
    E = as_matrix(emb, "emb")
    labels = np.asarray(labels)
    n = E.shape[0]
    D = pairwise_sq_dist(E, E)
    pos, neg, valid = mine_triplets(D, labels)
    per = np.full(n, np.nan)
    anchors = np.flatnonzero(valid)
    skipped = n - anchors.size
    if skipped:
        warnings.warn(f"triplet loss: {skipped} anchor(s) without a positive or negative skipped",
                      RuntimeWarning, stacklevel=2)
    if anchors.size == 0:
        return LossOutput(0.0, {"emb": np.zeros_like(E)}, per, {"skipped_anchors": skipped})
    p, q = pos[anchors], neg[anchors]
    raw = D[anchors, p] - D[anchors, q] + margin
    per[anchors] = np.maximum(raw, 0.0)
    active = (raw > 0).astype(np.float64) / anchors.size
    G = np.zeros((n, n))
    np.add.at(G, (anchors, p), active)
    np.add.at(G, (anchors, q), -active)
    gA, gB = pairwise_sq_dist_grad(G, E, E)
    return LossOutput(float(per[anchors].mean()), {"emb": gA + gB}, per, {"skipped_anchors": skipped})


# --- proxy losses ---------------------------------------------------------------


def proxynca_loss(emb, labels, bank: ProxyBank) -> LossOutput:
    """ProxyNCA whose denominator runs over the *other* classes' proxies only,
    so the per-sample value can be negative."""
    E = as_matrix(emb, "emb")
    P = bank.proxies
    if P.shape[1] != E.shape[1]:
        raise DimensionError(f"proxies have d={P.shape[1]}, embeddings d={E.shape[1]}")
    if P.shape[0] < 2:
        raise ConfigError("ProxyNCA needs at least two classes")
    y = bank.index_of(labels)
    n = E.shape[0]
    rows = np.arange(n)
    D = pairwise_sq_dist(E, P)
    logits = -D
    logits[rows, y] = -np.inf
    per = D[rows, y] + _logsumexp(logits, axis=1)
    G = -_softmax(logits)
    G[rows, y] = 1.0
    G /= n
    gE, gP = pairwise_sq_dist_grad(G, E, P)
    return LossOutput(float(per.mean()), {"emb": gE, "proxies": gP}, per)


def _row_norms(A: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} in cosine similarity")
    return norms


def normalized_softmax_loss(emb, labels, bank: ProxyBank, tau: float = 0.05) -> LossOutput:
    """Softmax cross-entropy over cosine similarities to all proxies, scaled by 1/tau."""
    E = as_matrix(emb, "emb")
    P = bank.proxies
    if P.shape[1] != E.shape[1]:
        raise DimensionError(f"proxies have d={P.shape[1]}, embeddings d={E.shape[1]}")
    y = bank.index_of(labels)
    n = E.shape[0]
    rows = np.arange(n)
    en, pn = _row_norms(E, "embedding"), _row_norms(P, "proxy")
    Eh, Ph = E / en[:, None], P / pn[:, None]
    cos = Eh @ Ph.T
    S = cos / tau
    per = _logsumexp(S, axis=1) - S[rows, y]
    G = _softmax(S)
    G[rows, y] -= 1.0
    G /= n * tau
    gE = (G @ Ph - np.sum(G * cos, axis=1)[:, None] * Eh) / en[:, None]
    gP = (G.T @ Eh - np.sum(G * cos, axis=0)[:, None] * Ph) / pn[:, None]
    return LossOutput(float(per.mean()), {"emb": gE, "proxies": gP}, per)


# --- group loss -----------------------------------------------------------------


def default_anchors(labels) -> np.ndarray:
    """First occurrence of each class in batch order."""
    _, first = np.unique(np.asarray(labels), return_index=True)
    return np.sort(first)


def group_loss(emb, labels, anchors=None, iterations: int = 3) -> LossOutput:
    """Group loss with one labeled anchor per in-batch class.

    Similarities are Pearson correlations with negatives clipped to zero and
    a zeroed diagonal. Non-anchor class probabilities start uniform and are
    refined by ``iterations`` replicator steps; the loss is the negative log
    of the refined true-class probability, averaged over non-anchors.
    """
    E = as_matrix(emb, "emb")
    labels = np.asarray(labels)
    n = E.shape[0]
    classes, y = np.unique(labels, return_inverse=True)
    C = classes.size
    anchors = default_anchors(labels) if anchors is None else np.asarray(anchors, dtype=np.int64)
    if anchors.size != C or sorted(y[anchors].tolist()) != list(range(C)):
        raise ConfigError("group loss needs exactly one anchor per in-batch class")
    is_anchor = np.zeros(n, dtype=bool)
    is_anchor[anchors] = True
    free = np.flatnonzero(~is_anchor)

    Xc = E - E.mean(axis=1, keepdims=True)
    r = np.linalg.norm(Xc, axis=1)
    if np.any(r == 0.0):
        raise DegenerateInputError("zero-variance embedding in Pearson similarity")
    Z = Xc / r[:, None]
    S = Z @ Z.T
    keep = S > 0
    np.fill_diagonal(keep, False)
    W = np.where(keep, S, 0.0)

    P = np.full((n, C), 1.0 / C)
    P[anchors] = 0.0
    P[anchors, y[anchors]] = 1.0
    traj, tape = [P], []
    stabilized = 0
    for _ in range(iterations):
        Pi = W @ P
        den = np.sum(P * Pi, axis=1)
        upd = ~is_anchor & (den > REPLICATOR_EPS)
        stabilized += int(np.sum(~is_anchor & ~upd))
        P_new = P.copy()
        P_new[upd] = P[upd] * Pi[upd] / den[upd, None]
        tape.append((P, Pi, den, upd, P_new))
        P = P_new
        traj.append(P)

    per = np.full(n, np.nan)
    if free.size == 0:
        return LossOutput(0.0, {"emb": np.zeros_like(E)}, per,
                          {"stabilized_denominators": stabilized}, {"trajectory": traj})
    pt = P[free, y[free]]
    per[free] = -np.log(np.maximum(pt, LOG_CLAMP))

    gP = np.zeros_like(P)
    gP[free, y[free]] = np.where(pt > LOG_CLAMP, -1.0 / (free.size * np.maximum(pt, LOG_CLAMP)), 0.0)
    gW = np.zeros_like(W)
    for P_prev, Pi, den, upd, P_out in reversed(tape):
        g_in = np.where(upd[:, None], 0.0, gP)
        go = gP[upd]
        gq = (go - np.sum(go * P_out[upd], axis=1, keepdims=True)) / den[upd, None]
        g_in[upd] += gq * Pi[upd]
        gPi = np.zeros_like(Pi)
        gPi[upd] = gq * P_prev[upd]
        gW += gPi @ P_prev.T
        g_in += W.T @ gPi
        gP = g_in
    gS = np.where(keep, gW, 0.0)
    gZ = (gS + gS.T) @ Z
    gXc = (gZ - np.sum(gZ * Z, axis=1, keepdims=True) * Z) / r[:, None]
    gE = gXc - gXc.mean(axis=1, keepdims=True)
    return LossOutput(float(per[free].mean()), {"emb": gE}, per,
                      {"stabilized_denominators": stabilized}, {"trajectory": traj})


# --- distillation ---------------------------------------------------------------


def distance_matching_loss(student_emb, teacher_emb) -> LossOutput:
    """Per anchor, the L1 gap between student and teacher in-batch distance rows.

    Each side's distances use its own dimensionality; the teacher is a constant.
    """
    S = as_matrix(student_emb, "student_emb")
    T = as_matrix(teacher_emb, "teacher_emb")
    if S.shape[0] != T.shape[0]:
        raise DimensionError(f"student batch has {S.shape[0]} rows, teacher {T.shape[0]}")
    n = S.shape[0]
    diff = pairwise_sq_dist(S, S) - pairwise_sq_dist(T, T)
    per = np.abs(diff).sum(axis=1)
    gA, gB = pairwise_sq_dist_grad(np.sign(diff) / max(n, 1), S, S)
    return LossOutput(float(per.mean()) if n else 0.0, {"emb": gA + gB}, per)


def db_cluster_loss(student_emb, labels, bank: CentroidBank, eps: float = DB_EPS) -> LossOutput:
    """Davies-Bouldin ratio per in-batch class against projected teacher centroids.

    Spread of class i is the mean distance of its in-batch members to its
    projected centroid; the loss averages the worst ratio over batch classes.
    """
    E = as_matrix(student_emb, "student_emb")
    labels = np.asarray(labels)
    A = bank.projection
    if A.shape[0] != E.shape[1]:
        raise DimensionError(f"projection outputs d={A.shape[0]}, embeddings d={E.shape[1]}")
    classes, y = np.unique(labels, return_inverse=True)
    K = classes.size
    if K < 2:
        raise DegenerateInputError("Davies-Bouldin loss needs at least two classes in the batch")
    Ct = bank.centroids[bank.index_of(classes)]
    Cp = Ct @ A.T
    M = np.zeros((E.shape[0], K))
    M[np.arange(E.shape[0]), y] = 1.0
    M /= M.sum(axis=0)
    Dxc = pairwise_sq_dist(E, Cp)
    sigma = np.sum(M * Dxc, axis=0)
    Dc = pairwise_sq_dist(Cp, Cp)
    iu = np.triu_indices(K, 1)
    coincident = int(np.sum(Dc[iu] < eps))
    R = (sigma[:, None] + sigma[None, :]) / (Dc + eps)
    np.fill_diagonal(R, -np.inf)
    j = np.argmax(R, axis=1)
    rows = np.arange(K)
    per = R[rows, j]

    inv = 1.0 / (K * (Dc[rows, j] + eps))
    g_sigma = inv.copy()
    np.add.at(g_sigma, j, inv)
    g_Dc = np.zeros((K, K))
    g_Dc[rows, j] = -per * inv
    gE, gCp = pairwise_sq_dist_grad(M * g_sigma[None, :], E, Cp)
    ga, gb = pairwise_sq_dist_grad(g_Dc, Cp, Cp)
    gCp += ga + gb
    return LossOutput(float(per.mean()), {"emb": gE, "projection": gCp.T @ Ct}, per,
                      {"coincident_centroids": coincident})
