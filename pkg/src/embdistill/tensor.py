"""Dense kernels: normalized distances, similarities, linear and batch-norm layers.

Arrays at module boundaries are validated (2-D, finite). Everything inside
runs in float64 so that hand-derived gradients can be checked against
finite differences; embeddings are stored as float32 on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError


def as_matrix(x, name: str = "X", *, cols: int | None = None) -> np.ndarray:
    """Validate a 2-D finite array and return it as float64."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise DimensionError(f"{name} has {a.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def _vector(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError(f"{name} must be a non-empty vector, got shape {a.shape}")
    return a


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


# --- distances and similarities -------------------------------------------------


def squared_dist(vi, vj) -> float:
    """Squared Euclidean distance divided by the dimensionality."""
    a, b = _vector(vi, "v_i"), _vector(vj, "v_j")
    _same_length(a, b)
    diff = a - b
    return float(np.dot(diff, diff) / a.size)


def cosine_sim(vi, vj) -> float:
    a, b = _vector(vi, "v_i"), _vector(vj, "v_j")
    _same_length(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pearson_sim(vi, vj) -> float:
    a, b = _vector(vi, "v_i"), _vector(vj, "v_j")
    _same_length(a, b)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("Pearson correlation of a zero-variance vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pairwise_sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs normalized squared distances for small in-batch matrices.

    Uses explicit differences (exact, no cancellation); for large retrieval
    problems use :func:`embdistill.retrieval.pairwise_distances`.
    """
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff) / A.shape[1]


def pairwise_sq_dist_grad(G: np.ndarray, A: np.ndarray, B: np.ndarray):
    """Backpropagate ``G = dL/dD`` through ``D = pairwise_sq_dist(A, B)``.

    Returns ``(dL/dA, dL/dB)``. When A and B are the same array the caller
    must add both parts.
    """
    scale = 2.0 / A.shape[1]
    gA = scale * (G.sum(axis=1)[:, None] * A - G @ B)
    gB = scale * (G.sum(axis=0)[:, None] * B - G.T @ A)
    return gA, gB


# --- linear layer ---------------------------------------------------------------


@dataclass
class LinearCache:
    X: np.ndarray
    W: np.ndarray
    has_bias: bool


def linear_forward(W, b, X):
    """``X @ W.T + b``. ``b`` may be None for a bias-free layer.

    Returns ``(out, cache)``.
    """
    W = as_matrix(W, "W")
    X = as_matrix(X, "X")
    if X.shape[1] != W.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but W expects {W.shape[1]}")
    out = X @ W.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {W.shape[0]} outputs")
        out = out + b
    return out, LinearCache(X=X, W=W, has_bias=b is not None)


def linear_backward(grad_out, cache: LinearCache):
    """Returns ``(grad_W, grad_b, grad_X)``; ``grad_b`` is None without bias."""
    g = np.asarray(grad_out, dtype=np.float64)
    expected = (cache.X.shape[0], cache.W.shape[0])
    if g.shape != expected:
        raise ContractError(f"grad_out shape {g.shape} does not match cached forward {expected}")
    grad_W = g.T @ cache.X
    grad_b = g.sum(axis=0) if cache.has_bias else None
    grad_X = g @ cache.W
    return grad_W, grad_b, grad_X


# --- batch normalization --------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(num_features),
            beta=np.zeros(num_features),
            running_mean=np.zeros(num_features),
            running_var=np.ones(num_features),
            momentum=momentum,
            eps=eps,
        )

    @property
    def num_features(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
            self.running_var.copy(), self.momentum, self.eps, self.training,
        )

    def select(self, rows: np.ndarray) -> "BatchNormState":
        """Copy restricted to a subset of features; used for pruned heads."""
        return BatchNormState(
            self.gamma[rows], self.beta[rows], self.running_mean[rows],
            self.running_var[rows], self.momentum, self.eps, self.training,
        )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool
    constant_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def batchnorm_forward(X, state: BatchNormState):
    """Normalize each feature over the batch (train) or with running stats (eval).

    In train mode the running statistics of ``state`` are updated in place
    (unbiased variance, as the usual framework convention).
    """
    X = as_matrix(X, "X", cols=state.num_features)
    n = X.shape[0]
    if state.training:
        if n < 2:
            raise DegenerateInputError("train-mode batch norm needs at least 2 samples")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[:] = (1.0 - m) * state.running_var + m * var * n / (n - 1)
        constant = np.ptp(X, axis=0) == 0.0
    else:
        mean = state.running_mean
        var = state.running_var
        constant = np.zeros(X.shape[1], dtype=bool)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (X - mean) * inv_std
    out = state.gamma * xhat + state.beta
    cache = BatchNormCache(xhat, inv_std, state.gamma.copy(), state.training, constant)
    return out, cache


def batchnorm_backward(grad_out, cache: BatchNormCache):
    """Returns ``(grad_gamma, grad_beta, grad_X)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.xhat.shape:
        raise ContractError(f"grad_out shape {g.shape} does not match cached forward {cache.xhat.shape}")
    if cache.training and cache.constant_cols.any():
        cols = np.flatnonzero(cache.constant_cols).tolist()
        raise DegenerateInputError(f"constant input feature(s) {cols} in train-mode batch")
    grad_gamma = np.sum(g * cache.xhat, axis=0)
    grad_beta = g.sum(axis=0)
    gxhat = g * cache.gamma
    if cache.training:
        grad_X = cache.inv_std * (
            gxhat - gxhat.mean(axis=0) - cache.xhat * np.mean(gxhat * cache.xhat, axis=0)
        )
    else:
        grad_X = gxhat * cache.inv_std
    return grad_gamma, grad_beta, grad_X
