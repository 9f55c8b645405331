"""Unsupervised reduction of teacher embeddings: PCA, FastICA, Gaussian random projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import read_container, write_container
from .errors import ConfigError, DegenerateInputError, DimensionError
from .tensor import as_matrix

REDUCER_MAGIC = b"REDU"
KINDS = ("pca", "ica", "grp")


@dataclass(frozen=True, eq=False)
class Reducer:
    """A fitted linear map ``x -> components @ (x - mean)``.

    ``mean`` is None for random projections, which do not center.
    """

    kind: str
    components: np.ndarray
    mean: np.ndarray | None
    fitted_on: tuple[int, int]
    explained_variance: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def target_dim(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class NonConvergence:
    """FastICA did not reach ``tol`` within ``max_iter`` iterations."""

    iterations: int
    final_delta: float
    tol: float

    def __str__(self) -> str:
        return (f"FastICA did not converge: {self.iterations} iterations, "
                f"final delta {self.final_delta:.3g} > tol {self.tol:g}")


def _check_k(k: int, n: int, d: int) -> None:
    if not 1 <= k <= min(n - 1, d):
        raise ConfigError(f"target dim k={k} must lie in [1, min(n-1, d)] = [1, {min(n - 1, d)}]")


def fit_pca(X, k: int) -> Reducer:
    """Top-k principal directions of the centered data, via SVD.

    Each component is sign-normalized so that its largest-magnitude entry
    is positive.
    """
    X = as_matrix(X)
    n, d = X.shape
    _check_k(k, n, d)
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    var = s[:k] ** 2 / (n - 1)
    return Reducer("pca", comps, mean, (n, d), var, {"k": k})


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    # (W W^T)^{-1/2} W
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(W.dtype).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fit_ica(X, k: int, max_iter: int = 200, tol: float = 1e-4, seed: int = 0):
    """FastICA with PCA whitening, logcosh contrast and symmetric decorrelation.

    Returns a :class:`Reducer` whose components are the unmixing matrix
    composed with the whitening transform, or a :class:`NonConvergence`
    report when the fixed-point iteration does not settle.
    """
    X = as_matrix(X)
    n, d = X.shape
    _check_k(k, n, d)
    if max_iter < 1:
        raise ConfigError("max_iter must be >= 1")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    if s[k - 1] <= s[0] * 1e-10:
        raise DegenerateInputError(f"data has rank < {k}; cannot whiten to {k} dims")
    whitening = vt[:k] / s[:k, None] * np.sqrt(n)
    Z = (X - mean) @ whitening.T

    rng = np.random.default_rng(seed)
    W = _sym_decorrelate(rng.standard_normal((k, k)))
    delta = np.inf
    for it in range(1, max_iter + 1):
        G = np.tanh(Z @ W.T)
        W_new = (G.T @ Z) / n - np.mean(1.0 - G**2, axis=0)[:, None] * W
        W_new = _sym_decorrelate(W_new)
        delta = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", W_new, W)) - 1.0)))
        W = W_new
        if delta < tol:
            comps = W @ whitening
            return Reducer("ica", comps, mean, (n, d), None,
                           {"k": k, "max_iter": max_iter, "tol": tol, "seed": seed, "iterations": it})
    return NonConvergence(max_iter, delta, tol)


def fit_grp(d: int, k: int, seed: int = 0) -> Reducer:
    """Gaussian random projection with i.i.d. N(0, 1/k) entries; data-independent."""
    if k < 1 or d < 1:
        raise ConfigError("d and k must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, d))
    return Reducer("grp", comps, None, (0, d), None, {"k": k, "seed": seed})


def transform(r: Reducer, X) -> np.ndarray:
    X = as_matrix(X)
    if X.shape[1] != r.input_dim:
        raise DimensionError(f"reducer was fitted on d={r.input_dim}, got {X.shape[1]} columns")
    if r.mean is not None:
        X = X - r.mean
    return X @ r.components.T


def inverse_transform(r: Reducer, Y) -> np.ndarray:
    """Map back with ``components.T``; exact for PCA at k == d."""
    Y = as_matrix(Y, "Y", cols=r.target_dim)
    out = Y @ r.components
    return out if r.mean is None else out + r.mean


def save_reducer(path, r: Reducer) -> None:
    blocks = {}
    if r.mean is not None:
        blocks["mean"] = np.asarray(r.mean, dtype=np.float64)
    if r.explained_variance is not None:
        blocks["explained_variance"] = np.asarray(r.explained_variance, dtype=np.float64)
    blocks["components"] = np.asarray(r.components, dtype=np.float64)
    trailer = {"kind": r.kind, "fitted_on": list(r.fitted_on), "target_dim": r.target_dim,
               "config": r.config}
    # primary block is the float32 view for tools that only read the header
    write_container(path, REDUCER_MAGIC, r.components, trailer, blocks)


def load_reducer(path) -> Reducer:
    _, trailer, blocks = read_container(path, REDUCER_MAGIC)
    return Reducer(
        kind=trailer["kind"],
        components=blocks["components"],
        mean=blocks.get("mean"),
        fitted_on=tuple(trailer["fitted_on"]),
        explained_variance=blocks.get("explained_variance"),
        config=trailer.get("config", {}),
    )
