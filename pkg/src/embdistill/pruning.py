"""Iterative magnitude pruning of the output rows of a projection head, with
rewinding of the surviving rows to their Iteration-0 weights."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import EmbeddingSet
from .errors import PruneStateError
from .retrieval import evaluate
from .tensor import BatchNormState
from .trainer import ProjectionHead, TrainConfig, train


@dataclass(frozen=True, eq=False)
class PruneState:
    W_init: np.ndarray
    b_init: np.ndarray | None
    active_mask: np.ndarray
    iteration: int = 0
    history: tuple[dict, ...] = ()
    bn_init: BatchNormState | None = None

    @classmethod
    def start(cls, head: ProjectionHead) -> "PruneState":
        """Snapshot the head as Iteration 0."""
        W = head.W.copy()
        W.setflags(write=False)
        b = None if head.b is None else head.b.copy()
        mask = np.ones(W.shape[0], dtype=bool) if head.mask is None else head.mask.copy()
        bn = None if head.bn is None else head.bn.copy()
        return cls(W, b, mask, bn_init=bn)

    @property
    def kept(self) -> int:
        return int(self.active_mask.sum())

    def record(self, val_map: float | None) -> "PruneState":
        row = {"iteration": self.iteration, "kept_dim": self.kept, "val_map": val_map}
        return replace(self, history=self.history + (row,))


def rank_rows(W, mask) -> np.ndarray:
    """Active row indices by mean absolute weight, descending; ties keep the
    lower index first."""
    W = np.asarray(W, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    active = np.flatnonzero(mask)
    if active.size == 0:
        raise PruneStateError("no active rows to rank")
    score = np.abs(W[active]).mean(axis=1)
    return active[np.lexsort((active, -score))]


def prune_step(state: PruneState, W_live):
    """Drop the lower half of the active rows (ranked on the retrained
    ``W_live``) and rewind the upper half to Iteration 0.

    Keeps ``floor(active / 2)`` rows. Returns ``(new_state, W_new, b_new)``;
    pruned rows of ``W_new`` and ``b_new`` are zero.
    """
    if state.kept < 2:
        raise PruneStateError(f"cannot prune {state.kept} active row(s)")
    order = rank_rows(W_live, state.active_mask)
    keep = order[: state.kept // 2]
    mask = np.zeros_like(state.active_mask)
    mask[keep] = True
    W_new = np.zeros_like(state.W_init, dtype=np.float64)
    W_new[mask] = state.W_init[mask]
    b_new = None
    if state.b_init is not None:
        b_new = np.zeros_like(state.b_init)
        b_new[mask] = state.b_init[mask]
    return replace(state, active_mask=mask, iteration=state.iteration + 1), W_new, b_new


def masked_embed(head: ProjectionHead, mask, X) -> np.ndarray:
    """Eval-mode embeddings restricted to the active rows (compacted)."""
    h = ProjectionHead(head.W, head.b, head.bn, np.asarray(mask, dtype=bool))
    return h.embed(X)


@dataclass
class PruneRun:
    state: PruneState
    head: ProjectionHead
    stopped_because: str
    heads: list[ProjectionHead] = field(default_factory=list)

    def report(self) -> dict:
        return {"history": list(self.state.history), "stopped_because": self.stopped_because}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.report(), indent=2) + "\n")


def run_pruning(head: ProjectionHead, data: EmbeddingSet, cfg: TrainConfig, val: EmbeddingSet,
                max_iterations: int = 8, max_map_drop: float = 0.05, min_dim: int = 2) -> PruneRun:
    """Train, prune half the rows, rewind, retrain, until ``min_dim`` rows
    remain, ``max_iterations`` pruning steps ran, or validation MAP falls more
    than ``max_map_drop`` below Iteration 0.

    ``head`` is snapshotted as Iteration 0 before any training. The returned
    head is the last one that passed the MAP criterion.
    """
    state = PruneState.start(head)
    live = head.copy()
    heads = []
    base_map = None
    best_head = live
    reason = "max_iterations"
    for it in range(max_iterations + 1):
        live.mask = state.active_mask.copy()
        res = train(live, data, cfg, val=val)
        live = res.best.head
        vmap = evaluate(val.with_vectors(live.embed(val.vectors)), cfg.metric).map
        state = state.record(vmap)
        heads.append(live.copy())
        if base_map is None:
            base_map = vmap
        if vmap < base_map - max_map_drop:
            reason = "map_drop"
            break
        best_head = live
        if it == max_iterations:
            break
        if state.kept // 2 < min_dim:
            reason = "min_dim"
            break
        state, W_new, b_new = prune_step(state, live.W)
        live = live.copy()
        live.W, live.b = W_new, b_new
        if state.bn_init is not None:
            live.bn = state.bn_init.copy()
    return PruneRun(state, best_head, reason, heads)
