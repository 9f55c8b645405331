"""Training of a linear + batch-norm projection head on fixed input features.

Covers latent-space reconfiguration (fresh head on top of pre-computed
teacher features), knowledge distillation (student head guided by teacher
distances or centroids), and from-scratch baselines on random features.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from .data import BatchSpec, EmbeddingSet, read_container, sample_batch, write_container
from .errors import ConfigError, GridSearchError, TrainingDivergedError
from .retrieval import evaluate
from .tensor import (
    BatchNormState, as_matrix, batchnorm_backward, batchnorm_forward,
    linear_backward, linear_forward,
)

log = logging.getLogger(__name__)

METRIC_LOSSES = ("triplet", "proxynca", "normalized-softmax", "group")
DISTILL_LOSSES = ("distance-match", "cluster-match")
LOSSES = METRIC_LOSSES + DISTILL_LOSSES
OPTIMIZERS = ("sgd", "adam")
CHECKPOINT_MAGIC = b"CKPT"


# --- model ----------------------------------------------------------------------


@dataclass
class ProjectionHead:
    """``batchnorm(X @ W.T + b)``; rows of W outside ``mask`` are pruned."""

    W: np.ndarray
    b: np.ndarray | None
    bn: BatchNormState | None
    mask: np.ndarray | None = None

    @classmethod
    def init(cls, d_in: int, d_out: int, seed: int = 0, *, bias: bool = True, batchnorm: bool = True,
             bn_momentum: float = 0.1, bn_eps: float = 1e-5, identity: bool = False) -> "ProjectionHead":
        if identity:
            W = np.eye(d_out, d_in)
        else:
            bound = math.sqrt(6.0 / d_in)   # Kaiming-uniform, fan-in
            W = np.random.default_rng(seed).uniform(-bound, bound, size=(d_out, d_in))
        b = np.zeros(d_out) if bias else None
        bn = BatchNormState.create(d_out, bn_momentum, bn_eps) if batchnorm else None
        return cls(W, b, bn)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        """Width of the emitted embeddings (active rows only)."""
        return int(self.mask.sum()) if self.mask is not None else self.W.shape[0]

    def _rows(self):
        return None if self.mask is None else np.flatnonzero(self.mask)

    def params(self) -> dict[str, np.ndarray]:
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        if self.bn is not None:
            p["gamma"] = self.bn.gamma
            p["beta"] = self.bn.beta
        return p

    def forward(self, X, training: bool = True):
        rows = self._rows()
        W = self.W if rows is None else self.W[rows]
        b = None if self.b is None else (self.b if rows is None else self.b[rows])
        out, lin_cache = linear_forward(W, b, X)
        bn_cache = None
        if self.bn is not None:
            state = self.bn if rows is None else self.bn.select(rows)
            state.training = training
            out, bn_cache = batchnorm_forward(out, state)
            if rows is not None and training:
                self.bn.running_mean[rows] = state.running_mean
                self.bn.running_var[rows] = state.running_var
            self.bn.training = training
        return out, (rows, lin_cache, bn_cache)

    def backward(self, grad_out, cache) -> dict[str, np.ndarray]:
        """Gradients for :meth:`params`, full-size, zero on pruned rows."""
        rows, lin_cache, bn_cache = cache
        grads = {}
        g = grad_out
        if bn_cache is not None:
            gg, gb, g = batchnorm_backward(g, bn_cache)
            grads["gamma"], grads["beta"] = self._scatter(gg, rows), self._scatter(gb, rows)
        gW, gbias, _ = linear_backward(g, lin_cache)
        grads["W"] = self._scatter(gW, rows)
        if gbias is not None:
            grads["b"] = self._scatter(gbias, rows)
        return grads

    def _scatter(self, g, rows):
        if rows is None:
            return g
        full = np.zeros((self.W.shape[0],) + g.shape[1:])
        full[rows] = g
        return full

    def embed(self, X) -> np.ndarray:
        """Eval-mode forward; does not touch any state."""
        rows = self._rows()
        W = self.W if rows is None else self.W[rows]
        b = None if self.b is None else (self.b if rows is None else self.b[rows])
        out, _ = linear_forward(W, b, X)
        if self.bn is not None:
            state = self.bn.copy() if rows is None else self.bn.select(rows)
            state.training = False
            out, _ = batchnorm_forward(out, state)
        return out

    def copy(self) -> "ProjectionHead":
        return copy.deepcopy(self)


class RandomExtractor:
    """Frozen, randomly initialized ``tanh`` layer: the feature extractor of a
    model trained from scratch, before any training."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0, gain: float = 1.0):
        rng = np.random.default_rng(seed)
        self.R = rng.normal(0.0, gain / math.sqrt(d_in), size=(d_out, d_in))

    def __call__(self, X) -> np.ndarray:
        return np.tanh(as_matrix(X) @ self.R.T)

    def apply(self, es: EmbeddingSet) -> EmbeddingSet:
        return es.with_vectors(self(es.vectors))


# --- optimizers -----------------------------------------------------------------


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.9, state: dict | None = None) -> dict:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p -= lr * v`` (in place)."""
    state = {} if state is None else state
    vel = state.setdefault("velocity", {})
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        v = vel.get(k)
        v = g.copy() if v is None else momentum * v + g
        vel[k] = v
        p -= lr * v
    return params


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Adam with bias correction, in place. ``state`` keeps ``t``, ``m``, ``v``."""
    t = state["t"] = state.get("t", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m[k] = beta1 * m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1**t)
        vhat = v[k] / (1 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "normalized-softmax"
    distill: str | None = None           # auxiliary distillation term added to ``loss``
    distill_weight: float = 1.0
    margin: float = 1.0
    tau: float = 0.05
    replicator_iterations: int = 3
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 70
    milestones: tuple[int, ...] = (50, 60)
    lr_decay: float = 0.1
    batch: BatchSpec = field(default_factory=BatchSpec)
    steps_per_epoch: int | None = None    # None: one pass over the labeled items
    d_out: int = 256
    bias: bool = True
    batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    eval_metric: str = "auto"
    freeze_extractor: bool = True
    seed: int = 0

    @staticmethod
    def scaled_milestones(epochs: int) -> tuple[int, ...]:
        """The 50/60-of-70 schedule rescaled to another budget; milestones
        that would fall outside ``[1, epochs)`` or coincide are dropped."""
        ms = {min(max(1, round(epochs * f / 70)), epochs - 1) for f in (50, 60)}
        return tuple(sorted(m for m in ms if m >= 1))

    def validate(self) -> None:
        errs = []
        if self.loss not in LOSSES:
            errs.append(f"unknown loss {self.loss!r}")
        if self.distill is not None:
            if self.distill not in DISTILL_LOSSES:
                errs.append(f"unknown distillation term {self.distill!r}")
            elif self.loss == self.distill:
                errs.append("distill term duplicates the main loss")
        if self.optimizer not in OPTIMIZERS:
            errs.append(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            errs.append("lr must be >= 0")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if any(m >= self.epochs for m in self.milestones) and self.epochs > 0:
            errs.append(f"milestones {self.milestones} must be < epochs {self.epochs}")
        if self.d_out < 1:
            errs.append("d_out must be >= 1")
        if self.eval_metric not in ("auto", "eq2", "cosine"):
            errs.append(f"unknown eval metric {self.eval_metric!r}")
        if not self.freeze_extractor:
            errs.append("extractor fine-tuning is unsupported; features are fixed inputs")
        if errs:
            raise ConfigError("; ".join(errs))

    @property
    def metric(self) -> str:
        if self.eval_metric != "auto":
            return self.eval_metric
        return "cosine" if self.loss == "normalized-softmax" else "eq2"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "batch" in d and isinstance(d["batch"], dict):
            d["batch"] = BatchSpec(**d["batch"])
        for k in ("milestones", "adam_betas"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr * decay ** (number of milestones <= epoch)``."""
    if not 0 <= epoch < max(cfg.epochs, 1):
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.lr_decay ** sum(1 for m in cfg.milestones if m <= epoch)


# --- training loop --------------------------------------------------------------


@dataclass
class Checkpoint:
    head: ProjectionHead
    banks: dict[str, np.ndarray]
    class_ids: list[int]
    optimizer_state: dict
    epoch: int
    val_map: float | None
    config: TrainConfig


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    last: Checkpoint


def _make_banks(cfg: TrainConfig, data: EmbeddingSet, teacher: np.ndarray, d_out: int, rng_seed: int):
    classes = sorted(data.clique_members)
    banks = {}
    kinds = {cfg.loss, cfg.distill}
    if kinds & {"proxynca", "normalized-softmax"}:
        banks["proxies"] = L.ProxyBank.create(classes, d_out, seed=rng_seed)
    if "cluster-match" in kinds:
        banks["centroids"] = L.CentroidBank.from_teacher(teacher, data.labels, d_out, seed=rng_seed + 1)
    return classes, banks


def _loss_terms(kind: str, emb, labels, teacher_batch, banks, cfg: TrainConfig) -> L.LossOutput:
    if kind == "triplet":
        return L.triplet_loss(emb, labels, cfg.margin)
    if kind == "proxynca":
        return L.proxynca_loss(emb, labels, banks["proxies"])
    if kind == "normalized-softmax":
        return L.normalized_softmax_loss(emb, labels, banks["proxies"], cfg.tau)
    if kind == "group":
        return L.group_loss(emb, labels, iterations=cfg.replicator_iterations)
    if kind == "distance-match":
        return L.distance_matching_loss(emb, teacher_batch)
    if kind == "cluster-match":
        return L.db_cluster_loss(emb, labels, banks["centroids"])
    raise ConfigError(f"unknown loss {kind!r}")


def _trainable(head: ProjectionHead, banks: dict) -> dict[str, np.ndarray]:
    p = dict(head.params())
    if "proxies" in banks:
        p["proxies"] = banks["proxies"].proxies
    if "centroids" in banks:
        p["projection"] = banks["centroids"].projection
    return p


def batch_loss(head: ProjectionHead, X, labels, teacher_batch, banks, cfg: TrainConfig):
    """One forward/backward pass; returns ``(loss value, grads)`` keyed like
    :func:`_trainable`."""
    emb, cache = head.forward(X, training=True)
    out = _loss_terms(cfg.loss, emb, labels, teacher_batch, banks, cfg)
    value, g_emb = out.value, out.grads["emb"]
    grads = {k: v for k, v in out.grads.items() if k != "emb"}
    if cfg.distill is not None:
        aux = _loss_terms(cfg.distill, emb, labels, teacher_batch, banks, cfg)
        value += cfg.distill_weight * aux.value
        g_emb = g_emb + cfg.distill_weight * aux.grads["emb"]
        for k, v in aux.grads.items():
            if k != "emb":
                grads[k] = grads.get(k, 0.0) + cfg.distill_weight * v
    grads.update(head.backward(g_emb, cache))
    return value, grads


def _snapshot(head, banks, classes, opt_state, epoch, val_map, cfg) -> Checkpoint:
    bank_arrays = {}
    if "proxies" in banks:
        bank_arrays["proxies"] = banks["proxies"].proxies.copy()
    if "centroids" in banks:
        bank_arrays["projection"] = banks["centroids"].projection.copy()
        bank_arrays["centroids"] = np.array(banks["centroids"].centroids)
    return Checkpoint(head.copy(), bank_arrays, list(classes), copy.deepcopy(opt_state),
                      epoch, val_map, cfg)


def train(head: ProjectionHead, data: EmbeddingSet, cfg: TrainConfig,
          val: EmbeddingSet | None = None, teacher: EmbeddingSet | np.ndarray | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``head`` in place on ``data`` (input features with clique labels).

    ``teacher`` supplies the teacher embeddings aligned with ``data`` rows for
    the distillation losses; by default the input features themselves. The
    best checkpoint is the one with the highest validation MAP (earliest
    epoch on ties); without ``val`` it is the last epoch.
    """
    cfg.validate()
    if head.d_in != data.d:
        raise ConfigError(f"head expects d_in={head.d_in}, data has d={data.d}")
    T = data.vectors if teacher is None else getattr(teacher, "vectors", teacher)
    T = np.asarray(T, dtype=np.float64)
    if T.shape[0] != data.n:
        raise ConfigError("teacher embeddings must align with the training rows")
    X_all = np.asarray(data.vectors, dtype=np.float64)
    labels_all = data.labels
    classes, banks = _make_banks(cfg, data, T, head.d_out, cfg.seed + 1000)
    n_items = sum(len(m) for m in data.clique_members.values())
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_items / cfg.batch.batch_size))
    batch_spec = replace(cfg.batch, seed=cfg.seed)
    opt_state: dict = {}

    def validate_map(epoch=-1):
        if val is None:
            return None, None
        emb = head.embed(val.vectors)
        if not np.all(np.abs(emb) < np.finfo(np.float32).max):
            raise TrainingDivergedError(
                f"validation embeddings overflow float32 after epoch {epoch}",
                {"epoch": epoch, "step": None, "last_finite_loss": last_finite,
                 "params": {k: v.copy() for k, v in _trainable(head, banks).items()}},
            )
        rep = evaluate(val.with_vectors(emb), cfg.metric)
        return rep.map, rep.mr1

    history: list[dict] = []
    last_finite = None
    vmap, _ = validate_map()
    best = _snapshot(head, banks, classes, opt_state, -1, vmap, cfg)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        total = 0.0
        for step in range(steps):
            idx = sample_batch(data, batch_spec, (epoch, step))
            value, grads = batch_loss(head, X_all[idx], labels_all[idx], T[idx], banks, cfg)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "last_finite_loss": last_finite, "lr": lr,
                     "params": {k: v.copy() for k, v in _trainable(head, banks).items()}},
                )
            last_finite = value
            total += value
            params = _trainable(head, banks)
            if cfg.optimizer == "sgd":
                sgd_step(params, grads, lr, cfg.momentum, opt_state)
            else:
                adam_step(params, grads, opt_state, lr, *cfg.adam_betas, cfg.adam_eps)
        vmap, vmr1 = validate_map(epoch)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / steps, "val_map": vmap, "val_mr1": vmr1}
        history.append(row)
        log.debug("epoch %d lr %.3g loss %.4f val MAP %s", epoch, lr, row["train_loss"], vmap)
        if on_epoch is not None:
            on_epoch(row)
        if val is None or best.val_map is None or vmap > best.val_map:
            best = _snapshot(head, banks, classes, opt_state, epoch, vmap, cfg)
    last = _snapshot(head, banks, classes, opt_state, cfg.epochs - 1, history[-1]["val_map"] if history else vmap, cfg)
    return TrainResult(best, history, last)


def write_history_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "val_map", "val_mr1"])
        for r in history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]),
                        "" if r["val_map"] is None else repr(r["val_map"]),
                        "" if r["val_mr1"] is None else repr(r["val_mr1"])])


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    h = ckpt.head
    blocks = {"W": h.W}
    if h.b is not None:
        blocks["b"] = h.b
    if h.bn is not None:
        blocks.update({"bn.gamma": h.bn.gamma, "bn.beta": h.bn.beta,
                       "bn.running_mean": h.bn.running_mean, "bn.running_var": h.bn.running_var})
    if h.mask is not None:
        blocks["mask"] = h.mask.astype(np.float64)
    for k, v in ckpt.banks.items():
        blocks[f"bank.{k}"] = np.asarray(v, dtype=np.float64)
    opt_meta = {}
    for k, v in ckpt.optimizer_state.items():
        if isinstance(v, dict):
            for name, arr in v.items():
                blocks[f"opt.{k}.{name}"] = np.asarray(arr, dtype=np.float64)
        else:
            opt_meta[k] = v
    trailer = {
        "epoch": ckpt.epoch,
        "val_map": ckpt.val_map,
        "class_ids": ckpt.class_ids,
        "config": ckpt.config.to_dict(),
        "optimizer": opt_meta,
        "bn": None if h.bn is None else {"momentum": h.bn.momentum, "eps": h.bn.eps},
    }
    write_container(path, CHECKPOINT_MAGIC, h.W, trailer, blocks)


def load_checkpoint(path) -> Checkpoint:
    _, trailer, blocks = read_container(path, CHECKPOINT_MAGIC)
    bn = None
    if trailer.get("bn") is not None:
        bn = BatchNormState(blocks["bn.gamma"], blocks["bn.beta"], blocks["bn.running_mean"],
                            blocks["bn.running_var"], trailer["bn"]["momentum"], trailer["bn"]["eps"],
                            training=False)
    mask = blocks["mask"].astype(bool) if "mask" in blocks else None
    head = ProjectionHead(blocks["W"], blocks.get("b"), bn, mask)
    banks = {k[5:]: v for k, v in blocks.items() if k.startswith("bank.")}
    opt: dict = dict(trailer.get("optimizer", {}))
    for k, v in blocks.items():
        if k.startswith("opt."):
            _, group, name = k.split(".", 2)
            opt.setdefault(group, {})[name] = v
    return Checkpoint(head, banks, trailer["class_ids"], opt, trailer["epoch"], trailer["val_map"],
                      TrainConfig.from_dict(trailer["config"]))


# --- grid search and reconfiguration --------------------------------------------

DEFAULT_GRID = {"optimizer": ("sgd", "adam"), "lr": (0.0001, 0.001, 0.01, 0.1)}


@dataclass
class GridResult:
    best: TrainConfig
    leaderboard: list[dict]


def grid_search(data: EmbeddingSet, loss: str, grid: dict | None = None,
                base: TrainConfig | None = None, val: EmbeddingSet | None = None,
                objective: Callable[[TrainConfig], float] | None = None) -> GridResult:
    """Train one run per (optimizer, lr) cell and rank by best validation MAP.

    ``objective`` maps a config to a score; by default it trains a fresh
    head with :func:`train` and returns the best validation MAP. Ties go to
    the lower learning rate, then to SGD.
    """
    grid = DEFAULT_GRID if grid is None else grid
    base = replace(base or TrainConfig(), loss=loss)
    cells = [(o, lr) for o in grid["optimizer"] for lr in grid["lr"]]
    if not cells:
        raise ConfigError("empty grid")
    if objective is None:
        if val is None:
            raise ConfigError("grid search needs a validation set")

        def objective(cfg):
            head = ProjectionHead.init(data.d, cfg.d_out, cfg.seed, bias=cfg.bias, batchnorm=cfg.batchnorm,
                                       bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
            return train(head, data, cfg, val=val).best.val_map

    board, failures = [], []
    for opt, lr in cells:
        cfg = replace(base, optimizer=opt, lr=lr)
        try:
            score = objective(cfg)
        except TrainingDivergedError as exc:
            failures.append({"optimizer": opt, "lr": lr, "error": str(exc), "snapshot": exc.snapshot})
            continue
        if score is None or not math.isfinite(score):
            failures.append({"optimizer": opt, "lr": lr, "error": f"non-finite score {score}"})
            continue
        board.append({"optimizer": opt, "lr": lr, "val_map": float(score), "config": cfg})
    if not board:
        raise GridSearchError("every grid cell diverged", failures)
    order = {o: i for i, o in enumerate(OPTIMIZERS)}
    board.sort(key=lambda r: (-r["val_map"], r["lr"], order.get(r["optimizer"], 99)))
    for f in failures:
        board.append({"optimizer": f["optimizer"], "lr": f["lr"], "val_map": None, "error": f["error"]})
    return GridResult(board[0]["config"], board)


@dataclass
class ReconfigResult:
    checkpoint: Checkpoint
    history: list[dict]
    embeddings: EmbeddingSet


def reconfigure(teacher_features: EmbeddingSet, cfg: TrainConfig, val: EmbeddingSet | None = None,
                identity_init: bool = False) -> ReconfigResult:
    """Learn a fresh projection head on fixed teacher features.

    The emitted embeddings are the best checkpoint applied (eval mode) to
    ``val`` when given, else to the training features.
    """
    head = ProjectionHead.init(teacher_features.d, cfg.d_out, cfg.seed, bias=cfg.bias,
                               batchnorm=cfg.batchnorm, bn_momentum=cfg.bn_momentum,
                               bn_eps=cfg.bn_eps, identity=identity_init)
    result = train(head, teacher_features, cfg, val=val)
    target = val if val is not None else teacher_features
    emitted = target.with_vectors(result.best.head.embed(target.vectors))
    return ReconfigResult(result.best, result.history, emitted)
