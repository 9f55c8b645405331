"""Declarative experiments: one method, several target dimensions, one output directory.

A config is a TOML file::

    [experiment]
    method = "reconfigure"          # pca|ica|grp|prune|distance-match|cluster-match|reconfigure|baseline
    loss = "normalized-softmax"
    dims = [16, 32]
    output = "runs/reconf"
    seed = 0

    [data]
    manifest = "data/manifest.txt"  # or train = ..., val = ...; raw_train/raw_val for baseline

    [train]                         # any TrainConfig field
    epochs = 20

Relative data paths resolve against the config file's directory, then
against ``$EMBDISTILL_DATA_DIR``.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import EmbeddingSet, load_embeddings, read_manifest, save_embeddings
from .errors import ConfigError
from .pruning import masked_embed, run_pruning
from .reduction import KINDS, NonConvergence, fit_grp, fit_ica, fit_pca, save_reducer, transform
from .retrieval import evaluate
from .trainer import (
    METRIC_LOSSES, ProjectionHead, RandomExtractor, TrainConfig, save_checkpoint, train,
    write_history_csv,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_DIR_ENV = "EMBDISTILL_DATA_DIR"
REDUCTIONS = KINDS
TRAINED = ("prune", "distance-match", "cluster-match", "reconfigure", "baseline")
METHODS = REDUCTIONS + TRAINED
_SECTIONS = {"experiment", "data", "train", "prune", "ica", "baseline"}
_EXPERIMENT_KEYS = {"method", "loss", "dims", "output", "seed", "metric", "label"}
_DATA_KEYS = {"manifest", "train", "val", "raw_train", "raw_val"}


@dataclass
class ExperimentConfig:
    method: str
    dims: list[int]
    output: Path
    loss: str | None = None
    seed: int = 0
    metric: str = "auto"
    label: str | None = None
    data: dict[str, Path] = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)
    ica: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return self.method if not self.loss else f"{self.method} + {self.loss}"

    def train_config(self, d: int) -> TrainConfig:
        t = dict(self.train)
        t.setdefault("seed", self.seed)
        if self.method in ("distance-match", "cluster-match"):
            t["loss"], t["distill"] = (self.loss, self.method) if self.loss else (self.method, None)
        elif self.loss:
            t["loss"] = self.loss
        if self.metric != "auto":
            t["eval_metric"] = self.metric
        t["d_out"] = d
        if "epochs" in t and "milestones" not in t:
            t["milestones"] = TrainConfig.scaled_milestones(t["epochs"])
        return TrainConfig.from_dict(t)

    def resolved(self) -> dict:
        return {
            "experiment": {"method": self.method, "loss": self.loss, "dims": self.dims,
                           "output": str(self.output), "seed": self.seed, "metric": self.metric,
                           "label": self.label},
            "data": {k: str(v) for k, v in self.data.items()},
            "train": self.train, "prune": self.prune, "ica": self.ica, "baseline": self.baseline,
        }


def validation_errors(raw: dict) -> list[str]:
    """Every problem with a parsed config dict; empty when valid."""
    errs = []
    unknown = set(raw) - _SECTIONS
    if unknown:
        errs.append(f"unknown sections {sorted(unknown)}")
    exp = raw.get("experiment")
    if not isinstance(exp, dict):
        return errs + ["missing [experiment] section"]
    bad = set(exp) - _EXPERIMENT_KEYS
    if bad:
        errs.append(f"unknown experiment keys {sorted(bad)}")
    method, loss = exp.get("method"), exp.get("loss")
    if method not in METHODS:
        errs.append(f"method must be one of {METHODS}, got {method!r}")
    elif method in REDUCTIONS:
        if loss is not None:
            errs.append(f"method {method!r} is unsupervised and takes no loss")
    elif method in ("distance-match", "cluster-match"):
        if loss is not None and loss not in METRIC_LOSSES:
            errs.append(f"method {method!r} combines only with a metric loss {METRIC_LOSSES}, got {loss!r}")
    elif loss not in METRIC_LOSSES:
        errs.append(f"method {method!r} needs a metric loss {METRIC_LOSSES}, got {loss!r}")
    dims = exp.get("dims")
    if not isinstance(dims, list) or not dims or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims):
        errs.append("dims must be a non-empty list of positive integers")
    elif len(set(dims)) != len(dims):
        errs.append("dims must not repeat")
    if not isinstance(exp.get("output"), str) or not exp.get("output"):
        errs.append("output directory is required")
    if exp.get("metric", "auto") not in ("auto", "eq2", "cosine"):
        errs.append(f"unknown metric {exp.get('metric')!r}")
    seed = exp.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errs.append("seed must be an integer")
    data = raw.get("data", {})
    if not isinstance(data, dict):
        errs.append("[data] must be a table")
        data = {}
    bad = set(data) - _DATA_KEYS
    if bad:
        errs.append(f"unknown data keys {sorted(bad)}")
    if "manifest" not in data and not {"train", "val"} <= set(data):
        errs.append("[data] needs a manifest or both train and val")
    if method == "baseline" and "manifest" not in data and not {"raw_train", "raw_val"} <= set(data):
        errs.append("baseline needs raw_train and raw_val inputs (directly or via the manifest)")
    if method in TRAINED and method in METHODS and not errs:
        try:
            probe = ExperimentConfig(method, dims, Path("."), loss, seed, exp.get("metric", "auto"),
                                     train=dict(raw.get("train", {})))
            probe.train_config(dims[0]).validate()
        except (ConfigError, TypeError) as exc:
            errs.append(f"[train]: {exc}")
    return errs


def _resolve(p: str, base: Path) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    if (base / path).exists() or DATA_DIR_ENV not in os.environ:
        return base / path
    return Path(os.environ[DATA_DIR_ENV]) / path


def parse_config(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    errs = validation_errors(raw)
    if errs:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(errs))
    exp = raw["experiment"]
    data = {}
    for k, v in raw.get("data", {}).items():
        data[k] = _resolve(v, base)
    if "manifest" in data:
        m = read_manifest(data.pop("manifest"))
        data.setdefault("train", m["train"])
        data.setdefault("val", m["val"])
        for k in ("raw_train", "raw_val"):
            if k in m:
                data.setdefault(k, m[k])
    if exp["method"] == "baseline" and not {"raw_train", "raw_val"} <= set(data):
        raise ConfigError("baseline needs raw_train and raw_val inputs; the manifest lists neither")
    missing = [f"{k}: {v}" for k, v in sorted(data.items()) if not v.is_file()]
    if missing:
        raise ConfigError("input files not found:\n  - " + "\n  - ".join(missing))
    out = Path(exp["output"])
    return ExperimentConfig(
        method=exp["method"], dims=list(exp["dims"]),
        output=out if out.is_absolute() else base / out,
        loss=exp.get("loss"), seed=exp.get("seed", 0), metric=exp.get("metric", "auto"),
        label=exp.get("label"), data=data, train=dict(raw.get("train", {})),
        prune=dict(raw.get("prune", {})), ica=dict(raw.get("ica", {})),
        baseline=dict(raw.get("baseline", {})),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent)


# --- execution ------------------------------------------------------------------


class OutputDirLock:
    """Exclusive claim on an output directory for the lifetime of one run."""

    def __init__(self, out: Path, force: bool):
        self.out = out
        self.force = force
        self.lock = out / ".lock"

    def __enter__(self):
        if self.out.exists() and any(p.name != ".lock" for p in self.out.iterdir()) and not self.force:
            raise FileExistsError(f"{self.out} is not empty; pass --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise FileExistsError(f"{self.out} is locked by another run ({self.lock})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _metric(cfg: ExperimentConfig) -> str:
    if cfg.metric != "auto":
        return cfg.metric
    return "cosine" if cfg.method not in REDUCTIONS and cfg.loss == "normalized-softmax" else "eq2"


def _emit(out_dir: Path, es: EmbeddingSet, metric: str) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_embeddings(out_dir / "embeddings.emb", es)
    rep = evaluate(es, metric)
    rep.to_json(out_dir / "report.json")
    return {"map": rep.map, "mr1": rep.mr1, "dim": es.d}


def _run_reduction(cfg, d, train_set, val_set, out_dir):
    if cfg.method == "pca":
        r = fit_pca(train_set.vectors, d)
    elif cfg.method == "ica":
        r = fit_ica(train_set.vectors, d, seed=cfg.seed, **cfg.ica)
    else:
        r = fit_grp(train_set.d, d, seed=cfg.seed)
    if isinstance(r, NonConvergence):
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "nonconvergence.json").write_text(json.dumps(
            {"iterations": r.iterations, "final_delta": r.final_delta, "tol": r.tol}, indent=2) + "\n")
        return {"map": None, "mr1": None, "dim": d, "note": str(r)}
    result = _emit(out_dir, val_set.with_vectors(transform(r, val_set.vectors)), _metric(cfg))
    save_reducer(out_dir / "reducer.red", r)
    return result


def _run_training(cfg, d, sets, out_dir):
    tcfg = cfg.train_config(d)
    train_set, val_set = sets["train"], sets["val"]
    teacher = None
    if cfg.method == "baseline":
        width = int(cfg.baseline.get("features", sets["raw_train"].d))
        ext = RandomExtractor(sets["raw_train"].d, width, seed=cfg.seed + 7,
                              gain=float(cfg.baseline.get("gain", 1.0)))
        train_set, val_set = ext.apply(sets["raw_train"]), ext.apply(sets["raw_val"])
    elif cfg.method in ("distance-match", "cluster-match") and "raw_train" in sets:
        teacher = train_set
        train_set, val_set = sets["raw_train"], sets["raw_val"]
    head = ProjectionHead.init(train_set.d, d, tcfg.seed, bias=tcfg.bias, batchnorm=tcfg.batchnorm,
                               bn_momentum=tcfg.bn_momentum, bn_eps=tcfg.bn_eps)
    res = train(head, train_set, tcfg, val=val_set, teacher=teacher)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.ckpt", res.best)
    write_history_csv(out_dir / "history.csv", res.history)
    emitted = val_set.with_vectors(res.best.head.embed(val_set.vectors))
    return _emit(out_dir, emitted, tcfg.metric)


def _run_prune(cfg, sets, out: Path):
    start = int(cfg.prune.get("start_dim", sets["train"].d))
    tcfg = cfg.train_config(start)
    head = ProjectionHead.init(sets["train"].d, start, tcfg.seed, bias=tcfg.bias,
                               batchnorm=tcfg.batchnorm, bn_momentum=tcfg.bn_momentum, bn_eps=tcfg.bn_eps)
    run = run_pruning(head, sets["train"], tcfg, sets["val"],
                      max_iterations=int(cfg.prune.get("max_iterations", 8)),
                      max_map_drop=float(cfg.prune.get("max_map_drop", 0.05)),
                      min_dim=min(cfg.dims))
    out.mkdir(parents=True, exist_ok=True)
    run.to_json(out / "prune_report.json")
    by_dim = {h.d_out: h for h in run.heads}
    results = {}
    for d in cfg.dims:
        if d not in by_dim:
            results[d] = {"map": None, "mr1": None, "dim": d, "note": "dimension not reached"}
            continue
        h = by_dim[d]
        val = sets["val"]
        results[d] = _emit(out / f"d{d}", val.with_vectors(masked_embed(h, h.mask, val.vectors)),
                           tcfg.metric)
    return results


def summary_table(rows: list[dict]) -> str:
    """Methods as rows, embedding sizes as columns, MAP in the cells."""
    dims = sorted({int(d) for r in rows for d in r["results"]})
    width = max([len(r["name"]) for r in rows] + [6])
    lines = [f"{'method':<{width}} " + " ".join(f"{d:>8}" for d in dims)]
    for r in rows:
        cells = []
        for d in dims:
            v = r["results"].get(str(d), r["results"].get(d))
            cells.append(f"{'n/a':>8}" if v is None or v.get("map") is None else f"{v['map']:>8.3f}")
        lines.append(f"{r['name']:<{width}} " + " ".join(cells))
    return "\n".join(lines)


def execute(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Run every requested dimension and write all artifacts under ``cfg.output``."""
    with OutputDirLock(cfg.output, force):
        out = cfg.output
        (out / "config.resolved.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
        sets = {k: load_embeddings(p) for k, p in cfg.data.items()}
        if cfg.method == "prune":
            results = _run_prune(cfg, sets, out)
        else:
            results = {}
            for d in cfg.dims:
                if cfg.method in REDUCTIONS:
                    results[d] = _run_reduction(cfg, d, sets["train"], sets["val"], out / f"d{d}")
                else:
                    results[d] = _run_training(cfg, d, sets, out / f"d{d}")
        summary = {"name": cfg.name, "method": cfg.method, "loss": cfg.loss,
                   "results": {str(d): results[d] for d in cfg.dims}}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(summary_table([summary]) + "\n")
        return summary
