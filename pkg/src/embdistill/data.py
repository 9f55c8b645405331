"""Embedding sets: binary container I/O, synthetic clique data, batch sampling.

File layout (little-endian)::

    b"EMBD" | u32 version=1 | u32 n | u32 d | n*d float32 (row-major)
    | [extra blocks] | UTF-8 JSON trailer | u64 trailer length

The embedding format has no extra blocks and a trailer of the form
``{"items": [{"id": ..., "clique": int | null}, ...]}``. Reducer and
checkpoint files reuse the same container with their own magic and extra
blocks described under ``trailer["blocks"]``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, SamplingError

EMBEDDING_MAGIC = b"EMBD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_TRAILER_LEN = struct.Struct("<Q")
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """n embedding vectors with unique item IDs and optional clique labels.

    Items whose clique is ``None`` are noise items: retrieval candidates that
    are never queried. Instances are immutable; ``vectors`` is a read-only
    float32 array.
    """

    ids: tuple[str, ...]
    cliques: tuple[int | None, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vec.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vec.shape}")
        ids = tuple(str(i) for i in self.ids)
        cliques = tuple(None if c is None else int(c) for c in self.cliques)
        if len(ids) != vec.shape[0] or len(cliques) != vec.shape[0]:
            raise ValueError(
                f"{vec.shape[0]} vectors but {len(ids)} ids and {len(cliques)} clique labels"
            )
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        if not np.all(np.isfinite(vec)):
            raise ValueError("vectors contain NaN or Inf")
        if vec is self.vectors:
            vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "cliques", cliques)
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def empty(cls, d: int) -> "EmbeddingSet":
        return cls((), (), np.zeros((0, d), dtype=np.float32))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.cliques == other.cliques
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    @cached_property
    def labels(self) -> np.ndarray:
        """Clique labels as int64 with -1 for noise items."""
        return np.array([-1 if c is None else c for c in self.cliques], dtype=np.int64)

    @cached_property
    def clique_members(self) -> dict[int, np.ndarray]:
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(self.cliques):
            if c is not None:
                groups.setdefault(c, []).append(i)
        return {c: np.array(v, dtype=np.int64) for c, v in sorted(groups.items())}

    def labeled(self) -> "EmbeddingSet":
        """Subset without noise items."""
        return self.subset([i for i, c in enumerate(self.cliques) if c is not None])

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(
            tuple(self.ids[i] for i in idx),
            tuple(self.cliques[i] for i in idx),
            self.vectors[idx],
        )

    def with_vectors(self, vectors) -> "EmbeddingSet":
        """Same items, new vectors (any width)."""
        return EmbeddingSet(self.ids, self.cliques, np.asarray(vectors, dtype=np.float32))


# --- binary container -----------------------------------------------------------


def _atomic_write(path: Path, chunks: Sequence[bytes]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def write_container(
    path, magic: bytes, primary: np.ndarray, trailer: dict,
    blocks: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write a container file. ``primary`` is stored as float32; extra blocks
    keep float64 precision when given as float64."""
    path = Path(path)
    primary = np.ascontiguousarray(primary, dtype="<f4")
    if primary.ndim != 2:
        raise ValueError("primary block must be 2-D")
    trailer = dict(trailer)
    chunks = [_HEADER.pack(magic, FORMAT_VERSION, *primary.shape), primary.tobytes()]
    if blocks:
        layout = []
        for name, arr in blocks.items():
            arr = np.asarray(arr)
            code = "f8" if arr.dtype == np.float64 else "f4"
            arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
            layout.append({"name": name, "dtype": code, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
        trailer["blocks"] = layout
    payload = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks += [payload, _TRAILER_LEN.pack(len(payload))]
    _atomic_write(path, chunks)


def read_container(path, magic: bytes):
    """Returns ``(primary float32 array, trailer dict, blocks dict)``."""
    raw = Path(path).read_bytes()
    size = len(raw)
    if size < _HEADER.size + _TRAILER_LEN.size:
        raise FormatError(f"file too short ({size} bytes)", offset=size)
    got_magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (tlen,) = _TRAILER_LEN.unpack_from(raw, size - _TRAILER_LEN.size)
    trailer_start = size - _TRAILER_LEN.size - tlen
    data_start = _HEADER.size
    data_end = data_start + 4 * n * d
    if trailer_start < data_end:
        raise FormatError(
            f"truncated payload: header declares {n}x{d} float32 values "
            f"but only {max(trailer_start - data_start, 0)} bytes remain before the trailer",
            offset=max(trailer_start, data_start),
        )
    try:
        trailer = json.loads(raw[trailer_start: size - _TRAILER_LEN.size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON trailer: {exc}", offset=trailer_start) from None
    if not isinstance(trailer, dict):
        raise FormatError("trailer must be a JSON object", offset=trailer_start)
    primary = np.frombuffer(raw, dtype="<f4", count=n * d, offset=data_start).reshape(n, d)
    blocks = {}
    pos = data_end
    for spec in trailer.get("blocks", []):
        try:
            dt = _DTYPES[spec["dtype"]]
            shape = tuple(int(s) for s in spec["shape"])
            name = spec["name"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed block descriptor {spec!r}", offset=trailer_start) from None
        count = int(np.prod(shape, dtype=np.int64))
        if pos + count * dt.itemsize > trailer_start:
            raise FormatError(f"truncated block {name!r}", offset=pos)
        blocks[name] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape).copy()
        pos += count * dt.itemsize
    if pos != trailer_start:
        raise FormatError(f"{trailer_start - pos} unexpected bytes before the trailer", offset=pos)
    return primary.copy(), trailer, blocks


def save_embeddings(path, es: EmbeddingSet) -> None:
    items = [{"id": i, "clique": c} for i, c in zip(es.ids, es.cliques)]
    write_container(path, EMBEDDING_MAGIC, es.vectors, {"items": items})


def load_embeddings(path) -> EmbeddingSet:
    vectors, trailer, _ = read_container(path, EMBEDDING_MAGIC)
    size = os.path.getsize(path)
    items = trailer.get("items")
    where = size - _TRAILER_LEN.size
    if not isinstance(items, list) or len(items) != vectors.shape[0]:
        raise FormatError(
            f"trailer lists {len(items) if isinstance(items, list) else 'no'} items "
            f"for {vectors.shape[0]} vectors", offset=where,
        )
    ids, cliques = [], []
    for it in items:
        if not isinstance(it, dict) or not isinstance(it.get("id"), str):
            raise FormatError(f"malformed item record {it!r}", offset=where)
        c = it.get("clique")
        if c is not None and (not isinstance(c, int) or isinstance(c, bool)):
            raise FormatError(f"clique must be an integer or null, got {c!r}", offset=where)
        ids.append(it["id"])
        cliques.append(c)
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise FormatError(f"duplicate item id {dup!r}", offset=where)
    return EmbeddingSet(tuple(ids), tuple(cliques), vectors)


def write_manifest(path, train, val, **extra) -> None:
    """``extra`` entries (e.g. ``raw_train``) are written after train/val."""
    lines = [f"train = {train}", f"val = {val}"] + [f"{k} = {v}" for k, v in sorted(extra.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, Path]:
    """Parse ``key = path`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = path'")
        key, value = (s.strip() for s in line.split("=", 1))
        p = Path(value)
        out[key] = p if p.is_absolute() else path.parent / p
    missing = {"train", "val"} - out.keys()
    if missing:
        raise FormatError(f"{path}: manifest lacks {sorted(missing)}")
    return out


# --- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_cliques: int = 200
    num_val_cliques: int = 100
    clique_size_min: int = 2
    clique_size_max: int = 10
    val_clique_size: int | None = None   # fixed evaluation clique size, None: same law as train
    teacher_dim: int = 256
    latent_dim: int | None = None        # intrinsic rank of clique centers
    center_scale: float = 1.0
    noise_scale: float = 0.1
    num_noise_items: int = 0
    size_decay: float = 0.5              # success probability of the truncated geometric
    seed: int = 0

    def validate(self) -> None:
        errs = []
        if self.num_cliques < 0 or self.num_val_cliques < 0:
            errs.append("clique counts must be non-negative")
        if self.clique_size_min < 2:
            errs.append("clique_size_min must be >= 2")
        if self.clique_size_max < self.clique_size_min:
            errs.append("clique_size_max must be >= clique_size_min")
        if self.val_clique_size is not None and self.val_clique_size < 2:
            errs.append("val_clique_size must be >= 2")
        if self.teacher_dim < 1:
            errs.append("teacher_dim must be >= 1")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.teacher_dim:
            errs.append("latent_dim must lie in [1, teacher_dim]")
        if self.center_scale <= 0 or self.noise_scale < 0:
            errs.append("center_scale must be > 0 and noise_scale >= 0")
        if self.num_noise_items < 0:
            errs.append("num_noise_items must be >= 0")
        if not 0.0 < self.size_decay <= 1.0:
            errs.append("size_decay must lie in (0, 1]")
        if errs:
            raise ConfigError("; ".join(errs))


PRESETS: dict[str, SynthConfig] = {
    # clique centers on an 8-dim subspace, center/noise spread ratio 10
    "separable": SynthConfig(
        num_cliques=200, num_val_cliques=100, clique_size_min=2, clique_size_max=10,
        teacher_dim=256, latent_dim=8, center_scale=1.0, noise_scale=0.1,
        num_noise_items=200, size_decay=0.5,
    ),
    # evaluation split shaped like the public benchmark: 1000 x 13 + 2000 noise
    "benchmark-shape": SynthConfig(
        num_cliques=2000, num_val_cliques=1000, clique_size_min=2, clique_size_max=109,
        val_clique_size=13, teacher_dim=256, latent_dim=32, center_scale=1.0,
        noise_scale=0.6, num_noise_items=2000, size_decay=0.2,
    ),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = replace(base, **overrides)
    cfg.validate()
    return cfg


def _clique_sizes(rng: np.random.Generator, count: int, cfg: SynthConfig, fixed: int | None):
    if fixed is not None:
        return np.full(count, fixed, dtype=np.int64)
    support = np.arange(cfg.clique_size_min, cfg.clique_size_max + 1)
    w = (1.0 - cfg.size_decay) ** (support - cfg.clique_size_min)
    return rng.choice(support, size=count, p=w / w.sum())


def _centers(rng: np.random.Generator, count: int, cfg: SynthConfig, basis):
    if basis is None:
        return rng.normal(0.0, cfg.center_scale, size=(count, cfg.teacher_dim))
    k = basis.shape[0]
    z = rng.normal(0.0, cfg.center_scale, size=(count, k))
    # rescale so per-coordinate variance matches the full-rank case
    return z @ basis * np.sqrt(cfg.teacher_dim / k)


def _make_split(rng, prefix, first_label, sizes, cfg, basis, num_noise):
    centers = _centers(rng, len(sizes), cfg, basis)
    ids, cliques, rows = [], [], []
    for c, (size, center) in enumerate(zip(sizes, centers)):
        label = first_label + c
        noise = rng.normal(0.0, cfg.noise_scale, size=(size, cfg.teacher_dim))
        rows.append(center + noise)
        ids += [f"{prefix}{label}_{k}" for k in range(size)]
        cliques += [label] * size
    if num_noise:
        noise_centers = _centers(rng, num_noise, cfg, basis)
        rows.append(noise_centers + rng.normal(0.0, cfg.noise_scale, size=noise_centers.shape))
        ids += [f"{prefix}noise_{k}" for k in range(num_noise)]
        cliques += [None] * num_noise
    vec = np.concatenate(rows) if rows else np.zeros((0, cfg.teacher_dim))
    return EmbeddingSet(tuple(ids), tuple(cliques), vec)


def generate_synthetic(cfg: SynthConfig) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Clique-structured train/validation sets with disjoint clique labels.

    Each member is its clique center plus isotropic Gaussian noise. Noise
    items (no clique) only go into the validation split.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    basis = None
    if cfg.latent_dim is not None:
        q, _ = np.linalg.qr(rng.standard_normal((cfg.teacher_dim, cfg.latent_dim)))
        basis = q.T
    train_sizes = _clique_sizes(rng, cfg.num_cliques, cfg, None)
    val_sizes = _clique_sizes(rng, cfg.num_val_cliques, cfg, cfg.val_clique_size)
    train = _make_split(rng, "t", 0, train_sizes, cfg, basis, 0)
    val = _make_split(rng, "v", cfg.num_cliques, val_sizes, cfg, basis, cfg.num_noise_items)
    return train, val


def generate_transposition_task(cfg: SynthConfig, bins: int = 12) -> dict[str, EmbeddingSet]:
    """Two views of one clique-structured dataset.

    ``raw_*``: bins x frames templates, each item circularly shifted along the
    bin axis by a random amount (a key transposition) plus noise.
    ``train``/``val``: the magnitude spectrum along the bin axis of the same
    items, i.e. the output of an extractor that is already shift-invariant.
    ``cfg.teacher_dim`` sets the raw size and must be a multiple of ``bins``.
    """
    cfg.validate()
    if cfg.teacher_dim % bins:
        raise ConfigError(f"teacher_dim {cfg.teacher_dim} is not a multiple of {bins} bins")
    frames = cfg.teacher_dim // bins
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for split, first, count, fixed, n_noise in (
        ("train", 0, cfg.num_cliques, None, 0),
        ("val", cfg.num_cliques, cfg.num_val_cliques, cfg.val_clique_size, cfg.num_noise_items),
    ):
        sizes = _clique_sizes(rng, count, cfg, fixed)
        labels = np.repeat(np.arange(first, first + count), sizes)
        templates = rng.normal(0.0, cfg.center_scale, size=(count, bins, frames))
        items = templates[labels - first] if count else np.zeros((0, bins, frames))
        if n_noise:
            extra = rng.normal(0.0, cfg.center_scale, size=(n_noise, bins, frames))
            items = np.concatenate([items, extra])
        shifts = rng.integers(0, bins, size=items.shape[0])
        raw = np.stack([np.roll(x, s, axis=0) for x, s in zip(items, shifts)]) if len(items) else items
        raw = raw + rng.normal(0.0, cfg.noise_scale, size=raw.shape)
        spectrum = np.abs(np.fft.rfft(raw, axis=1))
        prefix = "t" if split == "train" else "v"
        ids = [f"{prefix}{c}_{k}" for c, size in zip(range(first, first + count), sizes) for k in range(size)]
        ids += [f"{prefix}noise_{k}" for k in range(n_noise)]
        cliques = [int(c) for c in labels] + [None] * n_noise
        out[f"raw_{split}"] = EmbeddingSet(tuple(ids), tuple(cliques), raw.reshape(len(ids), -1))
        out[split] = EmbeddingSet(tuple(ids), tuple(cliques), spectrum.reshape(len(ids), -1))
    return out


# --- batch sampling -------------------------------------------------------------


@dataclass(frozen=True)
class BatchSpec:
    classes_per_batch: int = 16
    samples_per_class: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.classes_per_batch < 2 or self.samples_per_class < 2:
            raise ConfigError("batches need at least 2 classes and 2 samples per class")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class


def eligible_cliques(es: EmbeddingSet) -> list[int]:
    """Labeled cliques with at least two members (in-batch positives exist)."""
    return [c for c, m in es.clique_members.items() if len(m) >= 2]


def sample_batch(es: EmbeddingSet, spec: BatchSpec, epoch_state: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Row indices for one P x K batch, grouped by class slot.

    ``epoch_state`` is ``(epoch, step)``; together with ``spec.seed`` it fully
    determines the batch. Members are drawn without replacement, except for
    cliques smaller than K.
    """
    eligible = eligible_cliques(es)
    P, K = spec.classes_per_batch, spec.samples_per_class
    if len(eligible) < P:
        raise SamplingError(f"need {P} cliques with >= 2 members, found {len(eligible)}")
    rng = np.random.default_rng([spec.seed, *epoch_state])
    chosen = rng.choice(len(eligible), size=P, replace=False)
    out = np.empty(P * K, dtype=np.int64)
    for slot, ci in enumerate(chosen):
        members = es.clique_members[eligible[ci]]
        pick = rng.choice(len(members), size=K, replace=len(members) < K)
        out[slot * K:(slot + 1) * K] = members[pick]
    return out
