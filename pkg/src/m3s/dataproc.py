"""Datasets: synthetic generation, CSV ingestion, splitting and frozen masks."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .masking import MissingSpec, apply_plans, draw_plans, make_rng

SPLITS = ("train", "valid", "test")


class ConfigInvalid(ValueError):
    pass


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ParseError(DatasetError):
    pass


class DimMismatch(DatasetError):
    pass


class MissingColumn(DatasetError):
    pass


class EmptySplit(DatasetError):
    pass


@dataclass(frozen=True)
class MultimodalSample:
    audio: np.ndarray
    video: np.ndarray
    language: np.ndarray
    label: float


@dataclass(frozen=True)
class FrozenMasks:
    """One (rate, start, length) triple per modality per sample; arrays (n, 3)."""

    rates: np.ndarray
    starts: np.ndarray
    lengths: np.ndarray


@dataclass(frozen=True)
class Split:
    audio: np.ndarray
    video: np.ndarray
    language: np.ndarray
    labels: np.ndarray
    masks: FrozenMasks | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def features(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.audio, self.video, self.language)

    def sample(self, i: int) -> MultimodalSample:
        return MultimodalSample(self.audio[i], self.video[i], self.language[i], self.labels[i])

    def __iter__(self) -> Iterator[MultimodalSample]:
        return (self.sample(i) for i in range(len(self)))

    def take(self, idx) -> "Split":
        masks = None
        if self.masks is not None:
            masks = FrozenMasks(self.masks.rates[idx], self.masks.starts[idx], self.masks.lengths[idx])
        return Split(self.audio[idx], self.video[idx], self.language[idx], self.labels[idx], masks)

    def masked_features(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features with the frozen masks applied (unchanged if none are frozen)."""
        if self.masks is None:
            return self.features
        return tuple(
            apply_plans(f, self.masks.starts[:, j], self.masks.lengths[:, j])
            for j, f in enumerate(self.features)
        )


@dataclass(frozen=True)
class Dataset:
    dims: tuple[int, int, int]
    task: str
    num_classes: int
    label_range: tuple[float, float]
    train: Split
    valid: Split
    test: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.split(s)) for s in SPLITS)


@dataclass(frozen=True)
class SyntheticConfig:
    dims: tuple[int, int, int] = (20, 20, 30)
    n: tuple[int, int, int] = (1368, 456, 457)
    task: str = "regression"
    num_classes: int = 2
    noise: float = 0.1
    redundancy: float = 0.8
    latent_dim: int = 4
    private_dim: int = 4
    seed: int = 0

    def validate(self) -> None:
        if len(self.n) != 3 or any(int(k) < 1 for k in self.n):
            raise ConfigInvalid(f"every split needs at least one sample, got {self.n}")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ConfigInvalid(f"dims must be three positive ints, got {self.dims}")
        if self.noise < 0:
            raise ConfigInvalid("noise must be >= 0")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ConfigInvalid("redundancy must lie in [0, 1]")
        if self.task not in ("regression", "classification"):
            raise ConfigInvalid(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigInvalid("classification needs num_classes >= 2")
        if self.latent_dim < 1 or self.private_dim < 0:
            raise ConfigInvalid("latent_dim must be >= 1 and private_dim >= 0")


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Latent-factor multimodal data.

    A latent ``z ~ U(-1, 1)^d`` per sample; modality ``m`` is
    ``z @ W_m + (1 - redundancy) * u_m @ P_m + noise * eps`` with a
    modality-private ``u_m ~ N(0, I)``.  The regression label is ``z @ v`` with
    ``|v|_1 = 1`` so it already lies in [-1, 1]; classification cuts that
    interval into ``num_classes`` equal bins.
    """
    config.validate()
    rng = make_rng(config.seed)
    d = config.latent_dim
    v = rng.standard_normal(d)
    v /= np.abs(v).sum()
    maps = [rng.standard_normal((d, t)) / math.sqrt(d) for t in config.dims]
    private = [rng.standard_normal((config.private_dim, t)) / math.sqrt(max(config.private_dim, 1)) for t in config.dims]

    total = sum(config.n)
    z = rng.uniform(-1.0, 1.0, size=(total, d))
    feats = []
    for W, P, t in zip(maps, private, config.dims):
        u = rng.standard_normal((total, config.private_dim))
        eps = rng.standard_normal((total, t))
        feats.append(z @ W + (1.0 - config.redundancy) * (u @ P) + config.noise * eps)
    score = np.clip(z @ v, -1.0, 1.0)
    if config.task == "regression":
        labels = score
    else:
        bins = np.floor((score + 1.0) / 2.0 * config.num_classes)
        labels = np.clip(bins, 0, config.num_classes - 1).astype(np.float64)

    splits = []
    lo = 0
    for k in config.n:
        idx = slice(lo, lo + k)
        splits.append(Split(feats[0][idx], feats[1][idx], feats[2][idx], labels[idx]))
        lo += k
    return Dataset(
        dims=tuple(config.dims),
        task=config.task,
        num_classes=config.num_classes if config.task == "classification" else 1,
        label_range=(-1.0, 1.0),
        train=splits[0],
        valid=splits[1],
        test=splits[2],
    )


def split(
    features: Sequence[np.ndarray],
    labels: np.ndarray,
    ratios: Sequence[float],
    seed: int,
    **header,
) -> Dataset:
    """Shuffle and partition unsplit data into train/valid/test.

    Valid and test get ``floor(n * ratio)`` samples; train takes the rest.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigInvalid(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(labels)
    perm = make_rng(seed).permutation(n)
    n_valid = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_valid - n_test
    parts = np.split(perm, [n_train, n_train + n_valid])
    a, v, l = (np.asarray(f, dtype=np.float64) for f in features)
    labels = np.asarray(labels, dtype=np.float64)
    made = [Split(a[p], v[p], l[p], labels[p]) for p in parts]
    header.setdefault("dims", (a.shape[1], v.shape[1], l.shape[1]))
    header.setdefault("task", "regression")
    header.setdefault("num_classes", 1)
    header.setdefault("label_range", (float(labels.min(initial=0.0)), float(labels.max(initial=0.0))))
    return Dataset(train=made[0], valid=made[1], test=made[2], **header)


def freeze_masks(
    dataset: Dataset,
    spec: MissingSpec,
    seed: int,
    splits: Sequence[str] = SPLITS,
) -> Dataset:
    """Draw one mask per modality per sample, once, for the named splits."""
    rng = make_rng(seed)
    updates = {}
    for name in splits:
        s = dataset.split(name)
        rates, starts, lengths = draw_plans(len(s), dataset.dims, spec, rng)
        updates[name] = replace(s, masks=FrozenMasks(rates, starts, lengths))
    return replace(dataset, **updates)


# CSV schema: header "a_0..a_{Ta-1},v_0..v_{Tv-1},l_0..l_{Tl-1},label,split"
# values written with repr() so float64 round-trips exactly.


def _columns(dims: Sequence[int]) -> list[str]:
    cols = []
    for prefix, t in zip("avl", dims):
        cols += [f"{prefix}_{i}" for i in range(t)]
    return cols + ["label", "split"]


def dump_csv(dataset: Dataset) -> str:
    lines = [",".join(_columns(dataset.dims))]
    for name in SPLITS:
        s = dataset.split(name)
        for i in range(len(s)):
            vals = np.concatenate([s.audio[i], s.video[i], s.language[i], [s.labels[i]]])
            lines.append(",".join(repr(float(x)) for x in vals) + f",{name}")
    return "\n".join(lines) + "\n"


def save_csv(dataset: Dataset, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(dump_csv(dataset))
    os.replace(tmp, path)


def _parse_header(cols: list[str]) -> tuple[int, int, int]:
    for required in ("label", "split"):
        if required not in cols:
            raise MissingColumn(f"missing column {required!r}", 1)
    dims = []
    pos = 0
    for prefix in "avl":
        t = 0
        while pos < len(cols) and cols[pos] == f"{prefix}_{t}":
            t += 1
            pos += 1
        if t == 0:
            raise MissingColumn(f"no {prefix}_* feature columns", 1)
        dims.append(t)
    if cols[pos:] != ["label", "split"]:
        raise ParseError(f"unexpected columns after features: {cols[pos:]}", 1)
    return tuple(dims)


def parse_csv(text: str, task: str = "regression", num_classes: int | None = None) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise MissingColumn("empty file", 1)
    dims = _parse_header([c.strip() for c in lines[0].split(",")])
    width = sum(dims) + 2
    rows: dict[str, list[list[float]]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise DimMismatch(f"expected {width} fields, got {len(cells)}", lineno)
        name = cells[-1].strip()
        if name not in rows:
            raise ParseError(f"unknown split {name!r}", lineno)
        try:
            values = [float(c) for c in cells[:-1]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not all(math.isfinite(x) for x in values):
            raise ParseError("non-finite value", lineno)
        rows[name].append(values)
    empty = [s for s in SPLITS if not rows[s]]
    if empty:
        raise EmptySplit(f"no samples for split(s) {', '.join(empty)}")
    cuts = np.cumsum(dims)
    made = {}
    for name in SPLITS:
        arr = np.array(rows[name], dtype=np.float64)
        a, v, l, y = np.split(arr, [cuts[0], cuts[1], cuts[2]], axis=1)
        made[name] = Split(a, v, l, y[:, 0].copy())
    all_labels = np.concatenate([made[s].labels for s in SPLITS])
    if task == "classification":
        if np.any(all_labels != np.round(all_labels)) or np.any(all_labels < 0):
            raise ParseError("classification labels must be non-negative integers")
        num_classes = num_classes or int(all_labels.max()) + 1
    else:
        num_classes = 1
    return Dataset(
        dims=dims,
        task=task,
        num_classes=num_classes,
        label_range=(float(all_labels.min()), float(all_labels.max())),
        **made,
    )


def load_csv(path, task: str = "regression", num_classes: int | None = None) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_csv(fh.read(), task, num_classes)
