"""Random contiguous zero-masking of modality feature vectors.

For modality ``m`` with feature dimension ``T`` a missing rate ``r`` is drawn
uniformly from that modality's range; ``k = floor(T * r)`` consecutive
entries starting at a uniformly drawn index ``start`` in ``{0, ..., T - k}``
are set to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MODALITIES = ("audio", "video", "language")


class LengthMismatch(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class MissingSpec:
    """Missing-rate range ``(lo, hi)`` for each modality."""

    audio: tuple[float, float] = (0.0, 0.0)
    video: tuple[float, float] = (0.0, 0.0)
    language: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for m in MODALITIES:
            lo, hi = getattr(self, m)
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"{m} missing-rate range [{lo}, {hi}] not within [0, 1]")
            object.__setattr__(self, m, (float(lo), float(hi)))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "MissingSpec":
        return cls((lo, hi), (lo, hi), (lo, hi))

    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (self.audio, self.video, self.language)

    @property
    def is_zero(self) -> bool:
        return all(hi == 0.0 for _, hi in self.ranges())

    def to_dict(self) -> dict[str, list[float]]:
        return {m: list(getattr(self, m)) for m in MODALITIES}


@dataclass(frozen=True)
class MaskPlan:
    start: int
    length: int
    dim: int

    @property
    def is_noop(self) -> bool:
        return self.length == 0


def sample_rates(spec: MissingSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(lo + (hi - lo) * rng.random() for lo, hi in spec.ranges())


def plan_mask(dim: int, rate: float, rng: np.random.Generator) -> MaskPlan:
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate {rate} outside [0, 1]")
    k = math.floor(dim * rate)
    if k == 0:
        # no-op masks consume no randomness
        return MaskPlan(0, 0, dim)
    if k == dim:
        return MaskPlan(0, k, dim)
    return MaskPlan(int(rng.integers(0, dim - k + 1)), k, dim)


def apply_mask(features: np.ndarray, plan: MaskPlan) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != plan.dim:
        raise LengthMismatch(f"vector length {x.shape[-1]} != plan dimension {plan.dim}")
    out = x.copy()
    if plan.length:
        out[..., plan.start : plan.start + plan.length] = 0.0
    return out


def apply_plans(features: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Row-wise masking of an (n, T) matrix with per-row spans."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(starts) != x.shape[0] or len(lengths) != x.shape[0]:
        raise LengthMismatch("need one (start, length) per row")
    cols = np.arange(x.shape[1])
    starts = np.asarray(starts)[:, None]
    hit = (cols >= starts) & (cols < starts + np.asarray(lengths)[:, None])
    return np.where(hit, 0.0, x)


def draw_plans(
    n: int,
    dims: Sequence[int],
    spec: MissingSpec,
    rng: np.random.Generator,
    granularity: str = "per_sample",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw masks for ``n`` samples.

    Returns ``(rates, starts, lengths)``, each of shape (n, 3) with columns
    audio/video/language.  Per sample the draw order is: three rates, then
    one plan per modality.
    """
    if granularity not in ("per_sample", "per_batch"):
        raise ValueError(f"unknown granularity {granularity!r}")
    rates = np.zeros((n, 3))
    starts = np.zeros((n, 3), dtype=np.int64)
    lengths = np.zeros((n, 3), dtype=np.int64)
    rows = range(n) if granularity == "per_sample" else range(1 if n else 0)
    for i in rows:
        r = sample_rates(spec, rng)
        for j, (dim, rate) in enumerate(zip(dims, r)):
            plan = plan_mask(dim, rate, rng)
            rates[i, j], starts[i, j], lengths[i, j] = rate, plan.start, plan.length
    if granularity == "per_batch" and n > 1:
        rates[1:], starts[1:], lengths[1:] = rates[0], starts[0], lengths[0]
    return rates, starts, lengths


def transform_batch(
    features: Sequence[np.ndarray],
    spec: MissingSpec,
    rng: np.random.Generator,
    granularity: str = "per_sample",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask each modality of an (audio, video, language) batch.

    Labels are not touched, so they are not passed in.
    """
    if len(features) != 3:
        raise LengthMismatch("expected audio, video and language matrices")
    n = features[0].shape[0]
    if any(f.ndim != 2 or f.shape[0] != n for f in features):
        raise LengthMismatch("modalities disagree on batch size")
    dims = [f.shape[1] for f in features]
    _, starts, lengths = draw_plans(n, dims, spec, rng, granularity)
    return tuple(apply_plans(f, starts[:, j], lengths[:, j]) for j, f in enumerate(features))
