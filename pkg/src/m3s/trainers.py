"""Training regimes: ORIG (frozen masks), SPL-TRN (fresh masks) and M3S.

M3S follows the meta-sampling loop: two disjoint batches are masked
independently, the support batch drives ``K`` plain-SGD steps from the
current parameters to an adapted copy, and the query-batch gradient taken at
the adapted copy updates the original parameters through the outer
optimizer (first order: nothing is differentiated through the inner steps).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import evalstats
from .dataproc import ConfigInvalid, Dataset, Split
from .diffcore import ShapeMismatch
from .masking import MissingSpec, make_rng, transform_batch
from .model import ModelConfig, Parameters, clone, init_params, loss_and_grads, loss_value, predict_labels

METHODS = ("orig", "spl_trn", "m3s")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 2e-4
    beta: float = 1e-4
    inner_steps: int = 1
    batch_size: int = 32
    epochs: int = 20
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    granularity: str = "per_sample"
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigInvalid("learning rates must be >= 0")
        if self.inner_steps < 1:
            raise ConfigInvalid("inner_steps (K) must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigInvalid("batch_size and epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigInvalid(f"unknown optimizer {self.optimizer!r}")
        if self.granularity not in ("per_sample", "per_batch"):
            raise ConfigInvalid(f"unknown granularity {self.granularity!r}")


# optimizers


def _check_aligned(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    if list(params) != list(grads):
        missing = set(params) ^ set(grads)
        raise ShapeMismatch(f"parameter/gradient names differ: {sorted(missing)}")
    for k, v in params.items():
        if np.shape(grads[k]) != np.shape(v):
            raise ShapeMismatch(f"{k}: gradient {np.shape(grads[k])} vs parameter {np.shape(v)}")


def sgd_step(params: Parameters, grads: Mapping[str, np.ndarray], lr: float) -> Parameters:
    _check_aligned(params, grads)
    return {k: v - lr * grads[k] for k, v in params.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, clone(self.m), clone(self.v))


def adam_step(
    state: AdamState,
    params: Parameters,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[AdamState, Parameters]:
    """One bias-corrected Adam step; neither ``state`` nor ``params`` is mutated."""
    _check_aligned(params, grads)
    if state.m and (list(state.m) != list(params) or any(state.m[k].shape != params[k].shape for k in params)):
        raise ShapeMismatch("optimizer state does not match parameters")
    b1, b2 = betas
    t = state.step + 1
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v[k] = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(t, m, v), new


class OuterOptimizer:
    """Applies gradients to parameters with SGD or Adam at rate ``beta``."""

    def __init__(self, meta: MetaConfig):
        self.meta = meta
        self.state = AdamState()

    def apply(self, params: Parameters, grads: Mapping[str, np.ndarray]) -> Parameters:
        if self.meta.optimizer == "sgd":
            return sgd_step(params, grads, self.meta.beta)
        self.state, params = adam_step(
            self.state, params, grads, self.meta.beta, self.meta.adam_betas, self.meta.adam_eps
        )
        return params


# Algorithm steps. ``loss_grad(params, batch) -> (loss, grads)`` abstracts the
# model so the meta steps can be checked on hand-computable scalar losses.

LossGrad = Callable[[Parameters, object], tuple[float, dict]]


def inner_adapt(params: Parameters, support, alpha: float, inner_steps: int, loss_grad: LossGrad) -> Parameters:
    """K plain gradient-descent steps on the same support batch; returns theta*."""
    if inner_steps < 1:
        raise ConfigInvalid("inner_steps must be >= 1")
    theta = clone(params)
    for _ in range(inner_steps):
        _, grads = loss_grad(theta, support)
        theta = sgd_step(theta, grads, alpha)
    return theta


def meta_update(
    params: Parameters,
    adapted: Parameters,
    query,
    optimizer: OuterOptimizer,
    loss_grad: LossGrad,
) -> tuple[Parameters, float]:
    """Apply the query-loss gradient taken at ``adapted`` to ``params``.

    Returns the new parameters and the query loss at ``adapted``.
    """
    _check_aligned(params, adapted)
    loss, grads = loss_grad(adapted, query)
    return optimizer.apply(params, grads), loss


# batching


@dataclass(frozen=True)
class Batch:
    features: tuple[np.ndarray, np.ndarray, np.ndarray]
    labels: np.ndarray


def model_loss_grad(config: ModelConfig) -> LossGrad:
    def fn(params, batch: Batch):
        return loss_and_grads(params, config, batch.features, batch.labels)

    return fn


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays for one shuffled pass; the last batch may be short."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


class _Streams:
    """Independent random streams for shuffling and the two masking roles."""

    def __init__(self, seed: int):
        root = np.random.SeedSequence(seed)
        shuffle, query, support = root.spawn(3)
        self.shuffle = np.random.Generator(np.random.PCG64(shuffle))
        self.query = np.random.Generator(np.random.PCG64(query))
        self.support = np.random.Generator(np.random.PCG64(support))


def _schedule(n: int, meta: MetaConfig, rng, paired: bool) -> Iterator[tuple[np.ndarray | None, np.ndarray]]:
    """Yield (support_idx, query_idx) per iteration.

    Paired schedules take batches two at a time (support, query) and drop a
    trailing unpaired batch; unpaired schedules yield (None, batch).
    """
    batches = epoch_batches(n, meta.batch_size, rng)
    if not paired:
        for b in batches:
            yield None, b
        return
    for i in range(0, len(batches) - 1, 2):
        yield batches[i], batches[i + 1]


# evaluation


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    test_loss: float
    valid_metrics: dict[str, float]
    test_metrics: dict[str, float]
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError("epochs must be logged in order")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, include_time: bool = False) -> str:
        """CSV: epoch, train_loss, valid_loss, test_loss, valid_<m>..., test_<m>...

        Wall-clock seconds are left out by default so the file is
        bit-reproducible per seed.
        """
        if not self.records:
            return ""
        keys = list(self.records[0].test_metrics)
        header = ["epoch", "train_loss", "valid_loss", "test_loss"]
        header += [f"valid_{k}" for k in keys] + [f"test_{k}" for k in keys]
        if include_time:
            header.append("seconds")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.records:
            row = [r.epoch, repr(r.train_loss), repr(r.valid_loss), repr(r.test_loss)]
            row += [repr(r.valid_metrics[k]) for k in keys] + [repr(r.test_metrics[k]) for k in keys]
            if include_time:
                row.append(f"{r.seconds:.3f}")
            w.writerow(row)
        return buf.getvalue()


def evaluate(params: Parameters, config: ModelConfig, split: Split) -> tuple[float, dict[str, float]]:
    """Loss and metrics on a split's frozen-mask view."""
    feats = split.masked_features()
    loss = loss_value(params, config, feats, split.labels)
    preds = predict_labels(params, config, feats)
    if config.head == "regression":
        metrics = evalstats.regression_report(preds, split.labels)
    else:
        metrics = evalstats.classification_report(preds, split.labels, config.num_classes)
    return loss, metrics


def _check_compatible(config: ModelConfig, dataset: Dataset) -> None:
    if tuple(config.dims) != tuple(dataset.dims):
        raise ConfigInvalid(f"model dims {config.dims} != dataset dims {dataset.dims}")
    if config.head == "regression" and dataset.task != "regression":
        raise ConfigInvalid("regression head on a classification dataset")
    if config.head == "classification" and (
        dataset.task != "classification" or config.num_classes != dataset.num_classes
    ):
        raise ConfigInvalid("classification head does not match the dataset")


def _train(
    method: str,
    config: ModelConfig,
    dataset: Dataset,
    spec: MissingSpec | None,
    meta: MetaConfig,
    aligned: bool = False,
    on_iteration: Callable[[Parameters], None] | None = None,
) -> tuple[Parameters, TrainLog]:
    meta.validate()
    _check_compatible(config, dataset)
    if method == "orig" and dataset.train.masks is None:
        raise ConfigInvalid("ORIG training needs frozen masks on the training split")

    streams = _Streams(meta.seed)
    params = init_params(config, meta.seed)
    optimizer = OuterOptimizer(meta)
    loss_grad = model_loss_grad(config)
    train = dataset.train
    frozen = train.masked_features() if method == "orig" else None
    paired = method == "m3s" or aligned
    log = TrainLog()

    def fresh(idx, rng) -> Batch:
        feats = tuple(f[idx] for f in train.features)
        return Batch(transform_batch(feats, spec, rng, meta.granularity), train.labels[idx])

    for epoch in range(1, meta.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for support_idx, query_idx in _schedule(len(train), meta, streams.shuffle, paired):
            if method == "orig":
                query = Batch(tuple(f[query_idx] for f in frozen), train.labels[query_idx])
            else:
                query = fresh(query_idx, streams.query)
            if method == "m3s":
                support = fresh(support_idx, streams.support)
                adapted = inner_adapt(params, support, meta.alpha, meta.inner_steps, loss_grad)
            else:
                adapted = params
            params, loss = meta_update(params, adapted, query, optimizer, loss_grad)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite query loss at epoch {epoch}")
            losses.append(loss)
            if on_iteration is not None:
                on_iteration(params)
        valid_loss, valid_metrics = evaluate(params, config, dataset.valid)
        test_loss, test_metrics = evaluate(params, config, dataset.test)
        log.append(
            EpochRecord(
                epoch,
                float(np.mean(losses)) if losses else float("nan"),
                valid_loss,
                test_loss,
                valid_metrics,
                test_metrics,
                time.perf_counter() - t0,
            )
        )
    return params, log


def train_m3s(config: ModelConfig, dataset: Dataset, spec: MissingSpec, meta: MetaConfig, **kw):
    return _train("m3s", config, dataset, spec, meta, **kw)


def train_spl_trn(config: ModelConfig, dataset: Dataset, spec: MissingSpec, meta: MetaConfig, **kw):
    """Fresh masks on every visit, one optimizer loop at rate beta.

    ``aligned=True`` walks batches in the same (support, query) pairs as M3S
    and trains on the query batch only, so the two regimes can be compared
    step for step.
    """
    return _train("spl_trn", config, dataset, spec, meta, **kw)


def train_orig(config: ModelConfig, dataset: Dataset, meta: MetaConfig, **kw):
    """Plain training on the per-sample masks frozen into ``dataset.train``."""
    return _train("orig", config, dataset, None, meta, **kw)


def train(method: str, config: ModelConfig, dataset: Dataset, spec: MissingSpec, meta: MetaConfig, **kw):
    if method == "m3s":
        return train_m3s(config, dataset, spec, meta, **kw)
    if method == "spl_trn":
        return train_spl_trn(config, dataset, spec, meta, **kw)
    if method == "orig":
        return train_orig(config, dataset, meta, **kw)
    raise ConfigInvalid(f"unknown method {method!r}")
