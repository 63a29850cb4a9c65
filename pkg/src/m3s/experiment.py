"""Experiment configuration and the compare / sweep / adapt protocols.

Configs are TOML files (``key = value`` lines with dotted ``[sections]``);
see the README for every key.  All runs score every method on the same
validation/test views, masked once with the test missing spec at
``missing.eval_seed``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evalstats
from .dataproc import ConfigInvalid, Dataset, SyntheticConfig, freeze_masks, generate_synthetic, load_csv
from .masking import MODALITIES, MissingSpec
from .model import ModelConfig, save_params
from .trainers import METHODS, MetaConfig, TrainLog, train

DEFAULT_EVAL_SEED = 20230101


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    data_path: str | None = None
    data_source: str = "synthetic"
    encoder_hidden: tuple[tuple[int, ...], ...] = ((16,), (16,), (16,))
    fusion_hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    meta: MetaConfig = field(default_factory=MetaConfig)
    method: str = "m3s"
    methods: tuple[str, ...] = METHODS
    aligned: bool = False
    train_missing: MissingSpec = field(default_factory=lambda: MissingSpec.uniform(0.4, 0.6))
    test_missing: MissingSpec = field(default_factory=lambda: MissingSpec.uniform(0.4, 0.6))
    eval_seed: int = DEFAULT_EVAL_SEED
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    jobs: int = 1
    levels: tuple[tuple[float, float], ...] = ()

    def model_config(self, dataset: Dataset) -> ModelConfig:
        head = "regression" if dataset.task == "regression" else "classification"
        return ModelConfig(
            dims=tuple(dataset.dims),
            encoder_hidden=self.encoder_hidden,
            fusion_hidden=self.fusion_hidden,
            head=head,
            num_classes=dataset.num_classes,
            activation=self.activation,
        )


# parsing


def _spec(value: Any, where: str) -> MissingSpec:
    """Accept ``[lo, hi]`` for all modalities or a table of per-modality ranges."""
    try:
        if isinstance(value, Mapping):
            unknown = set(value) - set(MODALITIES)
            if unknown:
                raise ConfigInvalid(f"{where}: unknown modalities {sorted(unknown)}")
            return MissingSpec(**{m: tuple(value.get(m, (0.0, 0.0))) for m in MODALITIES})
        lo, hi = value
        return MissingSpec.uniform(float(lo), float(hi))
    except ConfigInvalid:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


def parse_level(text: str) -> tuple[float, float]:
    """``"0.4-0.6"`` or ``"0.4,0.6"`` -> (0.4, 0.6)."""
    parts = text.replace(",", "-").split("-")
    if len(parts) != 2:
        raise ConfigInvalid(f"bad missing-rate level {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigInvalid(f"bad missing-rate level {text!r}") from None
    return check_level(lo, hi)


def check_level(lo: float, hi: float) -> tuple[float, float]:
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigInvalid(f"level [{lo}, {hi}] not within [0, 1] or lo > hi")
    return float(lo), float(hi)


_KNOWN = {
    "data": {"source", "path", "dims", "n", "task", "num_classes", "noise", "redundancy", "latent_dim", "private_dim", "seed"},
    "model": {"encoder_hidden", "fusion_hidden", "activation"},
    "train": {
        "method", "methods", "alpha", "beta", "inner_steps", "batch_size", "epochs",
        "optimizer", "adam_betas", "adam_eps", "granularity", "aligned",
    },
    "missing": {"train", "test", "eval_seed"},
    "run": {"seeds", "out", "jobs"},
    "sweep": {"levels"},
}


def config_from_dict(raw: Mapping[str, Any], base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    for section, body in raw.items():
        if section not in _KNOWN or not isinstance(body, Mapping):
            raise ConfigInvalid(f"unknown config section {section!r}")
        extra = set(body) - _KNOWN[section]
        if extra:
            raise ConfigInvalid(f"unknown keys in [{section}]: {sorted(extra)}")
    d, mo, tr = raw.get("data", {}), raw.get("model", {}), raw.get("train", {})
    mi, ru, sw = raw.get("missing", {}), raw.get("run", {}), raw.get("sweep", {})
    try:
        data = SyntheticConfig(
            dims=tuple(int(x) for x in d.get("dims", (20, 20, 30))),
            n=tuple(int(x) for x in d.get("n", (1368, 456, 457))),
            task=d.get("task", "regression"),
            num_classes=int(d.get("num_classes", 2)),
            noise=float(d.get("noise", 0.1)),
            redundancy=float(d.get("redundancy", 0.8)),
            latent_dim=int(d.get("latent_dim", 4)),
            private_dim=int(d.get("private_dim", 4)),
            seed=int(d.get("seed", 0)),
        )
        source = d.get("source", "synthetic")
        if source not in ("synthetic", "csv"):
            raise ConfigInvalid(f"data.source must be 'synthetic' or 'csv', got {source!r}")
        path = d.get("path")
        if path is not None:
            path = str(Path(base_dir) / path)
        if source == "csv" and path is None:
            raise ConfigInvalid("data.source = 'csv' needs data.path")
        if source == "synthetic":
            data.validate()
        method = tr.get("method", "m3s")
        methods = tuple(tr.get("methods", METHODS))
        for m in (method, *methods):
            if m not in METHODS:
                raise ConfigInvalid(f"unknown method {m!r}; expected one of {METHODS}")
        if not methods:
            raise ConfigInvalid("train.methods is empty")
        uses_m3s = method == "m3s" or "m3s" in methods
        if not uses_m3s and "alpha" in tr:
            raise ConfigInvalid("train.alpha only applies to method m3s")
        meta = MetaConfig(
            alpha=float(tr.get("alpha", MetaConfig.alpha)),
            beta=float(tr.get("beta", MetaConfig.beta)),
            inner_steps=int(tr.get("inner_steps", MetaConfig.inner_steps)),
            batch_size=int(tr.get("batch_size", MetaConfig.batch_size)),
            epochs=int(tr.get("epochs", MetaConfig.epochs)),
            optimizer=tr.get("optimizer", MetaConfig.optimizer),
            adam_betas=tuple(float(x) for x in tr.get("adam_betas", MetaConfig.adam_betas)),
            adam_eps=float(tr.get("adam_eps", MetaConfig.adam_eps)),
            granularity=tr.get("granularity", MetaConfig.granularity),
        )
        meta.validate()
        seeds = tuple(int(s) for s in ru.get("seeds", (0,)))
        if not seeds:
            raise ConfigInvalid("run.seeds is empty")
        levels = tuple(check_level(float(lo), float(hi)) for lo, hi in sw.get("levels", ()))
        cfg = ExperimentConfig(
            data=data,
            data_path=path,
            data_source=source,
            encoder_hidden=tuple(tuple(int(h) for h in enc) for enc in mo.get("encoder_hidden", ((16,),) * 3)),
            fusion_hidden=tuple(int(h) for h in mo.get("fusion_hidden", (32,))),
            activation=mo.get("activation", "relu"),
            meta=meta,
            method=method,
            methods=methods,
            aligned=bool(tr.get("aligned", False)),
            train_missing=_spec(mi.get("train", (0.4, 0.6)), "missing.train"),
            test_missing=_spec(mi.get("test", mi.get("train", (0.4, 0.6))), "missing.test"),
            eval_seed=int(mi.get("eval_seed", DEFAULT_EVAL_SEED)),
            seeds=seeds,
            out=str(Path(base_dir) / ru.get("out", "runs")),
            jobs=max(1, int(ru.get("jobs", 1))),
            levels=levels,
        )
        # catch bad model settings before any training starts
        ModelConfig(
            dims=data.dims, encoder_hidden=cfg.encoder_hidden, fusion_hidden=cfg.fusion_hidden,
            activation=cfg.activation,
        )
        return cfg
    except ConfigInvalid:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigInvalid(str(exc)) from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read a TOML config; relative paths in it resolve against the current directory."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    return config_from_dict(raw)


# outputs


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


# running


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_source == "csv":
        return load_csv(cfg.data_path, cfg.data.task, cfg.data.num_classes if cfg.data.task == "classification" else None)
    return generate_synthetic(cfg.data)


def eval_view(dataset: Dataset, spec: MissingSpec, eval_seed: int) -> Dataset:
    """Freeze validation/test masks once; every method is scored on this view."""
    return freeze_masks(dataset, spec, eval_seed, ("valid", "test"))


def view_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for name in ("valid", "test"):
        s = dataset.split(name)
        for f in s.masked_features():
            h.update(np.ascontiguousarray(f).tobytes())
        h.update(np.ascontiguousarray(s.labels).tobytes())
    return h.hexdigest()


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: dict[str, float]
    log: TrainLog
    params: dict
    view_hash: str


def run_one(cfg: ExperimentConfig, dataset: Dataset, method: str, seed: int) -> RunResult:
    """Train ``method`` at ``seed`` on a dataset whose eval masks are frozen."""
    model = cfg.model_config(dataset)
    meta = replace(cfg.meta, seed=seed)
    if method != "m3s":
        meta = replace(meta, alpha=0.0)
    data = dataset
    if method == "orig":
        data = freeze_masks(dataset, cfg.train_missing, seed, ("train",))
    params, log = train(method, model, data, cfg.train_missing, meta, aligned=cfg.aligned)
    last = log.records[-1]
    metrics = {"Loss": last.test_loss}
    if model.head == "regression":
        metrics["MSE"] = last.test_loss
    metrics.update(last.test_metrics)
    return RunResult(method, seed, metrics, log, params, view_hash(dataset))


def _run_job(args):
    cfg, dataset, method, seed = args
    return run_one(cfg, dataset, method, seed)


def run_grid(cfg: ExperimentConfig, dataset: Dataset, methods: Sequence[str], seeds: Sequence[int]) -> list[RunResult]:
    jobs = [(cfg, dataset, m, s) for m in methods for s in seeds]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = math.fsum(arr) / arr.size
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def p_value(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Welch p-value; identical streams give 1, other degenerate cases None."""
    if list(a) == list(b):
        return 1.0
    try:
        return evalstats.t_test_two_tailed(a, b)
    except evalstats.DegenerateSample:
        return None


def build_report(results: Sequence[RunResult], cfg: ExperimentConfig, tag: str) -> dict:
    methods = list(dict.fromkeys(r.method for r in results))
    seeds = list(dict.fromkeys(r.seed for r in results))
    keys = list(results[0].metrics)
    runs = {m: {str(r.seed): r.metrics for r in results if r.method == m} for m in methods}
    summary = {}
    for m in methods:
        summary[m] = {}
        for k in keys:
            mean, std = _mean_std([runs[m][str(s)][k] for s in seeds])
            summary[m][k] = {"mean": mean, "std": std}
    report = {
        "protocol": {
            "tag": tag,
            "train_missing": cfg.train_missing.to_dict(),
            "test_missing": cfg.test_missing.to_dict(),
            "eval_seed": cfg.eval_seed,
            "seeds": seeds,
            "alpha": cfg.meta.alpha,
            "beta": cfg.meta.beta,
            "inner_steps": cfg.meta.inner_steps,
            "batch_size": cfg.meta.batch_size,
            "epochs": cfg.meta.epochs,
            "optimizer": cfg.meta.optimizer,
        },
        "methods": methods,
        "metrics": keys,
        "runs": runs,
        "summary": summary,
        "eval_view_sha256": {m: next(r.view_hash for r in results if r.method == m) for m in methods},
    }
    if "orig" in methods and len(methods) > 1:
        report["delta_vs_orig"] = {
            m: {k: summary[m][k]["mean"] - summary["orig"][k]["mean"] for k in keys}
            for m in methods
            if m != "orig"
        }
        if len(seeds) >= 2:
            report["p_values_vs_orig"] = {
                m: {k: p_value([runs[m][str(s)][k] for s in seeds], [runs["orig"][str(s)][k] for s in seeds]) for k in keys}
                for m in methods
                if m != "orig"
            }
    return report


def format_table(report: dict) -> str:
    """Aligned text table: mean +- std per method, then delta and p rows."""
    keys = report["metrics"]
    header = ["Method", *keys]
    rows = []
    for m in report["methods"]:
        s = report["summary"][m]
        rows.append([m, *(f"{s[k]['mean']:.4f} +- {s[k]['std']:.4f}" for k in keys)])
    for m, d in report.get("delta_vs_orig", {}).items():
        rows.append([f"delta({m} - orig)", *(f"{d[k]:+.4f}" for k in keys)])
    for m, p in report.get("p_values_vs_orig", {}).items():
        rows.append([f"p({m} vs orig)", *("n/a" if p[k] is None else f"{p[k]:.4g}" for k in keys)])
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    title = f"protocol: {report['protocol']['tag']}"
    return "\n".join([title, lines[0], "-" * len(lines[0]), *lines[1:]]) + "\n"


def compare(cfg: ExperimentConfig, dataset: Dataset, out: str | os.PathLike, tag: str | None = None) -> dict:
    """Run every configured method over every seed and write the report."""
    if tag is None:
        tag = "same-rate" if cfg.train_missing == cfg.test_missing else "cross-rate"
    view = eval_view(dataset, cfg.test_missing, cfg.eval_seed)
    results = run_grid(cfg, view, cfg.methods, cfg.seeds)
    report = build_report(results, cfg, tag)
    out = Path(out)
    for r in results:
        write_atomic(out / "curves" / f"{r.method}_seed{r.seed}.csv", r.log.to_csv())
    write_atomic(out / "results.json", to_json(report))
    write_atomic(out / "results.txt", format_table(report))
    return report


def level_name(level: tuple[float, float]) -> str:
    return f"level_{level[0]:g}-{level[1]:g}"


def sweep(cfg: ExperimentConfig, dataset: Dataset, levels: Sequence[tuple[float, float]], out) -> dict[str, dict]:
    if not levels:
        raise ConfigInvalid("sweep needs at least one missing-rate level")
    reports = {}
    for level in levels:
        spec = MissingSpec.uniform(*level)
        level_cfg = replace(cfg, train_missing=spec, test_missing=spec)
        reports[level_name(level)] = compare(level_cfg, dataset, Path(out) / level_name(level), tag=f"level {level[0]:g}-{level[1]:g}")
    write_atomic(Path(out) / "sweep.json", to_json(reports))
    return reports


def train_single(cfg: ExperimentConfig, dataset: Dataset, seed: int, out) -> RunResult:
    view = eval_view(dataset, cfg.test_missing, cfg.eval_seed)
    result = run_one(cfg, view, cfg.method, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.method}_seed{seed}"
    save_params(result.params, out / f"{stem}.params")
    write_atomic(out / f"{stem}_log.csv", result.log.to_csv())
    write_atomic(out / f"{stem}_metrics.json", to_json({"method": cfg.method, "seed": seed, "test": result.metrics}))
    return result
