"""Evaluation metrics and the two-tailed Welch t-test."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import integrate

METRIC_KEYS = ("MAE", "Corr", "Acc-2", "F1-Score", "Acc", "Uar", "Acc-7")


class EmptyInput(ValueError):
    pass


class ConstantInput(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


class DegenerateSample(ValueError):
    pass


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0 or y.size == 0:
        raise EmptyInput("metric of empty input")
    if p.size != y.size:
        raise ValueError(f"{p.size} predictions vs {y.size} labels")
    return p, y


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def pearson(preds, labels) -> float:
    p, y = _pair(preds, labels)
    if p.size < 2:
        raise ConstantInput("correlation needs at least two points")
    dp, dy = p - p.mean(), y - y.mean()
    sp, sy = math.sqrt(np.dot(dp, dp)), math.sqrt(np.dot(dy, dy))
    if sp == 0.0 or sy == 0.0:
        raise ConstantInput("correlation undefined for a constant sequence")
    return float(np.clip(np.dot(dp, dy) / (sp * sy), -1.0, 1.0))


def acc2(preds, labels, threshold: float = 0.0) -> float:
    """Sign agreement; values equal to ``threshold`` count as positive."""
    p, y = _pair(preds, labels)
    return float(np.mean((p >= threshold) == (y >= threshold)))


def sentiment_interval(x) -> np.ndarray:
    """Map scores to the seven integer bins -3..3 (round half away from zero)."""
    x = np.asarray(x, dtype=np.float64)
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(rounded, -3, 3).astype(np.int64)


def acc7(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(sentiment_interval(p) == sentiment_interval(y)))


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64).ravel()
    true = np.asarray(true).astype(np.int64).ravel()
    if pred.size == 0:
        raise EmptyInput("no predictions")
    if pred.size != true.size:
        raise ValueError(f"{pred.size} predictions vs {true.size} labels")
    for arr in (pred, true):
        if np.any(arr < 0) or np.any(arr >= num_classes):
            raise LabelOutOfRange(f"class index outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def classification_metrics(pred, true, num_classes: int) -> tuple[float, float, float]:
    """Return (accuracy, unweighted average recall, support-weighted F1).

    Recall is averaged over the classes present in ``true``.  Ratios are
    formed from integer counts with exact rational arithmetic and rounded once,
    so the result does not depend on summation order.
    """
    cm = confusion_matrix(pred, true, num_classes)
    total = int(cm.sum())
    recalls = []
    weighted_f1 = Fraction(0)
    for c in range(num_classes):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        if support:
            recalls.append(Fraction(tp, support))
        # F1 = 2 tp / (support + predicted); zero when the class never appears
        if support + predicted:
            weighted_f1 += Fraction(2 * tp, support + predicted) * support
    acc = Fraction(int(np.trace(cm)), total)
    uar = sum(recalls, Fraction(0)) / len(recalls)
    return float(acc), float(uar), float(weighted_f1 / total)


def regression_report(preds, labels) -> dict[str, float]:
    p, y = _pair(preds, labels)
    report = {"MAE": mae(p, y)}
    try:
        report["Corr"] = pearson(p, y)
    except ConstantInput:
        report["Corr"] = 0.0
    report["Acc-2"] = acc2(p, y)
    pos_pred = (p >= 0).astype(np.int64)
    pos_true = (y >= 0).astype(np.int64)
    report["F1-Score"] = classification_metrics(pos_pred, pos_true, 2)[2]
    report["Acc-7"] = acc7(p, y)
    return report


def classification_report(pred_classes, true_classes, num_classes: int) -> dict[str, float]:
    acc, uar, f1 = classification_metrics(pred_classes, true_classes, num_classes)
    return {"Acc": acc, "Uar": uar, "F1-Score": f1}


def t_pdf(x: float, df: float) -> float:
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom, by quadrature."""
    t = abs(t)
    if t == 0.0:
        return 1.0
    # integrate the shorter side for accuracy; the pdf is symmetric
    inner, _ = integrate.quad(t_pdf, 0.0, t, args=(df,), epsabs=1e-12, epsrel=1e-12, limit=200)
    if inner < 0.4:
        return float(min(1.0, 1.0 - 2.0 * inner))
    tail, _ = integrate.quad(t_pdf, t, np.inf, args=(df,), epsabs=0.0, epsrel=1e-11, limit=200)
    return float(min(1.0, 2.0 * tail))


def welch_t(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSample("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0.0:
        raise DegenerateSample("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(df)


def t_test_two_tailed(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    t, df = welch_t(sample_a, sample_b)
    return t_two_tailed_p(t, df)
