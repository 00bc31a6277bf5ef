"""AUROC with DeLong intervals, Cohen's kappa with bootstrap intervals, activation precision."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats


class MetricError(ValueError):
    """Metric undefined on the given data (single-class labels, shared single label, ...)."""


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricError("AUROC needs at least one positive and one negative")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(positive outscores negative), ties count one half."""
    s, y = _binary(scores, labels)
    n1, n0 = int(y.sum()), int((~y).sum())
    ranks = stats.rankdata(s)
    wins = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(wins / (n1 * n0))


def delong_ci(scores, labels, level: float = 0.95) -> tuple[float, float, float]:
    """(auroc, lo, hi) with DeLong's placement-value variance, clipped to [0, 1]."""
    s, y = _binary(scores, labels)
    auc = auroc(s, y)
    pos, neg = s[y], s[~y]
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    v10, v01 = psi.mean(axis=1), psi.mean(axis=0)
    var = (v10.var(ddof=1) if len(pos) > 1 else 0.0) / len(pos) + (v01.var(ddof=1) if len(neg) > 1 else 0.0) / len(neg)
    if not var > 0:
        warnings.warn("DeLong variance is zero; interval collapses to the point estimate", RuntimeWarning)
        return auc, auc, auc
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * math.sqrt(var)
    return auc, float(max(0.0, auc - half)), float(min(1.0, auc + half))


def weighted_auroc(probs, labels, n_classes: int = 3) -> tuple[float, list[float]]:
    """One-vs-all AUROC per class averaged with weights proportional to class frequency."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    per, weights = [], []
    for c in range(n_classes):
        per.append(auroc(probs[:, c], (labels == c).astype(int)))
        weights.append(np.mean(labels == c))
    return float(np.dot(per, weights) / np.sum(weights)), per


def cohen_kappa(pred, true) -> float:
    a, b = np.asarray(pred).reshape(-1), np.asarray(true).reshape(-1)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise MetricError("kappa of empty label vectors")
    cats = np.union1d(a, b)
    po = float(np.mean(a == b))
    pe = float(sum(np.mean(a == c) * np.mean(b == c) for c in cats))
    if pe >= 1.0:
        raise MetricError("kappa undefined: both raters use one shared label (p_e = 1)")
    return (po - pe) / (1.0 - pe)


def bootstrap_ci(metric: Callable[..., float], arrays: Sequence, n_boot: int = 5000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval over ``n_boot`` full-size resamples (with replacement) of paired arrays.

    Resamples on which the metric is undefined are skipped.
    """
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise MetricError("bootstrap arrays must have equal length")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        try:
            vals.append(metric(*(a[idx] for a in arrays)))
        except MetricError:
            continue
    if not vals:
        raise MetricError("metric undefined on every bootstrap resample")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.array(vals), [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# activation precision ------------------------------------------------------------

def top_count(n: int, tau: float) -> int:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return max(1, math.ceil((1.0 - tau) * n - 1e-9))


def threshold_top_tau(amap, tau: float) -> np.ndarray:
    """Binary map marking the ceil((1-tau)*H*W) largest values; ties go to the earlier row-major pixel."""
    amap = np.asarray(amap, dtype=np.float64)
    if not np.isfinite(amap).all():
        raise ValueError("attention map has non-finite values")
    flat = amap.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size)
    out[order[:top_count(flat.size, tau)]] = 1.0
    return out.reshape(amap.shape)


def activation_precision(amap, mask, tau: float = 0.95) -> float:
    """Share of the top-activated pixels falling in the relevant region (mask == 0)."""
    amap, mask = np.asarray(amap, dtype=np.float64), np.asarray(mask, dtype=np.float64)
    if amap.shape != mask.shape:
        raise ValueError(f"map shape {amap.shape} does not match mask shape {mask.shape}")
    top = threshold_top_tau(amap, tau)
    return float(np.sum((1.0 - mask) * top) / np.sum(top))


def ap_dataset(maps: Sequence, masks: Sequence, tau: float = 0.95) -> float:
    """Mean activation precision of one prototype over a set of images."""
    if len(maps) != len(masks) or not len(maps):
        raise ValueError("ap_dataset needs equally many (>= 1) maps and masks")
    return float(np.mean([activation_precision(a, m, tau) for a, m in zip(maps, masks)]))


def ap_protoset(ap_values, valid) -> float:
    """Mean over the valid (image, prototype) pairs; off-type pairs are skipped, not counted as zero."""
    ap_values, valid = np.asarray(ap_values, dtype=np.float64), np.asarray(valid, dtype=bool)
    if not valid.any():
        raise MetricError("no same-type (image, prototype) pairs")
    return float(ap_values[valid].mean())


# reporting -----------------------------------------------------------------------

@dataclass
class MetricRow:
    metric: str
    value: float
    lo: float = float("nan")
    hi: float = float("nan")
    n: int = 0

    def line(self) -> str:
        return f"{self.metric},{self.value!r},{self.lo!r},{self.hi!r},{self.n}"


REPORT_HEADER = "metric,value,lo,hi,n"


def format_rows(rows: Sequence[MetricRow]) -> str:
    return "\n".join([REPORT_HEADER] + [r.line() for r in rows]) + "\n"


def parse_rows(text: str) -> dict[str, MetricRow]:
    out = {}
    for line in text.strip().splitlines()[1:]:
        name, v, lo, hi, n = line.split(",")
        out[name] = MetricRow(name, float(v), float(lo), float(hi), int(n))
    return out
