"""Metric report for a trained model on one split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import bilinear_upsample_array
from .data import MARGIN_TYPES, Sample
from .metrics import (MetricError, MetricRow, activation_precision, auroc, bootstrap_ci, cohen_kappa, delong_ci,
                      weighted_auroc)
from .network import ForwardResult, ModelState, forward


@dataclass
class APTable:
    """Activation precision of every (image, active prototype) pair; invalid where types differ."""
    values: np.ndarray       # [N, m_active]
    valid: np.ndarray        # [N, m_active] bool

    def mean(self) -> float:
        if not self.valid.any():
            raise MetricError("no same-type (image, prototype) pairs")
        return float(self.values[self.valid].mean())

    def ci(self, n_boot: int, seed: int) -> tuple[float, float]:
        sums = np.where(self.valid, self.values, 0.0).sum(axis=1)
        counts = self.valid.sum(axis=1)
        return bootstrap_ci(lambda s, c: _ratio(s, c), (sums, counts), n_boot=n_boot, seed=seed)


def _ratio(s, c) -> float:
    if c.sum() == 0:
        raise MetricError("empty resample")
    return float(s.sum() / c.sum())


def ap_table(state: ModelState, samples: Sequence[Sample], fr: ForwardResult, scale: str,
             tau: float = 0.95) -> APTable:
    """Prototype activation precision against lesion-scale or fine-scale masks."""
    types = state.proto_types[fr.active]
    vals = np.zeros((len(samples), len(types)))
    valid = np.zeros_like(vals, dtype=bool)
    for i, s in enumerate(samples):
        mask = s.lesion_mask if scale == "lesion" else s.fine_mask
        if mask is None:
            continue
        cols = np.flatnonzero(types == s.margin_index)
        if not len(cols):
            continue
        maps = bilinear_upsample_array(fr.sim_maps[i, cols], mask.shape)
        for c, amap in zip(cols, maps):
            vals[i, c] = activation_precision(amap, mask, tau)
            valid[i, c] = True
    return APTable(vals, valid)


def external_ap(samples: Sequence[Sample], maps: dict[str, np.ndarray], scale: str, tau: float = 0.95) -> APTable:
    """Activation precision of externally supplied maps, one per image (keyed by sample id)."""
    vals, valid = np.zeros((len(samples), 1)), np.zeros((len(samples), 1), dtype=bool)
    for i, s in enumerate(samples):
        mask = s.lesion_mask if scale == "lesion" else s.fine_mask
        if mask is None or s.id not in maps:
            continue
        amap = np.asarray(maps[s.id], dtype=np.float64)
        if amap.shape != mask.shape:
            amap = bilinear_upsample_array(amap, mask.shape)
        vals[i, 0] = activation_precision(amap, mask, tau)
        valid[i, 0] = True
    return APTable(vals, valid)


@dataclass
class Report:
    rows: list[MetricRow]
    forward: ForwardResult
    labels: np.ndarray
    malignancy: np.ndarray
    extras: dict = field(default_factory=dict)

    def get(self, name: str) -> MetricRow:
        return next(r for r in self.rows if r.metric == name)


def evaluate(state: ModelState, samples: Sequence[Sample], tau: float = 0.95, n_boot: int = 5000,
             seed: int = 0, attention_maps: dict[str, np.ndarray] | None = None) -> Report:
    """Margin AUROCs (per type, image-weighted), accuracy, kappa, lesion/fine AP, malignancy AUROC."""
    samples = list(samples)
    images = np.stack([s.image for s in samples])
    labels = np.array([s.margin_index for s in samples])
    mal = np.array([s.malignancy_label for s in samples])
    fr = forward(state, images)
    n = len(samples)
    pred = fr.margin_logits.argmax(axis=1)
    rows = []
    for t, name in enumerate(MARGIN_TYPES):
        try:
            a, lo, hi = delong_ci(fr.margin_probs[:, t], (labels == t).astype(int))
            rows.append(MetricRow(f"margin_auroc_{name}", a, lo, hi, n))
        except MetricError:
            pass
    try:
        w, _ = weighted_auroc(fr.margin_probs, labels)
        lo, hi = bootstrap_ci(lambda p, y: weighted_auroc(p, y)[0], (fr.margin_probs, labels), n_boot, seed=seed)
        rows.append(MetricRow("margin_auroc_weighted", w, lo, hi, n))
    except MetricError:
        pass
    acc = float(np.mean(pred == labels))
    lo, hi = bootstrap_ci(lambda p, y: float(np.mean(p == y)), (pred, labels), n_boot, seed=seed)
    rows.append(MetricRow("margin_accuracy", acc, lo, hi, n))
    try:
        k = cohen_kappa(pred, labels)
        lo, hi = bootstrap_ci(cohen_kappa, (pred, labels), n_boot, seed=seed)
        rows.append(MetricRow("margin_kappa", k, lo, hi, n))
    except MetricError:
        pass
    tables = {}
    for scale in ("lesion", "fine"):
        tab = ap_table(state, samples, fr, scale, tau)
        tables[scale] = tab
        if tab.valid.any():
            lo, hi = tab.ci(n_boot, seed)
            rows.append(MetricRow(f"{scale}_ap", tab.mean(), lo, hi, int(tab.valid.any(axis=1).sum())))
        if attention_maps is not None:
            ext = external_ap(samples, attention_maps, scale, tau)
            if ext.valid.any():
                lo, hi = ext.ci(n_boot, seed)
                rows.append(MetricRow(f"external_{scale}_ap", ext.mean(), lo, hi, int(ext.valid.sum())))
    try:
        a, lo, hi = delong_ci(fr.malignancy_prob, mal)
        rows.append(MetricRow("malignancy_auroc", a, lo, hi, n))
    except MetricError:
        pass
    return Report(rows, fr, labels, mal, {"ap_tables": tables, "pred": pred})


def margin_accuracy(state: ModelState, samples: Sequence[Sample]) -> float:
    fr = forward(state, np.stack([s.image for s in samples]))
    return float(np.mean(fr.margin_logits.argmax(axis=1) == np.array([s.margin_index for s in samples])))


def margin_weighted_auroc(state: ModelState, samples: Sequence[Sample]) -> float:
    fr = forward(state, np.stack([s.image for s in samples]))
    return weighted_auroc(fr.margin_probs, np.array([s.margin_index for s in samples]))[0]


def malignancy_auroc(state: ModelState, samples: Sequence[Sample]) -> float:
    fr = forward(state, np.stack([s.image for s in samples]))
    return auroc(fr.malignancy_prob, np.array([s.malignancy_label for s in samples]))
