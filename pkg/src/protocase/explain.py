"""Case explanations, prototype visualizations and class activation visualizations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .autodiff import bilinear_upsample_array
from .data import MARGIN_TYPES, Sample
from .errors import ConfigError, DataError
from .metrics import threshold_top_tau
from .network import ModelState, forward


def _check_active(state: ModelState, j: int) -> None:
    if not 0 <= j < state.num_prototypes:
        raise ConfigError(f"no prototype {j} (model has {state.num_prototypes})")
    if not state.proto_active[j]:
        raise ConfigError(f"prototype {j} is inactive (pruned)")


def _column(state: ModelState, j: int) -> int:
    return int(np.searchsorted(state.active_indices, j))


def activation_maps(state: ModelState, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(scores [m_active], image-resolution maps [m_active,H,W]) for one image."""
    fr = forward(state, image)
    return fr.scores[0], bilinear_upsample_array(fr.sim_maps[0], image.shape)


def activation_map(state: ModelState, image: np.ndarray, j: int) -> np.ndarray:
    """Similarity map of prototype ``j`` on ``image``, bilinearly upsampled to image size."""
    _check_active(state, j)
    fr = forward(state, image)
    return bilinear_upsample_array(fr.sim_maps[0, _column(state, j)], image.shape)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def class_activation_visualization(state: ModelState, image: np.ndarray, margin_type) -> np.ndarray:
    """Score-weighted average of a type's activation maps, min-max normalized to [0, 1].

    Terms are sorted per pixel before summation, so the result does not depend
    on prototype order. A flat map normalizes to all zeros.
    """
    t = MARGIN_TYPES.index(margin_type) if isinstance(margin_type, str) else int(margin_type)
    cols = [c for c, j in enumerate(state.active_indices) if state.proto_types[j] == t]
    if not cols:
        raise ConfigError(f"no active prototypes of type {MARGIN_TYPES[t]}")
    scores, maps = activation_maps(state, image)
    terms = np.sort(scores[cols, None, None] * maps[cols], axis=0)
    num = terms[0].copy()
    for term in terms[1:]:
        num += term
    den = 0.0
    for s in np.sort(scores[cols]):
        den += s
    return _minmax(num / den)


# prototype visualization ----------------------------------------------------

def feature_to_image(rc: tuple[int, int], feature_hw, image_hw) -> tuple[int, int]:
    """Pixel coordinate of a feature-grid point under corner-aligned upsampling."""
    out = []
    for v, nf, ni in zip(rc, feature_hw, image_hw):
        out.append(int(round(v * (ni - 1) / (nf - 1))) if nf > 1 else 0)
    return tuple(out)


def _lookup(dataset, sample_id: str) -> Sample:
    samples = dataset.samples if hasattr(dataset, "samples") else dataset
    if isinstance(samples, dict):
        if sample_id in samples:
            return samples[sample_id]
    else:
        for s in samples:
            if s.id == sample_id:
                return s
    raise DataError(f"prototype source sample {sample_id!r} not found in the dataset")


@dataclass
class PrototypeView:
    index: int
    margin_type: str
    source_id: str
    source_patch: tuple[int, int]        # feature-grid (row, col)
    source_pixel: tuple[int, int]        # image (row, col)
    image: np.ndarray
    activation: np.ndarray               # image-resolution self-activation
    raw_map: np.ndarray                  # feature-resolution similarity map
    box: tuple[int, int, int, int]       # r0, r1, c0, c1 inclusive

    @property
    def crop(self) -> np.ndarray:
        r0, r1, c0, c1 = self.box
        return self.image[r0:r1 + 1, c0:c1 + 1]

    def overlay(self) -> np.ndarray:
        return plotting.draw_box(plotting.overlay(self.image, self.activation), self.box)


def top_region_box(amap: np.ndarray, tau: float = 0.95, include=None) -> tuple[int, int, int, int]:
    rows, cols = np.nonzero(threshold_top_tau(amap, tau))
    if include is not None:
        rows, cols = np.append(rows, include[0]), np.append(cols, include[1])
    return int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())


def visualize_prototype(state: ModelState, j: int, dataset, tau: float = 0.95) -> PrototypeView:
    """Self-activation of prototype ``j`` on its source image, with the top-tau bounding box.

    The box always contains the source patch pixel.
    """
    _check_active(state, j)
    src = state.proto_sources[j]
    if src is None:
        raise ConfigError(f"prototype {j} has not been projected; it has no source patch")
    sid, r, c = src[0], int(src[1]), int(src[2])
    sample = _lookup(dataset, sid)
    fr = forward(state, sample.image)
    raw = fr.sim_maps[0, _column(state, j)]
    act = bilinear_upsample_array(raw, sample.image.shape)
    pix = feature_to_image((r, c), raw.shape, sample.image.shape)
    return PrototypeView(j, MARGIN_TYPES[state.proto_types[j]], sid, (r, c), pix, sample.image, act, raw,
                         top_region_box(act, tau, include=pix))


# case explanation -------------------------------------------------------------

@dataclass
class Evidence:
    prototype: int
    margin_type: str
    similarity: float
    weights: tuple[float, float, float]    # h1 column: weight toward each margin type
    source: tuple | None
    activation: np.ndarray | None = field(default=None, repr=False)

    def contribution(self, t: int) -> float:
        return self.weights[t] * self.similarity


@dataclass
class Explanation:
    case_id: str
    predicted: str
    margin_probs: np.ndarray
    margin_logits: np.ndarray
    malignancy_prob: float
    malignancy_score: float
    evidence: list[Evidence]             # predicted type first, each group by similarity descending
    true_label: str | None = None

    def reconstruct_logits(self) -> np.ndarray:
        """Sum of weight * similarity over the evidence, in prototype order."""
        ordered = sorted(self.evidence, key=lambda e: e.prototype)
        out = np.zeros(len(MARGIN_TYPES))
        for t in range(len(MARGIN_TYPES)):
            acc = ordered[0].contribution(t)
            for e in ordered[1:]:
                acc = acc + e.contribution(t)
            out[t] = acc
        return out

    def summary_lines(self) -> list[str]:
        lines = [f"case,{self.case_id}", f"predicted,{self.predicted}"]
        if self.true_label is not None:
            lines.append(f"true,{self.true_label}")
        for t, name in enumerate(MARGIN_TYPES):
            lines.append(f"logit_{name},{self.margin_logits[t]!r}")
            lines.append(f"prob_{name},{self.margin_probs[t]!r}")
        lines += [f"malignancy_score,{self.malignancy_score!r}", f"malignancy_prob,{self.malignancy_prob!r}"]
        pred = MARGIN_TYPES.index(self.predicted)
        lines.append("rank,prototype,type,similarity,w_circumscribed,w_indistinct,w_spiculated,"
                     "contribution,source_id,source_row,source_col")
        for rank, e in enumerate(self.evidence, 1):
            src = e.source if e.source is not None else ("", "", "")
            w = ",".join(repr(float(v)) for v in e.weights)
            lines.append(f"{rank},{e.prototype},{e.margin_type},{e.similarity!r},{w},"
                         f"{e.contribution(pred)!r},{src[0]},{src[1]},{src[2]}")
        return lines


def explain_case(state: ModelState, image: np.ndarray, case_id: str = "case", true_label: str | None = None,
                 with_maps: bool = True) -> Explanation:
    """Evidence chain of one prediction: every active prototype's score and h1 weights."""
    fr = forward(state, image)
    logits = fr.margin_logits[0]
    pred = int(np.argmax(logits))
    maps = bilinear_upsample_array(fr.sim_maps[0], image.shape) if with_maps else None
    h1 = state.params["h1"]
    ev = []
    for col, j in enumerate(fr.active):
        ev.append(Evidence(int(j), MARGIN_TYPES[state.proto_types[j]], float(fr.scores[0, col]),
                           tuple(float(v) for v in h1[:, j]), state.proto_sources[j],
                           maps[col] if maps is not None else None))
    ev.sort(key=lambda e: (e.margin_type != MARGIN_TYPES[pred], -e.similarity, e.prototype))
    return Explanation(case_id, MARGIN_TYPES[pred], fr.margin_probs[0], logits, float(fr.malignancy_prob[0]),
                       float(fr.malignancy_score[0]), ev, true_label)


def render_case(state: ModelState, expl: Explanation, image: np.ndarray, out_dir, dataset=None,
                top: int = 3, tau: float = 0.95) -> Path:
    """Write ``case_<id>/`` with summary.txt, evidence_<rank>.png and cav_<type>.png."""
    out = Path(out_dir) / f"case_{expl.case_id}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text("\n".join(expl.summary_lines()) + "\n")
    pred = MARGIN_TYPES.index(expl.predicted)
    for rank, e in enumerate(expl.evidence[:top], 1):
        amap = e.activation if e.activation is not None else activation_map(state, image, e.prototype)
        test_rgb = plotting.draw_box(plotting.overlay(image, amap), top_region_box(amap, tau))
        proto_rgb = None
        if dataset is not None and e.source is not None:
            try:
                proto_rgb = visualize_prototype(state, e.prototype, dataset, tau).overlay()
            except DataError:
                proto_rgb = None
        caption = (f"#{rank} prototype {e.prototype} ({e.margin_type}) s={e.similarity:.3f} "
                   f"w={e.weights[pred]:+.3f} contrib={e.contribution(pred):+.3f}")
        plotting.evidence_panel(test_rgb, proto_rgb, caption, out / f"evidence_{rank}.png")
    for t, name in enumerate(MARGIN_TYPES):
        if any(state.proto_types[j] == t for j in state.active_indices):
            cav = class_activation_visualization(state, image, t)
            plotting.save_rgb(out / f"cav_{name}.png", plotting.overlay(image, cav))
    return out
