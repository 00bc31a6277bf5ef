"""Training objective: cross-entropy + cluster + separation + fine-annotation terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class LossConfig:
    lambda_cluster: float = 0.8
    lambda_sep: float = 0.08
    lambda_fine: float = 0.001
    k: int | None = None            # None: use the pooling k of the model
    normalize_fine: bool = False    # divide each fine-loss norm by its map's pixel count

    def __post_init__(self):
        if self.lambda_fine < 0:
            raise ConfigError("lambda_fine must be >= 0")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class Batch:
    images: np.ndarray            # [N,1,H,W]
    labels: np.ndarray            # [N] margin indices
    masks: np.ndarray | None      # [N,H,W]; 0 = relevant
    in_fine_subset: np.ndarray    # [N] bool, membership of D'
    ids: tuple = ()

    def __len__(self) -> int:
        return len(self.labels)


def cross_entropy_margin(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; accepts [3] or [N,3] logits."""
    logits = ad.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    lsm = ad.log_softmax(logits)
    picked = lsm[np.arange(len(labels)), labels]
    return ad.mul(ad.mean(picked), -1.0)


def _type_mask(labels: np.ndarray, proto_types: np.ndarray, same: bool) -> np.ndarray:
    eq = labels[:, None] == proto_types[None, :]
    return eq if same else ~eq


def _kmin_cost(d: Tensor, labels, proto_types, k: int, same: bool) -> Tensor:
    labels = np.asarray(labels)
    mask = _type_mask(labels, np.asarray(proto_types), same)
    if not mask.any(axis=1).all():
        bad = labels[~mask.any(axis=1)][0]
        kind = "same-type" if same else "other-type"
        raise ConfigError(f"no active {kind} prototypes for margin type {int(bad)} (misconfigured pruning?)")
    avg = ad.topk_mean(d, k, largest=False)            # [N,m]
    per_image = ad.masked_min(avg, mask, axis=1)        # [N]
    return ad.mean(per_image)


def cluster_cost_from_distances(d: Tensor, labels, proto_types, k: int) -> Tensor:
    """Mean over images of min over same-type prototypes of the mean of the k smallest distances."""
    return _kmin_cost(d, labels, proto_types, k, same=True)


def separation_cost_from_distances(d: Tensor, labels, proto_types, k: int) -> Tensor:
    """Negated counterpart of the cluster cost over other-type prototypes; always <= 0."""
    return ad.mul(_kmin_cost(d, labels, proto_types, k, same=False), -1.0)


def _distances(features, prototypes) -> Tensor:
    features, prototypes = ad.as_tensor(features), ad.as_tensor(prototypes)
    n, c, h, w = features.shape
    z = features.reshape(n, c, h * w).transpose(0, 2, 1)
    return ad.squared_distances(z, prototypes)


def cluster_cost(features, labels, prototypes, proto_types, k: int) -> Tensor:
    return cluster_cost_from_distances(_distances(features, prototypes), labels, proto_types, k)


def separation_cost(features, labels, prototypes, proto_types, k: int) -> Tensor:
    return separation_cost_from_distances(_distances(features, prototypes), labels, proto_types, k)


def fine_annotation_loss(sim_maps, labels, proto_types, masks, in_subset=None,
                         normalize: bool = False) -> Tensor:
    """Sum over images in D' of masked same-type activation norms plus raw other-type map norms.

    ``sim_maps`` is [N,m,Hf,Wf]; ``masks`` is [N,H,W] with 0 on relevant pixels.
    Same-type maps are upsampled to mask resolution before masking; other-type
    maps enter at feature resolution.
    """
    sim_maps = ad.as_tensor(sim_maps)
    labels = np.asarray(labels)
    n = len(labels)
    in_subset = np.ones(n, dtype=bool) if in_subset is None else np.asarray(in_subset, dtype=bool)
    if not in_subset.any():
        return Tensor(0.0)
    if masks is None:
        raise ValueError("fine_annotation_loss: images in D' need a mask")
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape[0] != n or (isinstance(masks, np.ndarray) and np.isnan(masks[in_subset]).any()):
        raise ValueError("fine_annotation_loss: missing mask for an image in D'")
    rows = np.flatnonzero(in_subset)
    if len(rows) != n:
        sim_maps = sim_maps[rows]
        labels, masks = labels[rows], masks[rows]
    same = _type_mask(labels, np.asarray(proto_types), True).astype(np.float64)
    hf, wf = sim_maps.shape[-2:]
    up = ad.bilinear_upsample(sim_maps, masks.shape[-2:])
    masked = ad.mul(up, masks[:, None, :, :])
    same_norm = ad.l2_norm(masked, axes=(-2, -1))       # [N',m]
    raw_norm = ad.l2_norm(sim_maps, axes=(-2, -1))
    if normalize:
        same_norm = ad.mul(same_norm, 1.0 / (masks.shape[-2] * masks.shape[-1]))
        raw_norm = ad.mul(raw_norm, 1.0 / (hf * wf))
    same_term = ad.seqsum(ad.mul(same_norm, same), axis=-1)
    off_term = ad.seqsum(ad.mul(raw_norm, 1.0 - same), axis=-1)
    return ad.seqsum(ad.add(same_term, off_term), axis=0)


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    cluster: float
    sep: float
    fine: float

    def row(self) -> tuple[float, float, float, float, float]:
        return self.total.item(), self.ce, self.cluster, self.sep, self.fine


def total_objective(graph, batch: Batch, proto_types_active: np.ndarray, config: LossConfig,
                    k: int, feature_hw: tuple[int, int]) -> LossTerms:
    """CE + lambda_c * cluster + lambda_s * separation + lambda_f * fine over one batch."""
    k = config.k or k
    ce = cross_entropy_margin(graph.logits, batch.labels)
    clu = cluster_cost_from_distances(graph.distances, batch.labels, proto_types_active, k)
    sep = separation_cost_from_distances(graph.distances, batch.labels, proto_types_active, k)
    total = ad.add(ce, ad.mul(clu, config.lambda_cluster))
    total = ad.add(total, ad.mul(sep, config.lambda_sep))
    fine_val = 0.0
    if config.lambda_fine > 0 and batch.in_fine_subset.any():
        n, m, _ = graph.sim.shape
        maps = ad.reshape(graph.sim, (n, m) + tuple(feature_hw))
        fine = fine_annotation_loss(maps, batch.labels, proto_types_active, batch.masks, batch.in_fine_subset,
                                    normalize=config.normalize_fine)
        total = ad.add(total, ad.mul(fine, config.lambda_fine))
        fine_val = fine.item()
    return LossTerms(total, ce.item(), clu.item(), sep.item(), fine_val)
