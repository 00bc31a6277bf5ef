import numpy as np
import pytest

import oracles
from protocase import autodiff as ad
from protocase import losses as L
from protocase.autodiff import Tensor
from protocase.errors import ConfigError


def test_cross_entropy_values():
    assert L.cross_entropy_margin(np.array([2.0, 2.0, 2.0]), 1).item() == pytest.approx(np.log(3), abs=1e-12)
    assert L.cross_entropy_margin(np.array([10.0, 0.0, 0.0]), 0).item() == pytest.approx(9.08e-5, rel=1e-3)
    vals = [L.cross_entropy_margin(np.array([t, 0.5, -0.2]), 0).item() for t in np.linspace(-3, 3, 13)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def _micro(rng, n=2, c=3, h=2, w=2, m=4):
    feats = rng.uniform(size=(n, c, h, w))
    protos = rng.uniform(size=(m, c))
    types = np.array([0, 1, 2, 0][:m])
    labels = rng.integers(0, 3, n)
    return feats, labels, protos, types


def test_cluster_and_separation_match_enumeration(rng):
    for _ in range(20):
        feats, labels, protos, types = _micro(rng)
        for k in (1, 2, 3):
            clu = L.cluster_cost(feats, labels, protos, types, k).item()
            sep = L.separation_cost(feats, labels, protos, types, k).item()
            assert (clu, sep) == oracles.oracle_cluster_sep(feats, labels, protos, types, k)


def test_k1_is_min_of_min(rng):
    feats, labels, protos, types = _micro(rng, n=3)
    got = (L.cluster_cost(feats, labels, protos, types, 1).item(),
           L.separation_cost(feats, labels, protos, types, 1).item())
    assert got == oracles.oracle_min_min(feats, labels, protos, types)


def test_cluster_zero_when_patches_match_prototypes():
    feats = np.zeros((1, 2, 1, 2))
    feats[0, :, 0, 1] = 1.0
    protos = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    assert L.cluster_cost(feats, [0], protos, np.array([0, 0, 1]), 1).item() == 0.0
    # with k=2 the [0,0] prototype averages distances 0 and 2
    assert L.cluster_cost(feats, [0], protos, np.array([0, 0, 1]), 2).item() == 1.0


def test_separation_constant_distance():
    feats = np.zeros((1, 1, 2, 2))
    protos = np.array([[0.0], [2.0]])
    assert L.separation_cost(feats, [0], protos, np.array([0, 1]), 3).item() == -4.0


def test_missing_type_prototypes_rejected(rng):
    feats, _, protos, _ = _micro(rng)
    with pytest.raises(ConfigError, match="no active same-type"):
        L.cluster_cost(feats, [2, 2], protos, np.array([0, 0, 1, 1]), 1)


def test_fine_loss_mask_extremes(rng):
    maps = rng.uniform(0.1, 2.0, (1, 2, 3, 3))
    types = np.array([0, 1])
    zero = L.fine_annotation_loss(maps, [0], types, np.zeros((1, 5, 5))).item()
    assert zero == pytest.approx(np.linalg.norm(maps[0, 1]), rel=1e-15)
    ones = L.fine_annotation_loss(maps, [0], types, np.ones((1, 5, 5))).item()
    up = ad.bilinear_upsample_array(maps[0, 0], (5, 5))
    assert ones == pytest.approx(np.linalg.norm(up) + np.linalg.norm(maps[0, 1]), rel=1e-14)


def test_fine_loss_hand_computed_micro_instance():
    maps = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.5], [0.0, 1.0]]]])
    mask = np.array([[[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 1.0]]])
    # 2x2 -> 3x3 upsampling puts the original values at the corners
    same = np.sqrt(1.0 + 4.0 + 9.0 + 16.0)
    other = np.sqrt(0.25 + 0.25 + 0.0 + 1.0)
    got = L.fine_annotation_loss(maps, [0], np.array([0, 1]), mask).item()
    assert abs(got - (same + other)) < 1e-12


def test_fine_loss_matches_oracle_on_dyadic_instances(rng):
    for _ in range(20):
        n, m = 2, 3
        maps = rng.integers(0, 16, (n, m, 3, 3)) / 8.0
        masks = (rng.random((n, 5, 5)) < 0.5).astype(float)
        labels = rng.integers(0, 3, n)
        sub = rng.random(n) < 0.7
        types = np.array([0, 1, 2])
        got = L.fine_annotation_loss(maps, labels, types, masks, sub).item()
        assert got == oracles.oracle_fine_loss(maps, labels, types, masks, sub)


def test_fine_loss_monotone_in_mask(rng):
    maps = rng.uniform(size=(1, 1, 4, 4))
    mask = np.zeros((1, 8, 8))
    prev = L.fine_annotation_loss(maps, [0], np.array([0]), mask).item()
    for idx in rng.permutation(64)[:20]:
        mask[0].flat[idx] = 1.0
        cur = L.fine_annotation_loss(maps, [0], np.array([0]), mask).item()
        assert cur >= prev
        prev = cur


def test_fine_loss_requires_masks(rng):
    maps = rng.uniform(size=(1, 1, 2, 2))
    with pytest.raises(ValueError, match="mask"):
        L.fine_annotation_loss(maps, [0], np.array([0]), None)
    bad = np.full((1, 3, 3), np.nan)
    with pytest.raises(ValueError, match="missing mask"):
        L.fine_annotation_loss(maps, [0], np.array([0]), bad)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        L.LossConfig(lambda_fine=-1.0)
    with pytest.raises(ConfigError):
        L.LossConfig(k=0)
    assert L.LossConfig().lambda_fine == 0.001
