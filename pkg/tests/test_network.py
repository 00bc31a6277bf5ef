import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import micro_config
from protocase import network as N
from protocase.errors import ConfigError


@pytest.fixture
def micro_state():
    return N.init_model(micro_config(), np.random.default_rng(0))


def test_default_feature_shape_and_k():
    cfg = N.ModelConfig()
    assert cfg.feature_shape() == (64, 16, 16)
    assert cfg.k == 12


def test_k_below_one_rejected():
    with pytest.raises(ConfigError):
        _ = N.ModelConfig(pool_fraction=0.001).k


def test_init_model_contract():
    st1 = N.init_model(N.ModelConfig(), np.random.default_rng(5))
    st2 = N.init_model(N.ModelConfig(), np.random.default_rng(5))
    p = st1.params["prototypes"]
    assert p.shape == (15, 64) and p.min() >= 0.0 and p.max() <= 1.0
    assert list(np.bincount(st1.proto_types)) == [5, 5, 5]
    h1 = st1.params["h1"]
    for t in range(3):
        assert np.sum(h1[t] == 1.0) == 5 and np.sum(h1[t] == -1.0) == 10
    assert np.all(st1.params["h2.weight"] == 0)
    assert all(np.array_equal(st1.params[k], st2.params[k]) for k in st1.params)


def test_extract_features_shape_range_and_determinism(rng):
    st_ = N.init_model(N.ModelConfig(), np.random.default_rng(1))
    img = rng.uniform(size=(64, 64))
    f1 = N.extract_features(st_, img)
    assert f1.shape == (64, 16, 16)
    assert np.all((f1 > 0) & (f1 < 1))
    assert np.array_equal(f1, N.extract_features(st_, img.copy()))
    with pytest.raises(ValueError, match="image size"):
        N.extract_features(st_, np.zeros((32, 32)))


def test_similarity_map_values():
    fm = np.zeros((2, 1, 2))
    fm[:, 0, 1] = [1.0, 0.0]
    s = N.similarity_map(fm, np.zeros(2), 1e-4)
    assert s[0, 0] == pytest.approx(9.21034, abs=1e-5)
    assert s[0, 1] == pytest.approx(0.69305, abs=1e-5)
    with pytest.raises(ValueError, match="channel"):
        N.similarity_map(fm, np.zeros(3), 1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1e3), st.floats(1e-6, 1e3), st.floats(1e-6, 0.999))
def test_similarity_strictly_decreasing(d, gap, eps):
    fm = np.array([[[np.sqrt(d), np.sqrt(d + gap)]]])
    s = N.similarity_map(fm, np.zeros(1), eps)
    assert np.all(s > 0) and np.isfinite(s).all()
    if gap > 1e-9 * max(d, 1.0):
        assert s[0, 0] >= s[0, 1]


def test_pool_topk_examples():
    assert N.pool_topk(np.array([5.0, 1.0, 3.0, 2.0]), 2) == 4.0
    m = np.random.default_rng(0).normal(size=(4, 4))
    assert N.pool_topk(m, 1) == m.max()
    assert N.pool_topk(np.full((3, 3), 0.7), 5) == 0.7
    with pytest.raises(ValueError):
        N.pool_topk(m, 17)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30), st.data())
def test_pool_topk_matches_sort_oracle(vals, data):
    k = data.draw(st.integers(1, len(vals)))
    assert N.pool_topk(np.array(vals), k) == oracles.oracle_topk(vals, k)


def test_margin_logits_hand_product():
    st_ = N.init_model(N.ModelConfig(), np.random.default_rng(0))
    out = N.margin_logits(st_, np.full(15, 0.5))
    np.testing.assert_array_equal(out, [-2.5, -2.5, -2.5])
    np.testing.assert_array_equal(N.margin_logits(st_, np.zeros(15)), np.zeros(3))


# sigma(-3.15) is 0.041091; the commonly quoted 0.04102 is a rounding slip
@pytest.mark.parametrize("logits,z,prob", [((10, 0, 0), -3.15, 0.041091), ((0, 0, 10), -0.95, 0.278885),
                                           ((0, 0, 0), -1.55, 0.175086)])
def test_malignancy_golden_values(logits, z, prob):
    y, p = N.malignancy_from([-16.0, -10.0, 6.0], 155.0, 100.0, np.array(logits, dtype=float))
    assert p == pytest.approx(1.0 / (1.0 + math.exp(-z)), rel=1e-12)
    assert p == pytest.approx(prob, abs=1e-6)
    assert y == pytest.approx(np.dot([-16, -10, 6], logits))


def test_forward_probs_sum_to_one_and_pure(micro_state, rng):
    imgs = rng.uniform(size=(3, 16, 16))
    before = {k: v.copy() for k, v in micro_state.params.items()}
    fr = N.forward(micro_state, imgs)
    np.testing.assert_allclose(fr.margin_probs.sum(axis=1), 1.0, atol=1e-12)
    assert all(np.array_equal(before[k], micro_state.params[k]) for k in before)
    fr2 = N.forward(micro_state, imgs)
    assert np.array_equal(fr.margin_logits, fr2.margin_logits)


def test_inactive_prototypes_contribute_nothing(micro_state, rng):
    img = rng.uniform(size=(16, 16))
    full = N.forward(micro_state, img)
    micro_state.proto_active[1] = False
    part = N.forward(micro_state, img)
    assert part.scores.shape[1] == full.scores.shape[1] - 1
    keep = [0, 2, 3, 4, 5]
    expect = N.margin_logits_t(N.Tensor(full.scores[:, keep]), N.Tensor(micro_state.params["h1"][:, keep])).data
    np.testing.assert_array_equal(part.margin_logits, expect)


def test_permutation_equivariance(micro_state, rng):
    img = rng.uniform(size=(2, 16, 16))
    perm = rng.permutation(micro_state.num_prototypes)
    other = micro_state.copy()
    other.params["prototypes"] = micro_state.params["prototypes"][perm]
    other.params["h1"] = micro_state.params["h1"][:, perm]
    other.proto_types = micro_state.proto_types[perm]
    a, b = N.forward(micro_state, img), N.forward(other, img)
    np.testing.assert_array_equal(a.scores[:, perm], b.scores)
    np.testing.assert_allclose(a.margin_logits, b.margin_logits, rtol=1e-13, atol=1e-13)
