import numpy as np
import pytest
from PIL import Image

from conftest import micro_config
from protocase import explain as E
from protocase import network as N
from protocase import trainer as T
from protocase.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def projected(micro_train):
    st = N.init_model(micro_config(), np.random.default_rng(8))
    T.stage_a2_project(st, micro_train)
    return st


def test_activation_map_basic(projected, micro_train):
    img = micro_train[0].image
    amap = E.activation_map(projected, img, 0)
    assert amap.shape == img.shape and np.all(amap > 0)
    raw = N.forward(projected, img).sim_maps[0, 0]
    r, c = np.unravel_index(np.argmax(raw), raw.shape)
    pix = E.feature_to_image((r, c), raw.shape, img.shape)
    assert amap[pix] == pytest.approx(raw.max(), rel=1e-12)
    assert E.threshold_top_tau(amap, 0.95)[pix] == 1.0


def test_constant_map_upsamples_constant():
    from protocase.autodiff import bilinear_upsample_array
    np.testing.assert_array_equal(bilinear_upsample_array(np.full((4, 4), 0.3), (16, 16)), np.full((16, 16), 0.3))


def test_activation_map_rejects_inactive(projected, micro_train):
    st = projected.copy()
    st.proto_active[2] = False
    with pytest.raises(ConfigError, match="inactive"):
        E.activation_map(st, micro_train[0].image, 2)


def test_cav_single_prototype_and_range(projected, micro_train):
    img = micro_train[1].image
    st = projected.copy()
    st.proto_active[1] = False                        # type 0 keeps only prototype 0
    cav = E.class_activation_visualization(st, img, 0)
    amap = E.activation_map(st, img, 0)
    np.testing.assert_allclose(cav, (amap - amap.min()) / (amap.max() - amap.min()), atol=1e-12)
    full = E.class_activation_visualization(projected, img, "spiculated")
    assert full.min() == 0.0 and full.max() == 1.0


def test_cav_two_prototype_hand_sum(projected, micro_train):
    img = micro_train[2].image
    fr = N.forward(projected, img)
    maps = [E.activation_map(projected, img, j) for j in (2, 3)]
    s = fr.scores[0, [2, 3]]
    num = (s[0] * maps[0] + s[1] * maps[1]) / (s[0] + s[1])
    expect = (num - num.min()) / (num.max() - num.min())
    np.testing.assert_allclose(E.class_activation_visualization(projected, img, 1), expect, atol=1e-12)


def test_visualize_prototype(projected, micro_train):
    for j in projected.active_indices:
        view = E.visualize_prototype(projected, j, micro_train)
        assert view.raw_map[view.source_patch] == view.raw_map.max()
        r0, r1, c0, c1 = view.box
        assert r0 <= view.source_pixel[0] <= r1 and c0 <= view.source_pixel[1] <= c1
        assert view.overlay().shape[:2] == view.image.shape


def test_visualize_missing_source(projected, micro_train):
    with pytest.raises(DataError, match=projected.proto_sources[0][0]):
        E.visualize_prototype(projected, 0, [s for s in micro_train if s.id != projected.proto_sources[0][0]])


def test_explanation_reconstructs_logits(projected, micro_train):
    for s in micro_train[:5]:
        ex = E.explain_case(projected, s.image, s.id, s.margin_label)
        np.testing.assert_array_equal(ex.reconstruct_logits(), ex.margin_logits)
        pred = ex.predicted
        kinds = [e.margin_type == pred for e in ex.evidence]
        assert kinds == sorted(kinds, reverse=True)
        own = [e.similarity for e in ex.evidence if e.margin_type == pred]
        assert own == sorted(own, reverse=True)


def test_render_case_writes_files(projected, micro_train, tmp_path):
    s = micro_train[0]
    ex = E.explain_case(projected, s.image, s.id, s.margin_label)
    out = E.render_case(projected, ex, s.image, tmp_path, dataset=micro_train, top=2)
    lines = (out / "summary.txt").read_text().splitlines()
    assert lines[0] == f"case,{s.id}" and any(l.startswith("rank,") for l in lines)
    assert (out / "evidence_1.png").exists() and (out / "evidence_2.png").exists()
    cav = Image.open(out / "cav_spiculated.png")
    assert cav.size == s.image.shape[::-1]
