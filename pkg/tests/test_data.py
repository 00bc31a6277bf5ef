import filecmp
import math

import numpy as np
import pytest

import oracles
from protocase import data as D
from protocase.errors import ChecksumError, ConfigError, ManifestError, MissingFileError


def _tree_equal(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_deterministic(tmp_path):
    cfg = D.GenConfig(n_per_type=1, seed=5)
    D.save(D.generate(cfg), tmp_path / "a")
    D.save(D.generate(cfg), tmp_path / "b")
    assert _tree_equal(tmp_path / "a", tmp_path / "b")


def test_sample_invariants(tiny_dataset):
    for s in tiny_dataset.samples.values():
        assert s.image.shape == s.lesion_mask.shape == (64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.lesion_mask)) <= {0.0, 1.0}
        if s.fine_mask is not None:
            assert s.fine_mask.shape == s.image.shape
            assert set(np.unique(s.fine_mask)) <= {0.0, 1.0}
            assert (s.fine_mask == 0).any()
            # every fine-relevant pixel lies in the lesion region
            assert np.all(s.lesion_mask[s.fine_mask == 0] == 0)


def test_fine_fraction_bounds():
    ds0 = D.generate(D.GenConfig(n_per_type=4, fine_fraction=0.0, seed=1))
    assert all(s.fine_mask is None for s in ds0.samples.values())
    ds1 = D.generate(D.GenConfig(n_per_type=10, fine_fraction=1.0, seed=1))
    fine = [s for s in ds1.samples.values() if s.fine_mask is not None]
    assert len(fine) == 30
    assert all(np.all(s.lesion_mask[s.fine_mask == 0] == 0) for s in fine)


def test_fine_mask_count_per_type():
    ds = D.generate(D.GenConfig(n_per_type=20, fine_fraction=0.12, seed=2))
    for t in D.MARGIN_TYPES:
        n = sum(s.fine_mask is not None for s in ds.samples.values() if s.margin_label == t)
        assert n == math.ceil(0.12 * 20)


def test_splits_are_disjoint_and_counted(tiny_dataset):
    m = tiny_dataset.manifest
    ids = [set(m.ids(s)) for s in D.SPLITS]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(m.counts().values()) == len(m.entries) == 24


def test_planted_malignancy_rates():
    ds = D.generate(D.GenConfig(n_per_type=300, seed=7))
    rates = {t: np.mean([s.malignancy_label for s in ds.samples.values() if s.margin_label == t])
             for t in D.MARGIN_TYPES}
    assert rates["circumscribed"] < rates["indistinct"] < rates["spiculated"]
    assert rates["circumscribed"] == pytest.approx(0.05, abs=0.04)
    assert rates["spiculated"] == pytest.approx(0.9, abs=0.05)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        D.generate(D.GenConfig(n_per_type=0))
    with pytest.raises(ConfigError):
        D.generate(D.GenConfig(fine_fraction=1.5))
    with pytest.raises(ConfigError, match="too small"):
        D.generate(D.GenConfig(n_per_type=1, image_size=(24, 24)))


def test_classes_separable_by_scripted_oracle():
    ds = D.generate(D.GenConfig(n_per_type=60, seed=101))
    acc = np.mean([oracles.oracle_margin_classifier(s.image) == s.margin_index for s in ds.samples.values()])
    assert acc >= 0.95


def test_confounder_tag_follows_margin_type():
    ds = D.generate(D.GenConfig(n_per_type=30, seed=4, confounder_strength=1.0))
    for s in ds.samples.values():
        corner = D._TAG_CORNERS[s.margin_label]
        assert np.all(s.image[D._tag_slice(corner, s.image.shape)] == np.round(D.TAG_LEVEL * 255) / 255)


# augmentation -------------------------------------------------------------------

def test_identity_augmentation_is_exact(tiny_dataset):
    s = next(iter(tiny_dataset.samples.values()))
    out = D.apply_augment(s, D.AugmentParams())
    assert out == s


def test_crop_is_eighty_percent():
    p = D.draw_augment_params(np.random.default_rng(0), (64, 64))
    assert p.crop[2:] == (51, 51)
    assert 0 <= p.crop[0] <= 13 and 0 <= p.crop[1] <= 13


def test_augmentation_keeps_labels_and_alignment():
    ds, geoms = D.generate(D.GenConfig(n_per_type=6, seed=8, fine_fraction=1.0), keep_geometry=True)
    rng = np.random.default_rng(0)
    for s in ds.samples.values():
        params = D.draw_augment_params(rng, s.image.shape)
        out = D.apply_augment(s, params)
        assert (out.margin_label, out.malignancy_label) == (s.margin_label, s.malignancy_label)
        rows, cols = params.source_coords(s.image.shape)
        rel = out.fine_mask == 0
        if not rel.any():
            continue
        band = geoms[s.id].band(rows, cols, extra=1.0)
        assert band[rel].mean() >= 0.95


def test_augment_deterministic_under_seed(tiny_dataset):
    s = next(iter(tiny_dataset.samples.values()))
    a = D.augment(s, np.random.default_rng(3))
    b = D.augment(s, np.random.default_rng(3))
    assert a == b


# persistence -------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, tiny_dataset):
    D.save(tiny_dataset, tmp_path)
    assert D.load(tmp_path) == tiny_dataset


def test_missing_image_names_file(tmp_path, tiny_dataset):
    D.save(tiny_dataset, tmp_path)
    victim = tmp_path / tiny_dataset.manifest.entries[3].image
    victim.unlink()
    with pytest.raises(MissingFileError, match=victim.name) as exc:
        D.load(tmp_path)
    assert exc.value.code == "data.missing_file"


def test_tampered_byte_fails_checksum(tmp_path, tiny_dataset):
    D.save(tiny_dataset, tmp_path)
    victim = tmp_path / tiny_dataset.manifest.entries[0].lesion_mask
    raw = bytearray(victim.read_bytes())
    raw[-20] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError) as exc:
        D.load(tmp_path)
    assert exc.value.code == "data.checksum"


def test_malformed_manifest(tmp_path, tiny_dataset):
    D.save(tiny_dataset, tmp_path)
    path = tmp_path / "manifest.txt"
    path.write_text(path.read_text().replace("n_train =", "n_train ="[:-1] + "= 9999 #"))
    with pytest.raises(ManifestError) as exc:
        D.load(tmp_path)
    assert exc.value.code == "data.manifest"
    path.write_text("garbage without equals\n")
    with pytest.raises(ManifestError):
        D.read_manifest(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFileError):
        D.load(tmp_path)
