import logging

import numpy as np
import pytest
from scipy import ndimage

from nlcen import data
from nlcen.data import SampleRecord, SyntheticConfig, augment, load_dataset, save_dataset, synth_generate


@pytest.fixture(scope="module")
def lungs():
    return synth_generate(SyntheticConfig(kind="lung-like", count=100, seed=3))


@pytest.fixture(scope="module")
def lesions():
    return synth_generate(SyntheticConfig(kind="lesion-like", count=100, seed=3))


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(count=6, seed=11)
        a, b = synth_generate(cfg), synth_generate(cfg)
        for ra, rb in zip(a, b):
            assert ra.id == rb.id and ra.split == rb.split
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.mask, rb.mask)

    def test_seed_changes_data(self):
        a = synth_generate(SyntheticConfig(count=1, seed=0))[0]
        b = synth_generate(SyntheticConfig(count=1, seed=1))[0]
        assert not np.array_equal(a.image, b.image)

    def test_lung_two_components(self, lungs):
        assert all(ndimage.label(r.mask)[1] == 2 for r in lungs)

    def test_lesion_one_component(self, lesions):
        assert all(ndimage.label(r.mask)[1] == 1 for r in lesions)

    @pytest.mark.parametrize("kind", data.KINDS)
    def test_area_fraction_in_bounds(self, kind, lungs, lesions):
        recs = lungs if kind == "lung-like" else lesions
        fracs = np.array([r.mask.mean() for r in recs])
        assert 0.1 <= fracs.mean() <= 0.4
        assert fracs.min() >= 0.1 and fracs.max() <= 0.4

    def test_channels(self, lungs, lesions):
        assert lungs[0].image.shape == (64, 64, 1) and lesions[0].image.shape == (64, 64, 3)
        assert lungs[0].image.dtype == np.uint8

    def test_splits_disjoint(self):
        recs = synth_generate(SyntheticConfig(count=250, seed=0))
        train = {r.id for r in recs if r.split == "train"}
        test = {r.id for r in recs if r.split == "test"}
        assert len(train) == 200 and len(test) == 50 and not train & test

    def test_side_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            SyntheticConfig(side=16)


def _toy(split="train"):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(32, 32, 1), dtype=np.uint8)
    mask = np.zeros((32, 32), np.uint8)
    mask[8:20, 10:24] = 1
    return SampleRecord(img, mask, "toy", split)


class TestAugment:
    def test_identity_when_all_coins_fail(self):
        s = _toy()
        seed = next(k for k in range(1000) if np.all(np.random.default_rng(k).random(3) >= 0.5))
        out = augment(s, seed)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_double_hflip_identity(self):
        s = _toy()
        out = data.hflip(data.hflip(s))
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_rotation_round_trip(self):
        for s in synth_generate(SyntheticConfig(count=10, seed=5, test_fraction=0.0)):
            back = data.rotate(data.rotate(s, 10.0), -10.0)
            assert np.mean(back.mask == s.mask) >= 0.95

    def test_preserves_binarity_and_range(self):
        for i, s in enumerate(synth_generate(SyntheticConfig(kind="lesion-like", count=20, test_fraction=0.0))):
            out = augment(s, i)
            assert set(np.unique(out.mask)) <= {0, 1}
            assert out.image.dtype == np.uint8 and out.image.shape == s.image.shape

    def test_test_split_rejected(self):
        with pytest.raises(ValueError, match="train split"):
            augment(_toy("test"), 0)


class TestIO:
    @pytest.mark.parametrize("kind", data.KINDS)
    def test_round_trip(self, tmp_path, kind):
        recs = synth_generate(SyntheticConfig(kind=kind, count=5, seed=2))
        save_dataset(recs, tmp_path)
        back = load_dataset(tmp_path)
        assert [r.id for r in back] == [r.id for r in recs]
        for a, b in zip(recs, back):
            assert a.split == b.split
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_layout(self, tmp_path):
        recs = synth_generate(SyntheticConfig(kind="lesion-like", count=2))
        save_dataset(recs, tmp_path)
        assert (tmp_path / "images" / f"{recs[0].id}.ppm").read_bytes().startswith(b"P6")
        assert (tmp_path / "masks" / f"{recs[0].id}.pgm").read_bytes().startswith(b"P5")
        lines = (tmp_path / "split.txt").read_text().splitlines()
        assert lines[0] == f"{recs[0].id} train"

    def test_empty_directory_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            assert load_dataset(tmp_path) == []
        assert "empty" in caplog.text

    def test_missing_mask(self, tmp_path):
        save_dataset([_toy()], tmp_path)
        (tmp_path / "masks" / "toy.pgm").unlink()
        with pytest.raises(data.MissingMaskError, match="toy"):
            load_dataset(tmp_path)

    def test_to_arrays(self):
        imgs, masks = data.to_arrays([_toy(), _toy()])
        assert imgs.shape == (2, 1, 32, 32) and imgs.dtype == np.float64
        assert masks.shape == (2, 32, 32)
