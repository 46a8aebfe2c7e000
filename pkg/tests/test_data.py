import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liteseg.data import (
    AugmentConfig, ManifestDataset, Sample, SyntheticShapesDataset, augment, hflip, normalize, read_manifest,
    rgb_to_chw,
)
from liteseg.imageio import write_image


@pytest.fixture(scope="module")
def shapes():
    return SyntheticShapesDataset(seed=0, num_samples=100)


class TestSyntheticShapes:
    def test_sample_format(self, shapes):
        s = shapes[0]
        assert s.image.shape == (3, 64, 128) and s.image.dtype == np.float32
        assert s.label.shape == (64, 128) and s.label.dtype == np.uint8
        assert 0 <= s.image.min() and s.image.max() <= 1

    def test_same_seed_same_samples(self, shapes):
        again = SyntheticShapesDataset(seed=0, num_samples=100)
        for i in (0, 17, 99):
            assert shapes[i].image.tobytes() == again[i].image.tobytes()
            assert shapes[i].label.tobytes() == again[i].label.tobytes()

    def test_different_seed_differs(self, shapes):
        assert shapes[3].image.tobytes() != SyntheticShapesDataset(seed=1)[3].image.tobytes()

    def test_every_class_present_in_most_samples(self, shapes):
        present = np.zeros(4)
        for i in range(len(shapes)):
            present += np.isin(np.arange(4), shapes[i].label)
        assert (present / len(shapes) >= 0.8).all()

    def test_index_bounds(self, shapes):
        with pytest.raises(IndexError):
            shapes[100]


class TestAugment:
    def test_identity_configuration(self, shapes):
        cfg = AugmentConfig(hflip_prob=0.0, brightness=0.0, contrast=0.0, saturation=0.0)
        s = shapes[5]
        out = augment(s, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.image, normalize(s.image, cfg.mean, cfg.std))
        np.testing.assert_array_equal(out.label, s.label)

    def test_hflip_is_an_involution(self, shapes):
        s = shapes[2]
        back = hflip(hflip(s))
        np.testing.assert_array_equal(back.image, s.image)
        np.testing.assert_array_equal(back.label, s.label)

    def test_forced_flip_mirrors_both(self, shapes):
        cfg = AugmentConfig(hflip_prob=1.0, brightness=0.0, contrast=0.0, saturation=0.0)
        s = shapes[4]
        out = augment(s, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.label, s.label[:, ::-1])

    def test_padding_is_zero_after_normalization_and_ignored(self, shapes):
        cfg = AugmentConfig(scale_range=(0.5, 0.5), hflip_prob=0.0)
        out = augment(shapes[1], cfg, np.random.default_rng(3))
        pad = out.label == 255
        assert pad.sum() == 64 * 128 - 32 * 64
        np.testing.assert_allclose(out.image[:, pad], 0, atol=1e-6)

    def test_cityscapes_crop_is_accepted(self):
        assert AugmentConfig(scale_range=(0.125, 1.5), crop=(512, 1024)).crop == (512, 1024)

    @pytest.mark.parametrize("kwargs", [{"crop": (60, 128)}, {"scale_range": (2.0, 1.0)}, {"scale_range": (0.0, 1.0)}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            AugmentConfig(**kwargs)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_label_values_stay_in_original_set(self, seed):
        rng = np.random.default_rng(seed)
        s = SyntheticShapesDataset(seed=seed % 7, num_samples=4)[seed % 4]
        out = augment(s, AugmentConfig(scale_range=(0.5, 2.0)), rng)
        assert set(np.unique(out.label)) <= set(np.unique(s.label)) | {255}
        assert out.image.shape == (3, 64, 128) and out.label.shape == (64, 128)

    def test_geometry_is_shared_by_image_and_label(self):
        # a two-colour image whose label is its own colour index survives any crop / flip / rescale
        image = np.zeros((3, 64, 128), np.float32)
        label = np.zeros((64, 128), np.uint8)
        image[:, :, 64:] = 1.0
        label[:, 64:] = 1
        cfg = AugmentConfig(scale_range=(1.0, 2.0), brightness=0.0, contrast=0.0, saturation=0.0)
        for seed in range(5):
            out = augment(Sample(image, label), cfg, np.random.default_rng(seed))
            raw = out.image * np.asarray(cfg.std)[:, None, None] + np.asarray(cfg.mean)[:, None, None]
            sure = (raw[0] < 0.01) | (raw[0] > 0.99)
            np.testing.assert_array_equal((raw[0] > 0.5)[sure], (out.label == 1)[sure])


class TestManifest:
    def test_relative_paths_and_optional_prediction(self, tmp_path):
        (tmp_path / "sub").mkdir()
        manifest = tmp_path / "sub" / "list.txt"
        manifest.write_text("# comment\na.png\tb.png\n\n/abs/c.png\td.png\te.png\n")
        entries = read_manifest(manifest)
        assert len(entries) == 2
        assert entries[0].image == str(tmp_path / "sub" / "a.png") and entries[0].prediction is None
        assert entries[1].image == "/abs/c.png" and entries[1].prediction.endswith("e.png")

    def test_bad_column_count(self, tmp_path):
        manifest = tmp_path / "list.txt"
        manifest.write_text("only_one_column.png\n")
        with pytest.raises(ValueError, match="list.txt:1"):
            read_manifest(manifest)

    def test_dataset_reads_pairs(self, tmp_path, rng):
        rgb = rng.integers(0, 256, size=(32, 64, 3), dtype=np.uint8)
        lab = rng.integers(0, 4, size=(32, 64)).astype(np.uint8)
        write_image(tmp_path / "img.png", rgb)
        write_image(tmp_path / "lab.png", lab)
        (tmp_path / "m.txt").write_text("img.png\tlab.png\n")
        ds = ManifestDataset(tmp_path / "m.txt")
        s = ds[0]
        np.testing.assert_allclose(s.image, rgb_to_chw(rgb))
        np.testing.assert_array_equal(s.label, lab)
