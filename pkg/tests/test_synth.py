import numpy as np
import pytest
from PIL import Image

from copymove.errors import ConfigError, DataError, GenerationError
from copymove.synth import (ForgerySpec, generate_dataset, generate_pristine,
                            generate_sample, load_dataset,
                            mean_gradient_magnitude)


class TestForgerySpec:
    def test_defaults_are_valid(self):
        ForgerySpec(height=64, width=64)

    @pytest.mark.parametrize("kw", [
        dict(height=4), dict(width=4), dict(shape="triangle"),
        dict(size_fraction=0.01), dict(size_fraction=0.3),
        dict(rotation=90.0), dict(rotation=-50.0),
        dict(scale=0.5), dict(scale=2.0), dict(domain="c")])
    def test_out_of_range_rejected(self, kw):
        base = dict(height=64, width=64)
        base.update(kw)
        with pytest.raises(ConfigError):
            ForgerySpec(**base)


class TestGenerateSample:
    def test_deterministic(self):
        spec = ForgerySpec(height=64, width=64, seed=7)
        a = generate_sample(spec)
        b = generate_sample(spec)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_seeds_differ(self):
        a = generate_sample(ForgerySpec(height=64, width=64, seed=1))
        b = generate_sample(ForgerySpec(height=64, width=64, seed=2))
        assert not np.array_equal(a.image, b.image)

    def test_mask_is_binary_and_both_regions(self):
        spec = ForgerySpec(height=64, width=64, size_fraction=0.06, seed=3)
        s = generate_sample(spec)
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8
        assert s.mask.shape == (64, 64) and s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) == {0, 255}
        frac = (s.mask == 255).mean()
        # source plus a disjoint copy of roughly equal area
        assert 2 * 0.06 * 0.5 <= frac <= 2 * 0.06 * 1.5

    def test_pure_copy_destination_matches_source(self):
        spec = ForgerySpec(height=64, width=64, rotation=0.0, scale=1.0,
                           dest_offset=(20, 15), seed=11, size_fraction=0.05)
        s = generate_sample(spec)
        marked = s.mask == 255
        coords = np.argwhere(marked)
        # every marked pixel whose (+20, +15) shift is also marked must be
        # an exact copy: those are exactly the source/destination pairs
        shifted = coords + np.array([20, 15])
        inside = (shifted[:, 0] < 64) & (shifted[:, 1] < 64)
        pairs = 0
        for (i, j), (di, dj) in zip(coords[inside], shifted[inside]):
            if marked[di, dj]:
                assert np.array_equal(s.image[i, j], s.image[di, dj])
                pairs += 1
        assert pairs > 0

    def test_regions_disjoint(self):
        for seed in range(4):
            s = generate_sample(ForgerySpec(height=64, width=64,
                                            rotation=10.0, seed=seed))
            frac = (s.mask == 255).mean()
            assert frac > 0.04

    def test_rotated_sample_valid(self):
        s = generate_sample(ForgerySpec(height=64, width=64, rotation=25.0,
                                        scale=1.1, seed=5))
        assert set(np.unique(s.mask)) <= {0, 255}
        assert (s.mask == 255).any()

    def test_impossible_placement_raises(self):
        with pytest.raises(GenerationError):
            generate_sample(ForgerySpec(height=8, width=8,
                                        size_fraction=0.25, seed=0))


class TestDomains:
    def test_gradient_gap(self):
        ratios = []
        for seed in range(5):
            smooth = generate_pristine("a", seed, 64, 64)
            busy = generate_pristine("b", seed, 64, 64)
            ga = mean_gradient_magnitude(smooth.image)
            gb = mean_gradient_magnitude(busy.image)
            ratios.append(gb / ga)
        assert min(ratios) >= 2.0

    def test_pristine_mask_empty(self):
        s = generate_pristine("b", 3, 32, 48)
        assert s.mask.shape == (32, 48)
        assert not s.mask.any()


class TestDataset:
    def test_layout_and_roundtrip(self, tmp_path):
        manifest = generate_dataset(4, "a", seed=9, out_dir=tmp_path / "d",
                                    n_pristine=2)
        assert manifest.name == "manifest.txt"
        lines = manifest.read_text().splitlines()
        assert len(lines) == 6
        for line in lines:
            assert len(line.split("\t")) == 4
        samples = load_dataset(manifest)
        assert len(samples) == 6
        for k, s in enumerate(samples):
            assert s.domain == "a"
            assert s.image.shape == (64, 64, 3)
            if k < 4:
                assert (s.mask == 255).any()
            else:
                assert not s.mask.any()

    def test_regeneration_is_identical(self, tmp_path):
        m1 = generate_dataset(3, "b", seed=5, out_dir=tmp_path / "one")
        m2 = generate_dataset(3, "b", seed=5, out_dir=tmp_path / "two")
        assert m1.read_text() == m2.read_text()
        for s1, s2 in zip(load_dataset(m1), load_dataset(m2)):
            assert np.array_equal(s1.image, s2.image)
            assert np.array_equal(s1.mask, s2.mask)
            assert s1.seed == s2.seed

    def test_roundtrip_bit_exact(self, tmp_path):
        spec = ForgerySpec(height=64, width=64, seed=21)
        direct = generate_sample(spec)
        manifest = generate_dataset(0, "a", seed=21, out_dir=tmp_path,
                                    n_pristine=0)
        # write the sample through the same png path by hand
        (tmp_path / "images").mkdir(exist_ok=True)
        (tmp_path / "masks").mkdir(exist_ok=True)
        Image.fromarray(direct.image, mode="RGB").save(tmp_path / "images/x.png")
        Image.fromarray(direct.mask, mode="L").save(tmp_path / "masks/x.png")
        manifest.write_text("images/x.png\tmasks/x.png\ta\t21\n")
        loaded = load_dataset(manifest)[0]
        assert np.array_equal(loaded.image, direct.image)
        assert np.array_equal(loaded.mask, direct.mask)

    def test_bad_domain_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_dataset(1, "z", seed=0, out_dir=tmp_path)

    def test_negative_count_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_dataset(-1, "a", seed=0, out_dir=tmp_path)


class TestLoadDatasetValidation:
    def _write_pair(self, root):
        (root / "images").mkdir(parents=True)
        (root / "masks").mkdir(parents=True)
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        msk = np.zeros((16, 16), dtype=np.uint8)
        msk[2:5, 2:5] = 255
        Image.fromarray(img, "RGB").save(root / "images/0000.png")
        Image.fromarray(msk, "L").save(root / "masks/0000.png")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest not found"):
            load_dataset(tmp_path / "nope.txt")

    def test_missing_mask_named_in_error(self, tmp_path):
        self._write_pair(tmp_path)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("images/0000.png\tmasks/9999.png\ta\t0\n")
        with pytest.raises(DataError, match=r"manifest\.txt:1.*9999"):
            load_dataset(manifest)

    def test_wrong_field_count(self, tmp_path):
        self._write_pair(tmp_path)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("images/0000.png\tmasks/0000.png\ta\n")
        with pytest.raises(DataError, match="4 tab-separated fields"):
            load_dataset(manifest)

    def test_gray_mask_rejected(self, tmp_path):
        self._write_pair(tmp_path)
        gray = np.full((16, 16), 128, dtype=np.uint8)
        Image.fromarray(gray, "L").save(tmp_path / "masks/0000.png")
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("images/0000.png\tmasks/0000.png\ta\t0\n")
        with pytest.raises(DataError, match=r"outside \{0, 255\}"):
            load_dataset(manifest)

    def test_size_mismatch_rejected(self, tmp_path):
        self._write_pair(tmp_path)
        small = np.zeros((8, 8), dtype=np.uint8)
        Image.fromarray(small, "L").save(tmp_path / "masks/0000.png")
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("images/0000.png\tmasks/0000.png\ta\t0\n")
        with pytest.raises(DataError, match="sizes differ"):
            load_dataset(manifest)

    def test_bad_seed_rejected(self, tmp_path):
        self._write_pair(tmp_path)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("images/0000.png\tmasks/0000.png\ta\tseven\n")
        with pytest.raises(DataError, match="bad seed"):
            load_dataset(manifest)

    def test_blank_lines_skipped(self, tmp_path):
        self._write_pair(tmp_path)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("\nimages/0000.png\tmasks/0000.png\ta\t0\n\n")
        assert len(load_dataset(manifest)) == 1
