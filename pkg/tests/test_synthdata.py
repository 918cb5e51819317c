import json
import math

import numpy as np
import pytest

from segbet.errors import ConfigError, DataError, DegenerateInputError
from segbet.synthdata import (
    SceneSpec,
    augment,
    check_structural_rules,
    generate_scene,
    inject_label_noise,
    read_dataset,
    write_dataset,
)


class TestSceneSpec:
    def test_class_count_bounds(self):
        with pytest.raises(ConfigError):
            SceneSpec(num_classes=1)
        with pytest.raises(ConfigError):
            SceneSpec(num_classes=20)

    def test_noise_rate_bounds(self):
        with pytest.raises(ConfigError):
            SceneSpec(noise_rate=1.5)

    def test_kind_cycle(self):
        spec = SceneSpec(num_classes=5)
        assert [spec.kind_of_class(k) for k in range(1, 5)] == ["bar", "disk", "rect", "pole"]

    def test_spec_hash_stable(self):
        assert SceneSpec(seed=1).spec_hash() == SceneSpec(seed=1).spec_hash()
        assert SceneSpec(seed=1).spec_hash() != SceneSpec(seed=2).spec_hash()


class TestGenerateScene:
    def test_deterministic(self):
        spec = SceneSpec(seed=5, noise_rate=0.1)
        a = generate_scene(spec, 3)
        b = generate_scene(spec, 3)
        assert a == b

    def test_different_indices_differ(self):
        spec = SceneSpec(seed=5)
        assert generate_scene(spec, 0) != generate_scene(spec, 1)

    def test_zero_noise_clean_equals_noisy(self):
        sample = generate_scene(SceneSpec(seed=6, noise_rate=0.0), 0)
        assert np.array_equal(sample.clean, sample.noisy)

    def test_noise_cap_invariant(self):
        for rate in (0.05, 0.1, 0.3):
            sample = generate_scene(SceneSpec(seed=7, noise_rate=rate), 0)
            changed = (sample.clean != sample.noisy).sum()
            assert changed <= math.ceil(rate * sample.clean.size)
            assert changed == round(rate * sample.clean.size)

    def test_disk_pixel_count_in_radius_bounds(self):
        # single-disk spec; the geometry oracle bounds the rasterized area
        spec = SceneSpec(
            num_classes=3, seed=7,
            bar_count=(0, 0), disk_count=(1, 1), disk_radius=(4, 8),
        )
        for idx in range(20):
            sample = generate_scene(spec, idx)
            count = int((sample.clean == 2).sum())
            r_lo, r_hi = spec.disk_radius
            assert math.pi * (r_lo - 1) ** 2 <= count <= math.pi * (r_hi + 1) ** 2

    def test_rgb_range_and_quantization(self):
        sample = generate_scene(SceneSpec(seed=8), 0)
        assert sample.rgb.min() >= 0.0 and sample.rgb.max() <= 1.0
        levels = np.round(sample.rgb * 255.0)
        assert np.allclose(levels / 255.0, sample.rgb, atol=1e-7)

    def test_unsatisfiable_rules_raise(self):
        spec = SceneSpec(num_classes=3, seed=9, bar_count=(0, 0),
                         disk_count=(2, 2), disk_radius=(30, 31))
        with pytest.raises(DegenerateInputError):
            generate_scene(spec, 0)

    def test_structural_audit_over_200_images(self):
        spec = SceneSpec(seed=10)
        presence = np.zeros(spec.num_classes)
        for idx in range(200):
            sample = generate_scene(spec, idx)
            assert check_structural_rules(sample.clean, spec) == []
            for k in range(spec.num_classes):
                presence[k] += (sample.clean == k).any()
        # every non-background class appears in at least 80% of images
        assert np.all(presence[1:] >= 0.8 * 200)


class TestInjectLabelNoise:
    def test_rate_zero_identity(self):
        label = np.random.default_rng(0).integers(0, 4, (20, 20))
        assert np.array_equal(inject_label_noise(label, 0.0, 1, 4), label)

    def test_rate_one_changes_everything(self):
        label = np.random.default_rng(1).integers(0, 4, (20, 20))
        noisy = inject_label_noise(label, 1.0, 2, 4)
        assert np.all(noisy != label)
        assert noisy.min() >= 0 and noisy.max() < 4

    def test_binomial_count_within_three_sigma(self):
        label = np.zeros((100, 100), dtype=np.int64)
        noisy = inject_label_noise(label, 0.1, 3, 4)
        changed = (noisy != label).sum()
        sigma = math.sqrt(10000 * 0.1 * 0.9)
        assert abs(changed - 1000) <= 3 * sigma

    def test_deterministic_per_seed(self):
        label = np.random.default_rng(2).integers(0, 5, (16, 16))
        a = inject_label_noise(label, 0.2, 7, 5)
        b = inject_label_noise(label, 0.2, 7, 5)
        assert np.array_equal(a, b)
        c = inject_label_noise(label, 0.2, 8, 5)
        assert not np.array_equal(a, c)

    def test_ignored_pixels_untouched(self):
        label = np.full((10, 10), 255, dtype=np.int64)
        label[0, 0] = 1
        noisy = inject_label_noise(label, 1.0, 4, 4)
        assert np.all(noisy[label == 255] == 255)
        assert noisy[0, 0] != 1


class TestDatasetIO:
    def test_round_trip_exact(self, tmp_path):
        spec = SceneSpec(seed=11, noise_rate=0.1)
        ds = write_dataset(spec, 5, tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert len(loaded) == 5
        for i in range(5):
            generated = generate_scene(spec, i)
            stored = loaded[i]
            assert np.array_equal(stored.rgb, generated.rgb)
            assert np.array_equal(stored.clean, generated.clean)
            assert np.array_equal(stored.noisy, generated.noisy)
            assert np.array_equal(stored.ignore, generated.ignore)

    def test_manifest_hash_mismatch_raises(self, tmp_path):
        spec = SceneSpec(seed=12)
        write_dataset(spec, 2, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["spec"]["seed"] = 999
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DataError):
            read_dataset(tmp_path / "ds")

    def test_missing_file_raises(self, tmp_path):
        spec = SceneSpec(seed=13)
        write_dataset(spec, 3, tmp_path / "ds")
        (tmp_path / "ds" / "labels" / "0001.png").unlink()
        with pytest.raises(DataError):
            read_dataset(tmp_path / "ds")

    def test_empty_dataset_valid(self, tmp_path):
        write_dataset(SceneSpec(seed=14), 0, tmp_path / "ds")
        assert len(read_dataset(tmp_path / "ds")) == 0

    def test_corrupt_manifest_raises(self, tmp_path):
        spec = SceneSpec(seed=15)
        write_dataset(spec, 1, tmp_path / "ds")
        (tmp_path / "ds" / "manifest.json").write_text("{not json")
        with pytest.raises(DataError):
            read_dataset(tmp_path / "ds")


class TestAugment:
    def _sample(self):
        return generate_scene(SceneSpec(seed=16, noise_rate=0.05), 0)

    def test_flip_twice_identity(self):
        sample = self._sample()
        out = augment(augment(sample, True, None, 0.0, 0), True, None, 0.0, 0)
        assert out == sample

    def test_noop_identity(self):
        sample = self._sample()
        out = augment(sample, False, (64, 64), 0.0, 0)
        assert out == sample

    def test_flip_preserves_label_histogram(self):
        sample = self._sample()
        out = augment(sample, True, None, 0.0, 0)
        assert np.array_equal(np.bincount(sample.clean.ravel(), minlength=5),
                              np.bincount(out.clean.ravel(), minlength=5))

    def test_geometric_transform_shared(self):
        sample = self._sample()
        out = augment(sample, True, (32, 32), 0.0, 3)
        assert out.rgb.shape == (32, 32, 3)
        assert out.clean.shape == (32, 32)
        assert out.noisy.shape == (32, 32)
        assert out.ignore.shape == (32, 32)
        # same crop window: noisy and clean still differ only where noise was
        again = augment(sample, True, (32, 32), 0.0, 3)
        assert out == again

    def test_jitter_only_touches_rgb(self):
        sample = self._sample()
        out = augment(sample, False, None, 0.2, 4)
        assert not np.array_equal(out.rgb, sample.rgb)
        assert np.array_equal(out.clean, sample.clean)

    def test_invalid_crop_raises(self):
        with pytest.raises(ConfigError):
            augment(self._sample(), False, (128, 128), 0.0, 0)
