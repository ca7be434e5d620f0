import json

import numpy as np
import pytest

from medconv.data import (
    AugPolicy,
    ClassStats,
    DataError,
    Manifest,
    PhantomConfig,
    SampleRecord,
    Volume,
    VolumeFormatError,
    augment_sample,
    balanced_augment_policy,
    class_stats,
    generate_phantoms,
    load_volume,
    mask_crop,
    oversample_indices,
    sample_rng,
    save_volume,
    window_intensity,
)
from medconv.data.augment import flip
from medconv.data.loader import Preprocessing, load_split, prepare_volume
from medconv.data.phantoms import render_phantom
from medconv.data.preprocess import bounding_box, resample, window_array
from medconv.data.sampling import largest_remainder
from medconv.data.volume import VolumeSizeError, VolumeTruncatedError


class TestVolume:
    def test_round_trip(self, tmp_path, rng):
        vol = Volume(rng.normal(size=(4, 4, 4)).astype(np.float32), (0.5, 0.5, 1.25))
        save_volume(vol, tmp_path / "v.mcvl")
        back = load_volume(tmp_path / "v.mcvl")
        assert back.values.tobytes() == vol.values.tobytes()
        assert back.spacing == (0.5, 0.5, 1.25)

    def test_layout(self, tmp_path):
        values = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        save_volume(Volume(values), tmp_path / "v.mcvl")
        raw = (tmp_path / "v.mcvl").read_bytes()
        assert raw[:4] == b"MCVL"
        assert np.frombuffer(raw, "<u4", count=5, offset=4).tolist() == [1, 4, 3, 2, 1]
        payload = np.frombuffer(raw, "<f4", offset=24)
        # index = ((z * dy) + y) * dx + x
        assert payload[((1 * 3) + 2) * 4 + 3] == values[1, 2, 3]
        assert Volume(values).dims == (4, 3, 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "v.mcvl").write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(VolumeFormatError, match="magic"):
            load_volume(tmp_path / "v.mcvl")

    def test_truncated(self, tmp_path):
        save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "v.mcvl")
        raw = (tmp_path / "v.mcvl").read_bytes()
        (tmp_path / "t.mcvl").write_bytes(raw[:-4])
        with pytest.raises(VolumeTruncatedError, match="63"):
            load_volume(tmp_path / "t.mcvl")

    def test_oversized_payload(self, tmp_path):
        save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "v.mcvl")
        (tmp_path / "v.mcvl").write_bytes((tmp_path / "v.mcvl").read_bytes() + bytes(8))
        with pytest.raises(VolumeSizeError):
            load_volume(tmp_path / "v.mcvl")

    def test_errors_are_distinct(self):
        assert not issubclass(VolumeTruncatedError, VolumeSizeError)
        assert not issubclass(VolumeSizeError, VolumeTruncatedError)


class TestWindow:
    def test_centre_maps_to_half(self):
        assert window_array(np.array([300.0]), 300, 1500)[0] == 0.5

    def test_floor_and_ceiling(self):
        out = window_array(np.array([-2000.0, -450.0, 1050.0, 5000.0]), 300, 1500)
        np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 1.0])

    def test_monotone_and_bounded(self, rng):
        x = np.sort(rng.normal(0, 1000, 500))
        out = window_array(x, 300, 1500)
        assert np.all(np.diff(out) >= 0)
        assert out.min() >= 0 and out.max() <= 1

    def test_idempotent_on_unit_window(self, rng):
        out = window_array(rng.normal(0, 1000, 100), 300, 1500)
        np.testing.assert_allclose(window_array(out, 0.5, 1.0), out, atol=1e-7)

    @pytest.mark.parametrize("width", [0.0, -5.0])
    def test_bad_width(self, width):
        with pytest.raises(ValueError, match="width"):
            window_intensity(Volume(np.zeros((2, 2, 2))), 0, width)


class TestMaskCrop:
    def test_full_mask_identity(self, rng):
        vol = Volume(rng.normal(size=(5, 6, 7)))
        out = mask_crop(vol, Volume(np.ones((5, 6, 7))), 0, (5, 6, 7))
        np.testing.assert_allclose(out.values, vol.values, atol=1e-6)

    def test_single_voxel_box(self):
        mask = np.zeros((8, 8, 8))
        mask[2, 2, 2] = 1
        assert bounding_box(mask > 0, 2) == ((0, 4), (0, 4), (0, 4))
        vol = Volume(np.arange(512, dtype=np.float32).reshape(8, 8, 8))
        out = mask_crop(vol, Volume(mask), 2, (5, 5, 5))
        np.testing.assert_array_equal(out.values, vol.values[:5, :5, :5])

    def test_box_clamped(self):
        mask = np.zeros((8, 8, 8))
        mask[7, 0, 3] = 1
        assert bounding_box(mask > 0, 2) == ((5, 7), (0, 2), (1, 5))

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="no L1 voxels"):
            mask_crop(Volume(np.ones((4, 4, 4))), Volume(np.zeros((4, 4, 4))), 1, (4, 4, 4))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            mask_crop(Volume(np.ones((4, 4, 4))), Volume(np.ones((4, 4, 5))), 1, (4, 4, 4))

    def test_trilinear_midpoint(self):
        values = np.zeros((2, 2, 2), dtype=np.float32)
        values[1, 1, 1] = 8.0
        out = resample(values, ((0, 1), (0, 1), (0, 1)), (3, 3, 3))
        assert out[1, 1, 1] == pytest.approx(1.0)
        assert out[2, 2, 2] == pytest.approx(8.0)

    def test_nearest_for_masks(self):
        mask = np.zeros((6, 6, 6), dtype=np.float32)
        mask[1:5, 1:5, 1:5] = 1
        out = resample(mask, ((0, 5), (0, 5), (0, 5)), (11, 11, 11), order=0)
        assert set(np.unique(out)) == {0.0, 1.0}


class TestAugment:
    def test_double_flip(self, rng):
        x = rng.normal(size=(4, 5, 6))
        for axis in range(3):
            np.testing.assert_array_equal(flip(flip(x, axis), axis), x)

    def test_jitter_bounds(self, rng):
        x = rng.random((8, 8, 8)).astype(np.float32)
        for i in range(50):
            out = augment_sample(x, AugPolicy(prob=1.0), sample_rng(0, 0, i))
            assert out.min() >= 0.9 * x.min() - 0.05 - 1e-6
            assert out.max() <= 1.1 * x.max() + 0.05 + 1e-6

    def test_deterministic(self, rng):
        x = rng.random((8, 8, 8)).astype(np.float32)
        a = augment_sample(x, AugPolicy(prob=1.0), sample_rng(3, 1, 7))
        b = augment_sample(x, AugPolicy(prob=1.0), sample_rng(3, 1, 7))
        assert a.tobytes() == b.tobytes()

    def test_prob_zero_untouched(self, rng):
        x = rng.random((6, 6, 6)).astype(np.float32)
        assert augment_sample(x, AugPolicy(prob=0.0), sample_rng(0, 0, 0)) is x

    def test_shape_preserved(self, rng):
        x = rng.random((7, 8, 9)).astype(np.float32)
        assert augment_sample(x, AugPolicy(prob=1.0), sample_rng(1, 2, 3)).shape == x.shape

    def test_invalid_prob(self):
        with pytest.raises(ValueError):
            AugPolicy(prob=1.5)


class TestBalancedPolicy:
    def test_balanced_counts(self):
        out = balanced_augment_policy(ClassStats("train", np.array([5, 5, 5])), AugPolicy(prob=0.3))
        assert [p.prob for p in out.values()] == [0.3, 0.3, 0.3]

    def test_long_tail(self):
        out = balanced_augment_policy(ClassStats("train", np.array([70, 20, 10])), AugPolicy(prob=0.3))
        assert out[0].prob == 0.3
        assert 0.3 < out[1].prob < out[2].prob
        assert out[1].prob == pytest.approx(0.3 * 0.8 / 0.3)

    def test_cap(self):
        out = balanced_augment_policy(np.array([0.7, 0.2, 0.1]), AugPolicy(prob=1.0))
        assert [p.prob for p in out.values()] == [1.0, 1.0, 1.0]


class TestSampling:
    def test_largest_remainder(self):
        assert largest_remainder(200, (0.6, 0.25, 0.15)) == [120, 50, 30]
        assert largest_remainder(750, (0.6, 0.25, 0.15)) == [450, 188, 112]
        assert sum(largest_remainder(7, (1, 1, 1))) == 7

    def test_oversample_counts(self):
        labels = np.repeat([0, 1, 2], [70, 20, 10])
        idx = oversample_indices(labels, seed=0, enabled=True)
        assert len(idx) == 210
        np.testing.assert_array_equal(np.bincount(labels[idx]), [70, 70, 70])
        # every original sample is kept at least once
        assert set(idx.tolist()) == set(range(100))

    def test_disabled_is_permutation(self):
        labels = np.repeat([0, 1, 2], [7, 2, 1])
        idx = oversample_indices(labels, seed=4, enabled=False)
        assert sorted(idx.tolist()) == list(range(10))

    def test_deterministic(self):
        labels = np.repeat([0, 1], [9, 3])
        a = oversample_indices(labels, 5, True, epoch=2)
        assert a.tolist() == oversample_indices(labels, 5, True, epoch=2).tolist()
        assert a.tolist() != oversample_indices(labels, 5, True, epoch=3).tolist()


def small_manifest(tmp_path, labels=(0, 1, 2), split="train"):
    records = [SampleRecord(f"v{i}.mcvl", k, ("normal", "osteopenia", "osteoporosis")[k], split)
               for i, k in enumerate(labels)]
    return Manifest({0: "normal", 1: "osteopenia", 2: "osteoporosis"}, records, tmp_path)


class TestManifest:
    def test_csv_round_trip(self, tmp_path):
        m = small_manifest(tmp_path)
        m.records[0].mask_path = "m0.mcvl"
        m.to_csv(tmp_path / "manifest.csv")
        back = Manifest.from_csv(tmp_path / "manifest.csv")
        assert back.records == m.records
        assert back.checksum() == m.checksum()
        assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "path,mask_path,label,class_name,split"

    def test_bad_header(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("file,label\nx,0\n")
        with pytest.raises(DataError, match="header"):
            Manifest.from_csv(tmp_path / "manifest.csv")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            Manifest.from_csv(tmp_path / "nope.csv")

    def test_bad_split(self, tmp_path):
        m = small_manifest(tmp_path, split="holdout")
        with pytest.raises(DataError, match="split"):
            m.validate()

    def test_sparse_class_ids(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("path,mask_path,label,class_name,split\nv.mcvl,,2,c,train\n")
        with pytest.raises(DataError, match="dense"):
            Manifest.from_csv(tmp_path / "manifest.csv")


class TestClassStats:
    def test_one_per_class(self, tmp_path):
        stats = class_stats(small_manifest(tmp_path), "train")
        np.testing.assert_allclose(stats.frequencies, [1 / 3] * 3, atol=1e-15)
        assert stats.head_class == 0

    def test_recount(self, tmp_path, rng):
        labels = rng.integers(0, 3, 40)
        m = small_manifest(tmp_path, labels.tolist())
        stats = class_stats(m, "train")
        brute = [sum(1 for r in m.records if r.label == k and r.split == "train") for k in range(3)]
        assert stats.counts.tolist() == brute
        assert abs(stats.frequencies.sum() - 1) <= 1e-12
        np.testing.assert_allclose(stats.weights.weights, 40 / (3 * np.array(brute)))

    def test_empty_split(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            class_stats(small_manifest(tmp_path), "val")


class TestPhantoms:
    def test_counts_and_files(self, tmp_path):
        cfg = PhantomConfig(dims=(12, 12, 12))
        m = generate_phantoms(cfg, 200, tmp_path)
        assert np.bincount([r.label for r in m.records]).tolist() == [120, 50, 30]
        assert (tmp_path / "manifest.csv").exists()
        assert json.loads((tmp_path / "phantom_config.json").read_text())["seed"] == 0
        for split, frac in (("train", 0.8), ("test", 0.2)):
            assert len(m.split(split)) == pytest.approx(200 * frac, abs=2)

    def test_deterministic(self, tmp_path):
        cfg = PhantomConfig(dims=(10, 10, 10), seed=9)
        a = generate_phantoms(cfg, 6, tmp_path / "a")
        b = generate_phantoms(cfg, 6, tmp_path / "b")
        assert a.checksum() == b.checksum()
        for r in a.records:
            assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()

    def test_interior_means_ordered(self):
        cfg = PhantomConfig()
        means = []
        for label in range(3):
            vals = []
            for i in range(50):
                values, mask = render_phantom(cfg, label, np.random.default_rng([label, i]))
                vals.append(values[mask > 0].mean())
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]

    def test_invalid_config(self, tmp_path):
        with pytest.raises(ValueError, match="proportions"):
            generate_phantoms(PhantomConfig(proportions=(0.5, 0.6, -0.1)), 10, tmp_path)
        with pytest.raises(ValueError, match="dims"):
            generate_phantoms(PhantomConfig(dims=(4, 16, 16)), 10, tmp_path)

    def test_too_few(self, tmp_path):
        with pytest.raises(ValueError, match="at least"):
            generate_phantoms(PhantomConfig(dims=(8, 8, 8)), 2, tmp_path)

    def test_json_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "dims": [16, 16, 16]}))
        cfg = PhantomConfig.from_json(tmp_path / "c.json")
        assert cfg.seed == 4 and cfg.dims == (16, 16, 16)
        (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
        with pytest.raises(ValueError, match="unknown"):
            PhantomConfig.from_json(tmp_path / "bad.json")


class TestLoader:
    def test_load_split(self, tmp_path):
        m = generate_phantoms(PhantomConfig(dims=(16, 16, 16)), 10, tmp_path)
        prep = Preprocessing(input_dims=(12, 12, 12))
        xs, ys = load_split(m, "train", prep)
        assert xs.shape == (len(m.split("train")), 1, 12, 12, 12) and xs.dtype == np.float32
        assert ys.tolist() == [r.label for r in m.split("train")]
        assert 0 <= xs.min() and xs.max() <= 1

    def test_missing_volume(self, tmp_path):
        m = small_manifest(tmp_path)
        with pytest.raises(DataError, match="cannot load"):
            load_split(m, "train", Preprocessing())

    def test_without_mask_resamples(self, rng):
        vol = Volume(rng.normal(300, 100, size=(10, 10, 10)))
        out = prepare_volume(vol, None, Preprocessing(input_dims=(6, 6, 6), windows=True))
        assert out.shape == (6, 6, 6)
