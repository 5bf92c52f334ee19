import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as npst

import diffdenoise as dd
from diffdenoise.data import (
    ArrayFormatError,
    DatasetManifest,
    ManifestEntry,
    NormalizationError,
    file_sha256,
    generate_phantoms,
    load_array,
    load_png,
    normalize_and_patchify,
    save_array,
    save_png,
    split_ids,
)
from diffdenoise.noise import NoiseSpec


class TestPhantoms:
    def test_deterministic(self):
        a = generate_phantoms(1, 64, seed=7)[0]
        b = generate_phantoms(1, 64, seed=7)[0]
        assert np.array_equal(a, b)

    def test_value_range(self):
        for p in generate_phantoms(100, 64, seed=7):
            assert p.min() >= 0.05 and p.max() <= 0.95

    def test_nonconstant_gradient(self):
        for p in generate_phantoms(100, 64, seed=7):
            gy, gx = np.gradient(p.astype(np.float64))
            assert np.mean(np.hypot(gy, gx)) > 0.0

    def test_preconditions(self):
        with pytest.raises(ValueError):
            generate_phantoms(0, 64, seed=1)
        with pytest.raises(ValueError):
            generate_phantoms(1, 16, seed=1)


class TestPatchify:
    def test_exact_tiling(self, rng):
        patches = normalize_and_patchify(rng.random((64, 64)), patch_size=32, stride=32)
        assert len(patches) == 4

    def test_overlapping_stride(self, rng):
        # floor((64-48)/16)+1 = 2 positions per axis
        patches = normalize_and_patchify(rng.random((64, 64)), patch_size=48, stride=16)
        assert len(patches) == 4

    def test_partial_patches_dropped(self, rng):
        patches = normalize_and_patchify(rng.random((70, 70)), patch_size=32, stride=32)
        assert len(patches) == 4

    def test_normalization_endpoints(self, rng):
        img = rng.random((64, 64)) * 8.0 + 2.0
        img.flat[0], img.flat[-1] = 2.0, 10.0
        patches = normalize_and_patchify(img, patch_size=64, stride=64)
        assert patches[0].min() == 0.0
        assert patches[0].max() == 1.0

    def test_constant_image_rejected(self):
        with pytest.raises(NormalizationError):
            normalize_and_patchify(np.full((64, 64), 3.0), patch_size=32, stride=32)

    def test_patchify_matches_brute_force(self, rng):
        img = rng.random((96, 80))
        patches = normalize_and_patchify(img, patch_size=32, stride=24)
        count = len(range(0, 96 - 32 + 1, 24)) * len(range(0, 80 - 32 + 1, 24))
        assert len(patches) == count


class TestArrayFormat:
    @given(
        arr=npst.arrays(
            np.float32,
            npst.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=40),
            elements=st.floats(-1e6, 1e6, width=32),
        )
    )
    def test_round_trip_bitwise(self, arr, tmp_path_factory):
        path = tmp_path_factory.mktemp("arr") / "x.dda"
        save_array(path, arr)
        assert np.array_equal(load_array(path), arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dda"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ArrayFormatError, match="magic"):
            load_array(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "t.dda"
        save_array(path, rng.random((8, 8)).astype(np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ArrayFormatError):
            load_array(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "h.dda"
        path.write_bytes(b"DDNARR01\x01")
        with pytest.raises(ArrayFormatError):
            load_array(path)

    def test_rejects_non_finite(self, tmp_path):
        with pytest.raises(ValueError):
            save_array(tmp_path / "x.dda", np.array([[np.nan, 0.0], [0.0, 0.0]]))


class TestPng:
    def test_round_trip_quantization(self, tmp_path, phantom_bank):
        path = tmp_path / "x.png"
        save_png(path, phantom_bank[0])
        back = load_png(path)
        assert np.abs(back - phantom_bank[0]).max() <= 1.0 / 65535.0 + 1e-9

    def test_clips_on_export_only(self, tmp_path):
        arr = np.linspace(-0.5, 1.5, 32 * 32).reshape(32, 32)
        path = tmp_path / "c.png"
        save_png(path, arr)
        back = load_png(path)
        assert back.min() >= 0.0 and back.max() <= 1.0


class TestSplits:
    def test_disjoint_and_complete(self):
        ids = [f"p{i:03d}" for i in range(37)]
        splits = split_ids(ids, {"train": 0.7, "val": 0.1, "test": 0.2}, seed=3)
        combined = sorted(sum(splits.values(), []))
        assert combined == sorted(ids)
        assert not (set(splits["train"]) & set(splits["val"]))
        assert not (set(splits["train"]) & set(splits["test"]))
        assert not (set(splits["val"]) & set(splits["test"]))

    def test_deterministic(self):
        ids = [f"p{i}" for i in range(20)]
        a = split_ids(ids, {"train": 0.5, "test": 0.5}, seed=11)
        b = split_ids(ids, {"train": 0.5, "test": 0.5}, seed=11)
        assert a == b

    def test_fraction_sum_checked(self):
        with pytest.raises(ValueError):
            split_ids(["a", "b"], {"train": 0.5, "test": 0.4}, seed=0)


def _manifest_with_files(root, rng):
    spec = NoiseSpec(family="gaussian", sigma=6 / 255, seed=1)
    entries = []
    for i in range(3):
        clean = rng.random((16, 16)).astype(np.float32)
        noisy = clean + 0.01
        cp, npth = f"clean_{i}.dda", f"noisy_{i}.dda"
        save_array(root / cp, clean)
        save_array(root / npth, noisy)
        entries.append(
            ManifestEntry(
                patch_id=f"p{i}",
                clean_path=cp,
                noisy_path=npth,
                spec=spec,
                clean_sha256=file_sha256(root / cp),
                noisy_sha256=file_sha256(root / npth),
            )
        )
    return DatasetManifest(split="train", entries=tuple(entries), source_fingerprint="abc")


class TestManifest:
    def test_round_trip_and_verify(self, tmp_path, rng):
        manifest = _manifest_with_files(tmp_path, rng)
        manifest.save(tmp_path / "manifest.json")
        loaded = DatasetManifest.load(tmp_path / "manifest.json")
        assert loaded == manifest
        loaded.verify(tmp_path)
        pairs = loaded.load_pairs(tmp_path)
        assert len(pairs) == 3

    def test_tamper_detected(self, tmp_path, rng):
        manifest = _manifest_with_files(tmp_path, rng)
        save_array(tmp_path / "noisy_1.dda", rng.random((16, 16)).astype(np.float32))
        with pytest.raises(ArrayFormatError, match="hash mismatch"):
            manifest.verify(tmp_path)

    def test_missing_file_detected(self, tmp_path, rng):
        manifest = _manifest_with_files(tmp_path, rng)
        (tmp_path / "clean_0.dda").unlink()
        with pytest.raises(FileNotFoundError):
            manifest.verify(tmp_path)
