"""Manifests, scene filtering, GT enhancement, synthetic clip generation."""

import os

import numpy as np
import pytest

from vqd.data import (
    BicubicEnhancer,
    ClipDataset,
    ClipManifest,
    FrameDataset,
    UnsharpEnhancer,
    hr_sr_enhance,
    make_synthetic_anime_set,
    scan_clip_directory,
    scene_filter,
)
from vqd.errors import ManifestError, ShapeMismatchError, VQDError
from vqd.imgio import write_png
from vqd.metrics import psnr
from vqd.rng import derive_rng


class TestSceneFilter:
    def test_identical_frames_keep_only_first(self):
        clip = np.tile(np.full((8, 8, 3), 0.4, dtype=np.float32), (5, 1, 1, 1))
        out = scene_filter(clip, 0.01)
        assert out.shape[0] == 1

    def test_zero_threshold_keeps_all(self):
        rng = np.random.default_rng(0)
        clip = rng.random((6, 8, 8, 3)).astype(np.float32)
        out = scene_filter(clip, 0.0)
        assert out.shape[0] == 6

    def test_alternating_frames_against_threshold(self):
        a = np.zeros((8, 8, 3), dtype=np.float32)
        b = np.full((8, 8, 3), 0.3, dtype=np.float32)
        clip = np.stack([a, b, a, b, a], axis=0)
        assert scene_filter(clip, 0.1).shape[0] == 5
        assert scene_filter(clip, 0.4).shape[0] == 1

    def test_compares_to_last_kept_not_adjacent(self):
        # drift below threshold per step accumulates against the last kept
        frames = [np.full((8, 8, 3), 0.05 * i, dtype=np.float32) for i in range(5)]
        out = scene_filter(np.stack(frames), threshold=0.12)
        # kept: frame0 (0.0), then frame3 (0.15 away), drift resets there
        assert out.shape[0] == 2
        assert out[1, 0, 0, 0] == pytest.approx(0.15)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        base = rng.random((8, 8, 3)).astype(np.float32)
        clip = np.stack([base + 0.01 * i for i in range(10)], axis=0).clip(0, 1)
        once = scene_filter(clip, 0.03)
        twice = scene_filter(once, 0.03)
        assert np.array_equal(once, twice)

    def test_empty_clip_rejected(self):
        with pytest.raises(VQDError):
            scene_filter([], 0.1)


class TestHRSREnhance:
    def test_bicubic_roundtrip_high_psnr(self):
        # smooth synthetic frame: up-down resampling is near lossless
        yy, xx = np.mgrid[0:64, 0:64] / 64.0
        frame = np.stack([0.4 + 0.2 * np.sin(2 * np.pi * yy),
                          0.5 + 0.1 * np.cos(2 * np.pi * xx),
                          np.full_like(yy, 0.3)], axis=2).astype(np.float32)
        out = hr_sr_enhance(frame, BicubicEnhancer(4))
        assert out.shape == frame.shape
        assert psnr(frame, out) >= 40.0

    def test_shape_always_preserved(self):
        frame = np.random.default_rng(0).random((24, 40, 3)).astype(np.float32)
        for enhancer in (BicubicEnhancer(2), BicubicEnhancer(4), UnsharpEnhancer(4)):
            out = hr_sr_enhance(frame, enhancer)
            assert out.shape == frame.shape
            assert out.min() >= 0 and out.max() <= 1

    def test_sharpening_stub_changes_pixels(self):
        rng = np.random.default_rng(7)
        manifest = make_synthetic_anime_set(1, 64, rng, frames_per_clip=1)
        frame = manifest.clips[0].loaded[0]
        out = hr_sr_enhance(frame, UnsharpEnhancer(4))
        assert out.shape == frame.shape
        assert np.abs(out - frame).mean() > 0

    def test_wrong_scale_enhancer_rejected(self):
        class Liar:
            scale = 4

            def __call__(self, frame):
                return frame.copy()  # claims x4 but returns x1

        frame = np.zeros((16, 16, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatchError, match="scale"):
            hr_sr_enhance(frame, Liar())


class TestSyntheticSet:
    def test_contract_shapes_and_range(self):
        rng = derive_rng(0, "synth")
        manifest = make_synthetic_anime_set(8, 64, rng, frames_per_clip=4)
        assert len(manifest.clips) == 8
        for clip in manifest.clips:
            arr = clip.loaded
            assert arr.shape == (4, 64, 64, 3)
            assert arr.min() >= 0 and arr.max() <= 1

    def test_palette_bound(self):
        rng = derive_rng(1, "synth")
        manifest = make_synthetic_anime_set(2, 64, rng, frames_per_clip=2, palette_size=5)
        for clip in manifest.clips:
            for i in range(clip.loaded.shape[0]):
                u8 = np.rint(clip.loaded[i] * 255).astype(np.uint8)
                colors = np.unique(u8.reshape(-1, 3), axis=0)
                assert colors.shape[0] <= 5 + 1  # palette + outline

    def test_deterministic_per_seed(self, tmp_path):
        a = make_synthetic_anime_set(2, 64, derive_rng(3, "s"), out_dir=str(tmp_path / "a"))
        b = make_synthetic_anime_set(2, 64, derive_rng(3, "s"), out_dir=str(tmp_path / "b"))
        for ca, cb in zip(a.clips, b.clips):
            for fa, fb in zip(ca.frames, cb.frames):
                pa = open(os.path.join(a.base_dir, fa), "rb").read()
                pb = open(os.path.join(b.base_dir, fb), "rb").read()
                assert pa == pb

    def test_size_must_divide_32(self):
        with pytest.raises(VQDError):
            make_synthetic_anime_set(1, 48, derive_rng(0, "s"))


class TestManifest:
    def test_roundtrip_and_validate(self, tmp_path):
        manifest = make_synthetic_anime_set(
            2, 64, derive_rng(5, "m"), out_dir=str(tmp_path), frames_per_clip=3
        )
        path = str(tmp_path / "manifest.json")
        manifest.to_json(path)
        loaded = ClipManifest.from_json(path).validate()
        assert len(loaded.clips) == 2
        arr = loaded.load_clip(loaded.clips[0])
        assert arr.shape == (3, 64, 64, 3)

    def test_missing_file_rejected(self, tmp_path):
        manifest = make_synthetic_anime_set(
            1, 64, derive_rng(6, "m"), out_dir=str(tmp_path), frames_per_clip=2
        )
        path = str(tmp_path / "manifest.json")
        manifest.to_json(path)
        os.remove(os.path.join(str(tmp_path), manifest.clips[0].frames[1]))
        with pytest.raises(ManifestError, match="missing frame"):
            ClipManifest.from_json(path).validate()

    def test_mixed_resolution_rejected(self, tmp_path):
        d = tmp_path / "c0"
        write_png(str(d / "0.png"), np.zeros((16, 16, 3), dtype=np.float32))
        write_png(str(d / "1.png"), np.zeros((8, 8, 3), dtype=np.float32))
        manifest = scan_clip_directory(str(tmp_path))
        with pytest.raises(ManifestError, match="16x16|8x8"):
            manifest.validate()

    def test_bad_role_rejected(self, tmp_path):
        manifest = make_synthetic_anime_set(
            1, 64, derive_rng(8, "m"), out_dir=str(tmp_path), frames_per_clip=1
        )
        manifest.clips[0].role = "nonsense"
        with pytest.raises(ManifestError, match="role"):
            manifest.validate()


class TestSamplers:
    def test_frame_dataset_crops(self):
        manifest = make_synthetic_anime_set(2, 64, derive_rng(9, "d"), frames_per_clip=2)
        ds = FrameDataset.from_manifest(manifest)
        batch = ds.sample_batch(3, 32, np.random.default_rng(0))
        assert batch.shape == (3, 32, 32, 3)

    def test_clip_dataset_windows(self):
        manifest = make_synthetic_anime_set(2, 64, derive_rng(10, "d"), frames_per_clip=6)
        ds = ClipDataset.from_manifest(manifest)
        window = ds.sample_window(4, 32, np.random.default_rng(0))
        assert window.shape == (4, 32, 32, 3)

    def test_crop_larger_than_frame_rejected(self):
        manifest = make_synthetic_anime_set(1, 64, derive_rng(11, "d"), frames_per_clip=1)
        ds = FrameDataset.from_manifest(manifest)
        with pytest.raises(VQDError):
            ds.sample_crop(128, np.random.default_rng(0))
