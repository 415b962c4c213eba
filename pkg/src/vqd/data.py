"""Dataset ingestion and preparation.

Covers clip manifests, the motion-based scene filter, ground-truth
enhancement (super-resolve then downsample back), a deterministic synthetic
cartoon-style clip generator for hermetic tests, and the crop samplers used
by the training loops.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import cv2
import numpy as np

from .errors import ManifestError, ShapeMismatchError, VQDError
from .imgio import bicubic_downscale, bicubic_upscale, check_frame, read_png, write_png

ROLES = ("lq-train", "hr-train", "test")


# ----------------------------------------------------------------- manifests


@dataclass
class ClipEntry:
    id: str
    role: str
    frames: List[str]
    width: int
    height: int


@dataclass
class ClipManifest:
    clips: List[ClipEntry] = field(default_factory=list)
    base_dir: str = "."

    def to_json(self, path: str) -> None:
        payload = {
            "clips": [
                {
                    "id": c.id,
                    "role": c.role,
                    "frames": c.frames,
                    "width": c.width,
                    "height": c.height,
                }
                for c in self.clips
            ]
        }
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "ClipManifest":
        with open(path) as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict) or "clips" not in payload:
            raise ManifestError(f"manifest {path} lacks a top-level 'clips' list")
        clips = []
        for raw in payload["clips"]:
            try:
                clips.append(
                    ClipEntry(
                        id=str(raw["id"]),
                        role=str(raw["role"]),
                        frames=[str(f) for f in raw["frames"]],
                        width=int(raw["width"]),
                        height=int(raw["height"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"malformed clip entry in {path}: {exc}")
        return cls(clips=clips, base_dir=os.path.dirname(os.path.abspath(path)))

    def resolve(self, frame_path: str) -> str:
        if os.path.isabs(frame_path):
            return frame_path
        return os.path.join(self.base_dir, frame_path)

    def validate(self) -> "ClipManifest":
        for clip in self.clips:
            if clip.role not in ROLES:
                raise ManifestError(f"clip {clip.id}: unknown role {clip.role!r}")
            if not clip.frames:
                raise ManifestError(f"clip {clip.id}: no frames listed")
            for fp in clip.frames:
                full = self.resolve(fp)
                if not os.path.isfile(full):
                    raise ManifestError(f"clip {clip.id}: missing frame file {full}")
                img = cv2.imread(full, cv2.IMREAD_COLOR)
                if img is None:
                    raise ManifestError(f"clip {clip.id}: unreadable frame {full}")
                h, w = img.shape[:2]
                if (w, h) != (clip.width, clip.height):
                    raise ManifestError(
                        f"clip {clip.id}: frame {fp} is {w}x{h}, manifest says "
                        f"{clip.width}x{clip.height}"
                    )
        return self

    def load_clip(self, clip: ClipEntry) -> np.ndarray:
        frames = [read_png(self.resolve(fp)) for fp in clip.frames]
        return np.stack(frames, axis=0)

    def by_role(self, role: str) -> List[ClipEntry]:
        return [c for c in self.clips if c.role == role]


def scan_clip_directory(root: str, role: str = "hr-train") -> ClipManifest:
    """Build a manifest from a directory of per-clip subdirectories of PNGs."""
    root = os.path.abspath(root)
    clips = []
    for name in sorted(os.listdir(root)):
        sub = os.path.join(root, name)
        if not os.path.isdir(sub):
            continue
        frames = sorted(
            os.path.join(name, f) for f in os.listdir(sub) if f.lower().endswith(".png")
        )
        if not frames:
            continue
        first = cv2.imread(os.path.join(root, frames[0]), cv2.IMREAD_COLOR)
        if first is None:
            raise ManifestError(f"unreadable frame {frames[0]} under {root}")
        h, w = first.shape[:2]
        clips.append(ClipEntry(id=name, role=role, frames=frames, width=w, height=h))
    if not clips:
        raise ManifestError(f"no clip subdirectories with PNG frames under {root}")
    return ClipManifest(clips=clips, base_dir=root)


# -------------------------------------------------------------- scene filter


def scene_filter(frames, threshold: float):
    """Drop frames whose mean absolute difference to the last kept frame is
    below ``threshold``; frame 0 is always kept."""
    if isinstance(frames, np.ndarray):
        seq = [frames[i] for i in range(frames.shape[0])]
    else:
        seq = list(frames)
    if not seq:
        raise VQDError("scene_filter requires a non-empty clip")
    kept = [seq[0]]
    last = seq[0]
    for frame in seq[1:]:
        if float(np.mean(np.abs(frame - last))) >= threshold:
            kept.append(frame)
            last = frame
    return np.stack(kept, axis=0)


# ---------------------------------------------------------- HR enhancement


class BicubicEnhancer:
    """Identity-class enhancer: plain bicubic upsampling."""

    def __init__(self, scale: int = 4):
        self.scale = scale

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        return bicubic_upscale(frame, self.scale)


class UnsharpEnhancer:
    """Toy edge-sharpening enhancer: bicubic upsample plus unsharp masking."""

    def __init__(self, scale: int = 4, amount: float = 0.6, sigma: float = 1.2):
        self.scale = scale
        self.amount = amount
        self.sigma = sigma

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        up = bicubic_upscale(frame, self.scale)
        blurred = cv2.GaussianBlur(up, (0, 0), self.sigma)
        sharp = up + self.amount * (up - blurred)
        return np.clip(sharp, 0.0, 1.0).astype(np.float32)


def hr_sr_enhance(frame: np.ndarray, enhancer) -> np.ndarray:
    """Run the enhancer, then bicubic-downsample back to the input size."""
    check_frame(frame)
    scale = int(getattr(enhancer, "scale", 1))
    if scale < 1:
        raise VQDError(f"enhancer scale must be >= 1, got {scale}")
    h, w = frame.shape[:2]
    up = enhancer(frame)
    if up.shape[:2] != (h * scale, w * scale):
        raise ShapeMismatchError(
            f"enhancer declared scale {scale} but produced {up.shape[:2]} "
            f"from {h}x{w}"
        )
    if scale == 1:
        out = up
    else:
        out = bicubic_downscale(up, scale)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------ synthetic set


def _draw_scene(size: int, palette: np.ndarray, outline: np.ndarray, polys, angle_deg, shift):
    frame = np.full((size, size, 3), palette[0], dtype=np.uint8)
    center = (size / 2.0, size / 2.0)
    rot = cv2.getRotationMatrix2D(center, angle_deg, 1.0)
    rot[:, 2] += shift
    for color_idx, verts in polys:
        moved = cv2.transform(verts[None].astype(np.float32), rot)[0]
        pts = np.rint(moved).astype(np.int32)
        color = tuple(int(v) for v in palette[color_idx])
        cv2.fillPoly(frame, [pts], color)
        cv2.polylines(frame, [pts], True, tuple(int(v) for v in outline), 1)
    return frame.astype(np.float32) / 255.0


def make_synthetic_anime_set(
    n: int,
    size: int,
    rng: np.random.Generator,
    out_dir: Optional[str] = None,
    frames_per_clip: int = 8,
    palette_size: int = 5,
    role: str = "hr-train",
) -> ClipManifest:
    """Generate clips of flat-color polygons with dark outlines under slow
    affine motion. With ``out_dir`` set, frames are written as PNGs and the
    returned manifest references them; otherwise frames stay in memory on
    the entries' ``loaded`` attribute.
    """
    if size % 32 != 0:
        raise VQDError(f"synthetic frame size must be divisible by 32, got {size}")
    if n < 1 or frames_per_clip < 1:
        raise VQDError("need n >= 1 clips and frames_per_clip >= 1")
    manifest = ClipManifest(base_dir=out_dir or ".")
    outline = np.array([20, 18, 24], dtype=np.uint8)
    for ci in range(n):
        palette = rng.integers(40, 256, size=(palette_size, 3)).astype(np.uint8)
        n_polys = int(rng.integers(2, 5))
        polys = []
        for _ in range(n_polys):
            color_idx = int(rng.integers(1, palette_size))
            cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
            radius = rng.uniform(0.1 * size, 0.3 * size)
            n_verts = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_verts))
            verts = np.stack(
                [cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1
            )
            polys.append((color_idx, verts))
        speed = rng.uniform(-1.5, 1.5, size=2)
        spin = float(rng.uniform(-2.0, 2.0))

        frames = [
            _draw_scene(size, palette, outline, polys, spin * t, speed * t)
            for t in range(frames_per_clip)
        ]
        clip_id = f"clip_{ci:03d}"
        entry = ClipEntry(
            id=clip_id,
            role=role,
            frames=[],
            width=size,
            height=size,
        )
        if out_dir:
            rels = []
            for ti, frame in enumerate(frames):
                rel = os.path.join(clip_id, f"{ti:05d}.png")
                write_png(os.path.join(out_dir, rel), frame)
                rels.append(rel)
            entry.frames = rels
        else:
            entry.loaded = np.stack(frames, axis=0)
        manifest.clips.append(entry)
    return manifest


def load_clip_array(manifest: ClipManifest, clip: ClipEntry) -> np.ndarray:
    if hasattr(clip, "loaded"):
        return clip.loaded
    return manifest.load_clip(clip)


# ------------------------------------------------------------ crop samplers


class FrameDataset:
    """Random-crop sampler over a flat pool of frames."""

    def __init__(self, frames: Sequence[np.ndarray]):
        self.frames = [check_frame(np.asarray(f, dtype=np.float32)) for f in frames]

    @classmethod
    def from_manifest(cls, manifest: ClipManifest, role: Optional[str] = None):
        frames = []
        for clip in manifest.clips:
            if role and clip.role != role:
                continue
            arr = load_clip_array(manifest, clip)
            frames.extend(arr[i] for i in range(arr.shape[0]))
        return cls(frames)

    def __len__(self) -> int:
        return len(self.frames)

    def sample_crop(self, crop: int, rng: np.random.Generator) -> np.ndarray:
        frame = self.frames[int(rng.integers(0, len(self.frames)))]
        h, w = frame.shape[:2]
        if h < crop or w < crop:
            raise VQDError(f"frame {h}x{w} smaller than crop size {crop}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        return frame[top : top + crop, left : left + crop]

    def sample_batch(self, batch: int, crop: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sample_crop(crop, rng) for _ in range(batch)], axis=0)


class ClipDataset:
    """Random spatio-temporal crop sampler over clips."""

    def __init__(self, clips: Sequence[np.ndarray]):
        self.clips = [np.asarray(c, dtype=np.float32) for c in clips]
        for c in self.clips:
            if c.ndim != 4 or c.shape[3] != 3:
                raise ShapeMismatchError(f"clips must be T x H x W x 3, got {c.shape}")

    @classmethod
    def from_manifest(cls, manifest: ClipManifest, role: Optional[str] = None):
        clips = [
            load_clip_array(manifest, c)
            for c in manifest.clips
            if role is None or c.role == role
        ]
        return cls(clips)

    def __len__(self) -> int:
        return len(self.clips)

    def sample_window(
        self, length: int, crop: int, rng: np.random.Generator
    ) -> np.ndarray:
        clip = self.clips[int(rng.integers(0, len(self.clips)))]
        t, h, w = clip.shape[:3]
        if h < crop or w < crop:
            raise VQDError(f"clip frames {h}x{w} smaller than crop size {crop}")
        start = int(rng.integers(0, max(1, t - length + 1)))
        window = clip[start : start + length]
        if window.shape[0] < length:  # short clip: repeat last frame
            pad = np.repeat(window[-1:], length - window.shape[0], axis=0)
            window = np.concatenate([window, pad], axis=0)
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        return window[:, top : top + crop, left : left + crop]
