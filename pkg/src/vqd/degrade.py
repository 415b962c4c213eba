"""HR -> LR degradation synthesis.

Clips pass through blur, additive noise, downscaling, codebook-transfer
degradation (top/middle branches quantized to the nearest entry, bottom
branch to the k-th closest with k drawn uniformly from [1, K]), and lossy
compression, in that order. One k is drawn per clip so the degradation
level is temporally consistent within a training sample.
"""

from __future__ import annotations

import math
import os
import shutil
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import cv2
import numpy as np
import scipy.fft
import torch

from .checkpoint import Checkpoint
from .errors import (
    CompressBackendError,
    ConfigError,
    ShapeMismatchError,
    StageTagError,
    VQDError,
)
from .imgio import check_frame, from_tensor, to_tensor
from .msvqgan import MultiScaleVQGAN
from .vq import sample_degradation_level

_RESIZE_METHODS = {
    "bilinear": cv2.INTER_LINEAR,
    "bicubic": cv2.INTER_CUBIC,
    "area": cv2.INTER_AREA,
}

# standard luminance quantization table, applied to all channels
_QUANT_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class BlurConfig:
    sigma_min: float = 0.2
    sigma_max: float = 3.0
    kind: str = "gaussian-iso"


@dataclass
class NoiseConfig:
    sigma_min: float = 0.0
    sigma_max: float = 10.0 / 255.0


@dataclass
class DownConfig:
    scale: int = 4
    methods: tuple = ("bilinear", "bicubic", "area")


@dataclass
class VQDSettings:
    checkpoint: Optional[str] = None
    max_level: int = 50
    enable: bool = True
    probability: float = 1.0


@dataclass
class CompressConfig:
    quality_min: int = 30
    quality_max: int = 95
    method: str = "dct"


@dataclass
class DegradationConfig:
    blur: BlurConfig = field(default_factory=BlurConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    down: DownConfig = field(default_factory=DownConfig)
    vqd: VQDSettings = field(default_factory=VQDSettings)
    compress: CompressConfig = field(default_factory=CompressConfig)
    seed: int = 0

    def validate(self) -> "DegradationConfig":
        if self.vqd.max_level < 1:
            raise ConfigError(f"vqd.max_level must be >= 1, got {self.vqd.max_level}")
        if self.down.scale < 1:
            raise ConfigError(f"down.scale must be >= 1, got {self.down.scale}")
        if self.blur.sigma_min < 0 or self.blur.sigma_max < self.blur.sigma_min:
            raise ConfigError("blur sigma range must be non-negative and ordered")
        if self.noise.sigma_min < 0 or self.noise.sigma_max < self.noise.sigma_min:
            raise ConfigError("noise sigma range must be non-negative and ordered")
        if not (1 <= self.compress.quality_min <= self.compress.quality_max <= 100):
            raise ConfigError("compress quality range must lie within [1, 100]")
        if self.compress.method not in ("dct", "ffmpeg"):
            raise ConfigError(f"unknown compress method {self.compress.method!r}")
        if not 0.0 <= self.vqd.probability <= 1.0:
            raise ConfigError("vqd.probability must be in [0, 1]")
        for m in self.down.methods:
            if m not in _RESIZE_METHODS:
                raise ConfigError(f"unknown downsample method {m!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down"]["methods"] = list(self.down.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        d = dict(d)
        sections = {
            "blur": BlurConfig,
            "noise": NoiseConfig,
            "down": DownConfig,
            "vqd": VQDSettings,
            "compress": CompressConfig,
        }
        kwargs = {}
        for name, klass in sections.items():
            if name in d:
                raw = dict(d.pop(name))
                unknown = set(raw) - set(klass.__dataclass_fields__)
                if unknown:
                    raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
                if name == "down" and "methods" in raw:
                    raw["methods"] = tuple(raw["methods"])
                kwargs[name] = klass(**raw)
        if "seed" in d:
            kwargs["seed"] = int(d.pop("seed"))
        if d:
            raise ConfigError(f"unknown degradation config keys: {sorted(d)}")
        return cls(**kwargs).validate()


# ------------------------------------------------------------ basic operators


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian kernel of size 2*ceil(3*sigma)+1."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.ones((1, 1), dtype=np.float64)
    radius = int(math.ceil(3 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def normalize_kernel(kernel: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    total = kernel.sum()
    if abs(total) < 1e-12:
        raise VQDError("blur kernel is not normalizable (sums to zero)")
    return kernel / total


def apply_basic_operator(
    frame: np.ndarray, kind: str, params: dict, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Apply one of the classic degradation operators to a [0,1] frame."""
    check_frame(frame)
    if kind == "blur":
        if "kernel" in params:
            kernel = normalize_kernel(params["kernel"])
        else:
            kernel = gaussian_kernel(float(params["sigma"]))
        if kernel.shape == (1, 1):
            return frame.copy()
        out = cv2.filter2D(frame, -1, kernel.astype(np.float32), borderType=cv2.BORDER_REFLECT)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if kind == "noise":
        sigma = float(params["sigma"])
        if sigma < 0:
            raise VQDError(f"noise sigma must be non-negative, got {sigma}")
        if sigma == 0:
            return frame.copy()
        noise = rng.normal(0.0, sigma, size=frame.shape)
        return np.clip(frame + noise, 0.0, 1.0).astype(np.float32)
    if kind == "down":
        scale = int(params["scale"])
        method = params.get("method")
        if method is None:
            pool = params.get("methods", ("bilinear", "bicubic", "area"))
            method = pool[int(rng.integers(0, len(pool)))]
        if method not in _RESIZE_METHODS:
            raise VQDError(f"unknown downsample method {method!r}")
        h, w = frame.shape[:2]
        out = cv2.resize(
            frame, (w // scale, h // scale), interpolation=_RESIZE_METHODS[method]
        )
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    raise VQDError(f"unknown basic operator kind {kind!r}")


# -------------------------------------------------------- codebook transfer


def _require_stage2(model) -> MultiScaleVQGAN:
    if isinstance(model, Checkpoint):
        from .train_vqgan import model_from_checkpoint

        model = model_from_checkpoint(model)
    if not isinstance(model, MultiScaleVQGAN):
        raise VQDError("vq_degrade needs a stage-2 model or checkpoint")
    if model.stage != "stage2":
        raise StageTagError(
            f"degradation transfer needs a stage2 model, got {model.stage}"
        )
    return model


def vq_degrade_at_level(frame: np.ndarray, model, k: int) -> np.ndarray:
    """Autoencode through the degradation codebook at a fixed level k."""
    model = _require_stage2(model)
    check_frame(frame)
    h, w = frame.shape[:2]
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    padded = np.pad(frame, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") if pad_h or pad_w else frame
    x = to_tensor(padded)
    with torch.no_grad():
        feats = model.encode(x)
        zq_t, _, _ = model.quantize_branch(feats.z_t, "top")
        zq_m, _, _ = model.quantize_branch(feats.z_m, "middle")
        zq_b, _, _ = model.quantize_branch(feats.z_b, "bottom", k=k)
        out = model.decode(zq_t, zq_m, zq_b)
    result = from_tensor(out)
    return result[:h, :w]


def vq_degrade(
    frame: np.ndarray, model, max_level: int, rng: np.random.Generator
) -> np.ndarray:
    """Degradation transfer with k sampled uniformly from [1, max_level]."""
    k = sample_degradation_level(max_level, rng)
    return vq_degrade_at_level(frame, model, k)


# ----------------------------------------------------------------- compress


def _quant_matrix(quality: int) -> np.ndarray:
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    q = np.floor((_QUANT_TABLE * scale + 50.0) / 100.0)
    return np.clip(q, 1.0, 255.0)


def dct_compress_frame(frame: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization compressor (8x8 blocks, JPEG-style tables).

    quality = 100 is an exact passthrough; lower values quantize the DCT
    coefficients with a scaled standard table.
    """
    check_frame(frame)
    if not 1 <= quality <= 100:
        raise VQDError(f"quality must be in [1, 100], got {quality}")
    if quality == 100:
        return frame.copy()
    h, w = frame.shape[:2]
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    padded = np.pad(frame, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    v = padded.astype(np.float64) * 255.0 - 128.0
    hh, ww = v.shape[:2]
    q = _quant_matrix(quality)
    out = np.empty_like(v)
    for c in range(3):
        blocks = v[:, :, c].reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coefs = scipy.fft.dctn(blocks, axes=(2, 3), norm="ortho")
        coefs = np.round(coefs / q) * q
        rec = scipy.fft.idctn(coefs, axes=(2, 3), norm="ortho")
        out[:, :, c] = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
    result = (out + 128.0) / 255.0
    return np.clip(result[:h, :w], 0.0, 1.0).astype(np.float32)


def ffmpeg_available() -> bool:
    return shutil.which("ffmpeg") is not None


def _ffmpeg_compress_clip(clip: np.ndarray, quality: int) -> np.ndarray:
    if not ffmpeg_available():
        raise CompressBackendError(
            "external encoder (ffmpeg) not found; fall back to method='dct'"
        )
    crf = int(round(1 + (100 - quality) * 50.0 / 99.0))
    with tempfile.TemporaryDirectory() as tmp:
        for i, frame in enumerate(clip):
            u8 = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
            cv2.imwrite(os.path.join(tmp, f"in_{i:05d}.png"), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR))
        video = os.path.join(tmp, "clip.mp4")
        subprocess.run(
            [
                "ffmpeg", "-y", "-loglevel", "error",
                "-framerate", "24", "-i", os.path.join(tmp, "in_%05d.png"),
                "-c:v", "libx264", "-crf", str(crf), "-pix_fmt", "yuv420p", video,
            ],
            check=True,
        )
        subprocess.run(
            [
                "ffmpeg", "-y", "-loglevel", "error", "-i", video,
                os.path.join(tmp, "out_%05d.png"),
            ],
            check=True,
        )
        frames = []
        for i in range(len(clip)):
            bgr = cv2.imread(os.path.join(tmp, f"out_{i + 1:05d}.png"), cv2.IMREAD_COLOR)
            frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    return np.stack(frames, axis=0)


def compress(clip, quality: int, method: str = "dct") -> np.ndarray:
    """Lossy-compress then decode a clip; shape is preserved."""
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim == 3:
        clip = clip[None]
    if method == "dct":
        return np.stack([dct_compress_frame(f, quality) for f in clip], axis=0)
    if method == "ffmpeg":
        return _ffmpeg_compress_clip(clip, quality)
    raise VQDError(f"unknown compression method {method!r}")


# ------------------------------------------------------------- full pipeline


def degrade_clip(
    hr_clip,
    cfg: DegradationConfig,
    model=None,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[List[str]] = None,
) -> np.ndarray:
    """Blur -> Noise -> Down -> VQD -> Compress over every frame of a clip.

    Operator parameters and the degradation level k are sampled once per
    clip; noise values are drawn fresh per frame. Frames must be divisible
    by 8 * scale so the downsampled frames fit the codebook model's grid.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    clip = np.asarray(hr_clip, dtype=np.float32)
    if clip.ndim == 3:
        clip = clip[None]
    if clip.ndim != 4 or clip.shape[3] != 3:
        raise ShapeMismatchError(f"clip must be T x H x W x 3, got {clip.shape}")
    h, w = clip.shape[1:3]
    unit = 8 * cfg.down.scale
    if h % unit or w % unit:
        raise ShapeMismatchError(
            f"HR frames {h}x{w} must be divisible by 8 * scale = {unit}"
        )

    sigma_blur = float(rng.uniform(cfg.blur.sigma_min, cfg.blur.sigma_max))
    sigma_noise = float(rng.uniform(cfg.noise.sigma_min, cfg.noise.sigma_max))
    down_method = cfg.down.methods[int(rng.integers(0, len(cfg.down.methods)))]
    quality = int(rng.integers(cfg.compress.quality_min, cfg.compress.quality_max + 1))

    out = np.stack(
        [apply_basic_operator(f, "blur", {"sigma": sigma_blur}) for f in clip], axis=0
    )
    if trace is not None:
        trace.append("blur")

    out = np.stack(
        [apply_basic_operator(f, "noise", {"sigma": sigma_noise}, rng) for f in out],
        axis=0,
    )
    if trace is not None:
        trace.append("noise")

    out = np.stack(
        [
            apply_basic_operator(
                f, "down", {"scale": cfg.down.scale, "method": down_method}
            )
            for f in out
        ],
        axis=0,
    )
    if trace is not None:
        trace.append("down")

    apply_vqd = cfg.vqd.enable and (
        cfg.vqd.probability >= 1.0 or rng.random() < cfg.vqd.probability
    )
    if apply_vqd:
        if model is None:
            raise ConfigError("vqd stage enabled but no degradation model provided")
        level = sample_degradation_level(cfg.vqd.max_level, rng)
        out = np.stack(
            [vq_degrade_at_level(f, model, level) for f in out], axis=0
        )
        if trace is not None:
            trace.append("vqd")

    out = compress(out, quality, cfg.compress.method)
    if trace is not None:
        trace.append("compress")
    return out
