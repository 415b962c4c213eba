"""Paired metrics and the no-reference evaluation protocol.

PSNR and SSIM follow the standard definitions on [0, 1] images (SSIM on the
luma channel with an 11x11 Gaussian window, sigma 1.5, valid-window
cropping). The no-reference protocol samples every ``frame_stride``-th
frame, scores ``crops_per_frame`` random crops with a pluggable scorer, and
averages over crops, frames, and repetitions.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import ConfigError, ShapeMismatchError, VQDError
from .rng import derive_rng

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)
PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """20*log10(1/sqrt(MSE)) in decibels; identical inputs return ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return 20.0 * math.log10(1.0 / math.sqrt(mse))


def to_luma(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[2] == 3:
        return frame @ LUMA_WEIGHTS
    if frame.ndim == 2:
        return frame
    raise ShapeMismatchError(f"expected HxW or HxWx3, got {frame.shape}")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over valid window positions; 1.0 for identical inputs."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ShapeMismatchError(f"ssim shapes differ: {np.asarray(a).shape} vs {np.asarray(b).shape}")
    x = to_luma(a)
    y = to_luma(b)
    if min(x.shape) < window_size:
        raise VQDError(
            f"image {x.shape} smaller than the {window_size}x{window_size} SSIM window"
        )
    win = _gaussian_window(window_size, sigma)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    def filt(img):
        full = scipy.ndimage.correlate(img, win, mode="constant")
        r = (window_size - 1) // 2
        return full[r:-r, r:-r] if r else full

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- protocol


@dataclass
class EvalProtocolConfig:
    frame_stride: int = 10
    crops_per_frame: int = 20
    crop_size: int = 224
    repetitions: int = 3
    seed: int = 0

    def validate(self) -> "EvalProtocolConfig":
        for name in ("frame_stride", "crops_per_frame", "crop_size", "repetitions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


def gradient_energy_scorer(crop: np.ndarray) -> float:
    """Deterministic stub scorer: mean absolute local gradient of the luma."""
    luma = to_luma(crop)
    gx = np.abs(np.diff(luma, axis=1)).mean()
    gy = np.abs(np.diff(luma, axis=0)).mean()
    return float(gx + gy)


BUILTIN_SCORERS = {"gradient": gradient_energy_scorer}


def nr_iqa_protocol(clip, scorer, cfg: EvalProtocolConfig, counters: dict | None = None) -> float:
    """Score frames 0, stride, 2*stride, ... with random crops, averaged.

    Each repetition uses its own derived random stream; crop top-left
    coordinates are uniform integers including boundary-aligned positions.
    Accumulation runs in float64 in index order so the result is exactly
    reproducible for a given seed.
    """
    cfg.validate()
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim == 3:
        clip = clip[None]
    frame_ids = list(range(0, clip.shape[0], cfg.frame_stride))
    totals = []
    calls = 0
    for rep in range(cfg.repetitions):
        rng = derive_rng(cfg.seed, "nr-iqa", rep)
        acc = 0.0
        n = 0
        for fi in frame_ids:
            frame = clip[fi]
            h, w = frame.shape[:2]
            if h < cfg.crop_size or w < cfg.crop_size:
                raise VQDError(
                    f"frame {fi} ({h}x{w}) smaller than crop size {cfg.crop_size}"
                )
            for _ in range(cfg.crops_per_frame):
                top = int(rng.integers(0, h - cfg.crop_size + 1))
                left = int(rng.integers(0, w - cfg.crop_size + 1))
                crop = frame[top : top + cfg.crop_size, left : left + cfg.crop_size]
                acc += float(scorer(crop))
                n += 1
                calls += 1
        totals.append(acc / n)
    if counters is not None:
        counters["frames_per_repetition"] = len(frame_ids)
        counters["calls_per_repetition"] = len(frame_ids) * cfg.crops_per_frame
        counters["total_calls"] = calls
    return float(np.mean(totals))


# ------------------------------------------------------------------ reports


def write_report(rows, path: str) -> None:
    """CSV report: header ``clip_id,metric,value``, one row per clip plus a
    mean row. Fixed float formatting keeps re-runs byte-identical."""
    rows = list(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clip_id", "metric", "value"])
    values = []
    for clip_id, metric, value in rows:
        writer.writerow([clip_id, metric, f"{value:.8f}"])
        values.append(value)
    if values:
        metric = rows[0][1]
        writer.writerow(["mean", metric, f"{float(np.mean(values)):.8f}"])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
