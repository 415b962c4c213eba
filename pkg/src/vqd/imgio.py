"""Frame I/O and layout conversions.

A frame is an H x W x 3 float32 array in [0, 1] (RGB order). Models work on
torch tensors in channel-first layout; these helpers are the only place the
two representations meet.
"""

from __future__ import annotations

import os

import cv2
import numpy as np
import torch

from .errors import ShapeMismatchError


def check_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    if not isinstance(frame, np.ndarray) or frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeMismatchError(
            f"{name} must be an HxWx3 array, got shape "
            f"{getattr(frame, 'shape', None)}"
        )
    return frame


def read_png(path: str) -> np.ndarray:
    """Load an 8-bit PNG as float32 RGB in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / 255.0


def write_png(path: str, frame: np.ndarray) -> None:
    """Write a [0, 1] float frame as 8-bit PNG (round-to-nearest)."""
    check_frame(frame)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    u8 = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    bgr = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise IOError(f"cannot write image: {path}")


def to_tensor(frame: np.ndarray) -> torch.Tensor:
    """HxWx3 [0,1] numpy -> 1x3xHxW float32 torch."""
    check_frame(frame)
    return torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))[None].float()


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """1x3xHxW or 3xHxW torch -> HxWx3 float32 numpy, clamped to [0,1]."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ShapeMismatchError(f"expected batch of 1, got {tuple(t.shape)}")
        t = t[0]
    arr = t.detach().clamp(0.0, 1.0).cpu().numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def bicubic_upscale(frame: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic x``scale`` upsample of a [0,1] frame, clamped back to [0,1]."""
    check_frame(frame)
    t = to_tensor(frame)
    up = torch.nn.functional.interpolate(
        t, scale_factor=scale, mode="bicubic", align_corners=False
    )
    return from_tensor(up)


def bicubic_downscale(frame: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic 1/``scale`` downsample of a [0,1] frame, clamped to [0,1]."""
    check_frame(frame)
    h, w = frame.shape[:2]
    if h % scale or w % scale:
        raise ShapeMismatchError(
            f"frame size {h}x{w} not divisible by downscale factor {scale}"
        )
    t = to_tensor(frame)
    down = torch.nn.functional.interpolate(
        t, size=(h // scale, w // scale), mode="bicubic", align_corners=False
    )
    return from_tensor(down)
