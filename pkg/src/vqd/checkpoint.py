"""Self-describing checkpoint archives.

A checkpoint is a single zip file with a JSON header (config, stage tag,
step counter, format version) and one little-endian float32 ``.npy`` member
per named parameter array. Member order and zip metadata are fixed, so
saving the same checkpoint twice produces byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .errors import ConfigError, IntegrityError, StageTagError

FORMAT_VERSION = 1
_HEADER_NAME = "header.json"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    stage: Optional[str] = None
    step: int = 0
    kind: str = "msvqgan"
    version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, arr in self.arrays.items():
            self.arrays[name] = np.ascontiguousarray(arr, dtype="<f4")


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    header = {
        "format_version": ckpt.version,
        "kind": ckpt.kind,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "arrays": sorted(ckpt.arrays.keys()),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(_HEADER_NAME, date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(header, indent=1, sort_keys=True))
        for name in sorted(ckpt.arrays.keys()):
            buf = io.BytesIO()
            np.save(buf, ckpt.arrays[name])
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise IntegrityError(f"not a readable checkpoint archive: {path} ({exc})")
    with zf:
        bad = zf.testzip()
        if bad is not None:
            raise IntegrityError(f"corrupt checkpoint member: {bad}")
        try:
            header = json.loads(zf.read(_HEADER_NAME))
        except KeyError:
            raise IntegrityError(f"checkpoint missing member: {_HEADER_NAME}")
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise IntegrityError(
                f"unsupported checkpoint format version {version!r} "
                f"(this build reads version {FORMAT_VERSION})"
            )
        arrays = {}
        for name in header["arrays"]:
            member = f"arrays/{name}.npy"
            try:
                raw = zf.read(member)
            except KeyError:
                raise IntegrityError(f"checkpoint missing member: {member}")
            arrays[name] = np.load(io.BytesIO(raw))
    return Checkpoint(
        arrays=arrays,
        config=header.get("config", {}),
        stage=header.get("stage"),
        step=header.get("step", 0),
        kind=header.get("kind", "msvqgan"),
        version=version,
    )


def require_stage(ckpt: Checkpoint, stage: str) -> Checkpoint:
    if ckpt.stage != stage:
        raise StageTagError(
            f"checkpoint is tagged {ckpt.stage!r}, but {stage!r} is required"
        )
    return ckpt


def diff_configs(expected: dict, found: dict) -> list:
    """Flat list of dotted keys whose values differ (either direction)."""
    diffs = []

    def walk(a, b, prefix):
        keys = sorted(set(a) | set(b))
        for key in keys:
            name = f"{prefix}{key}"
            if key not in a or key not in b:
                diffs.append(name)
            elif isinstance(a[key], dict) and isinstance(b[key], dict):
                walk(a[key], b[key], name + ".")
            elif a[key] != b[key]:
                diffs.append(name)

    walk(expected, found, "")
    return diffs


def require_matching_config(expected: dict, ckpt: Checkpoint) -> Checkpoint:
    diffs = diff_configs(expected, ckpt.config)
    if diffs:
        raise ConfigError(
            "checkpoint config does not match the requested config; "
            "differing fields: " + ", ".join(diffs)
        )
    return ckpt


# ------------------------------------------------------------ model bridges

_CODEBOOK_KEY = "codebook_entries"
_CODEBOOK_ARRAY = "codebook.entries"


def arrays_from_module(module: torch.nn.Module, exclude_prefixes=("perceptual",)) -> dict:
    """state_dict -> named float32 arrays; frozen helper modules excluded."""
    out = {}
    for key, tensor in module.state_dict().items():
        if any(key.startswith(p) for p in exclude_prefixes):
            continue
        name = _CODEBOOK_ARRAY if key == _CODEBOOK_KEY else key
        out[name] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_arrays_into_module(module: torch.nn.Module, arrays: dict) -> None:
    state = module.state_dict()
    mapped = {}
    for name, arr in arrays.items():
        key = _CODEBOOK_KEY if name == _CODEBOOK_ARRAY else name
        if key not in state:
            raise IntegrityError(f"checkpoint array {name!r} has no matching parameter")
        if tuple(state[key].shape) != tuple(arr.shape):
            raise IntegrityError(
                f"array {name!r} shape {tuple(arr.shape)} does not match "
                f"parameter shape {tuple(state[key].shape)}"
            )
        mapped[key] = torch.from_numpy(np.ascontiguousarray(arr)).to(state[key].dtype)
    missing = {
        k
        for k in state
        if k not in mapped and not k.startswith("perceptual")
    }
    if missing:
        raise IntegrityError(f"checkpoint lacks arrays for: {sorted(missing)[:5]}")
    state.update(mapped)
    module.load_state_dict(state)
