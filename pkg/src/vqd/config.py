"""Top-level run configuration: one JSON file drives every subcommand.

A config names a preset ("tiny" for desk-scale tests, "paper-scale" for the
full-size model), a global seed, and per-module sections that override the
preset's defaults. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from .degrade import DegradationConfig
from .errors import ConfigError
from .metrics import EvalProtocolConfig
from .msvqgan import MSVQGANConfig
from .vsr import VSRConfig, paper_scale_config, tiny_config

CONFIG_VERSION = 1
PRESETS = ("tiny", "paper-scale")

_TOP_KEYS = {"config_version", "preset", "seed", "msvqgan", "degradation", "vsr", "eval"}


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "tiny"
    msvqgan: MSVQGANConfig = field(default_factory=MSVQGANConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    vsr: VSRConfig = field(default_factory=VSRConfig)
    eval: EvalProtocolConfig = field(default_factory=EvalProtocolConfig)

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        self.msvqgan.validate()
        self.degradation.validate()
        self.vsr.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "preset": self.preset,
            "seed": self.seed,
            "msvqgan": self.msvqgan.to_dict(),
            "degradation": self.degradation.to_dict(),
            "vsr": self.vsr.to_dict(),
            "eval": self.eval.__dict__.copy(),
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def preset_config(name: str, seed: int = 0) -> RunConfig:
    if name == "paper-scale":
        return RunConfig(seed=seed, preset=name, vsr=paper_scale_config()).validate()
    if name == "tiny":
        return RunConfig(
            seed=seed,
            preset=name,
            msvqgan=MSVQGANConfig(
                base_channels=16,
                embed_dim=32,
                codebook_size=64,
                crop_size=64,
                disc_channels=16,
                stage1_lr=1e-3,
                stage1_batch=4,
                stage1_steps=1500,
                stage2_lr=4e-4,
                stage2_batch=4,
                stage2_steps=400,
            ),
            degradation=DegradationConfig(),
            vsr=tiny_config(use_enhanced_gt=False),
            eval=EvalProtocolConfig(crop_size=32),
        ).validate()
    raise ConfigError(f"unknown preset {name!r} (expected one of {PRESETS})")


def _eval_from_dict(d: dict) -> EvalProtocolConfig:
    unknown = set(d) - set(EvalProtocolConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    return EvalProtocolConfig(**d).validate()


def run_config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(payload) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    version = payload.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config_version {version!r} (this build reads {CONFIG_VERSION})"
        )
    preset = payload.get("preset", "tiny")
    base = preset_config(preset, seed=int(payload.get("seed", 0)))

    def deep_merge(base_d: dict, over: dict) -> dict:
        out = copy.deepcopy(base_d)
        for key, value in over.items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = deep_merge(out[key], value)
            else:
                out[key] = value
        return out

    def merged(section: str, defaults: dict) -> dict:
        overrides = payload.get(section, {})
        if not isinstance(overrides, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        return deep_merge(defaults, overrides)

    cfg = RunConfig(
        seed=base.seed,
        preset=preset,
        msvqgan=MSVQGANConfig.from_dict(merged("msvqgan", base.msvqgan.to_dict())),
        degradation=DegradationConfig.from_dict(
            merged("degradation", base.degradation.to_dict())
        ),
        vsr=VSRConfig.from_dict(merged("vsr", base.vsr.to_dict())),
        eval=_eval_from_dict(merged("eval", base.eval.__dict__.copy())),
    )
    return cfg.validate()


def load_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return run_config_from_dict(payload)
