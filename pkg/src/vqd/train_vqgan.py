"""Two-stage training of the degradation autoencoder.

Stage 1 optimizes the shared stem, top branch, top decoder, and codebook on
the quantizer objective plus the perceptual term. Stage 2 restores the
middle and bottom branches (their lateral producers start at zero so the
hand-off is exact), divides the inherited parameters' learning rate, and
adds the adversarial term with an alternately trained patch discriminator.
"""

from __future__ import annotations

import json
import time
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import (
    Checkpoint,
    arrays_from_module,
    load_arrays_into_module,
    require_matching_config,
    require_stage,
    save_checkpoint,
)
from .discriminator import PatchDiscriminator, discriminator_step
from .errors import ConfigError, VQDError
from .msvqgan import MSVQGANConfig, MultiScaleVQGAN, build_model, load_stage1_into_stage2, stage1_parameter_names
from .perceptual import build_perceptual
from .rng import derive_rng, derive_seed

ADAM_BETAS = (0.5, 0.9)

_ARCH_FIELDS = (
    "base_channels",
    "embed_dim",
    "codebook_size",
    "shared_codebook",
    "compression_factors",
)


class TrainingDiverged(VQDError):
    """A loss became non-finite; carries the step and loss snapshot."""

    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at step {step}: {snapshot}")
        self.step = step
        self.snapshot = snapshot


def _scalar(value) -> float:
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


def _check_finite(step: int, losses: dict) -> None:
    snapshot = {k: _scalar(v) for k, v in losses.items()}
    if not all(np.isfinite(v) for v in snapshot.values()):
        raise TrainingDiverged(step, snapshot)


def _batch_to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    # B x H x W x 3 in [0,1] -> B x 3 x H x W
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


class JsonlLogger:
    """Append-only JSON-lines run log; one record per training step."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.history = []
        self._fh = open(path, "w") if path else None

    def log(self, record: dict) -> None:
        self.history.append(record)
        if self._fh:
            self._fh.write(json.dumps({**record, "ts": time.time()}) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def model_checkpoint(model: MultiScaleVQGAN, step: int) -> Checkpoint:
    return Checkpoint(
        arrays=arrays_from_module(model),
        config=model.cfg.to_dict(),
        stage=model.cfg.stage,
        step=step,
        kind="msvqgan",
    )


def model_from_checkpoint(ckpt: Checkpoint, perceptual_seed: int = 0) -> MultiScaleVQGAN:
    if ckpt.kind != "msvqgan":
        raise ConfigError(f"expected an msvqgan checkpoint, got kind {ckpt.kind!r}")
    cfg = MSVQGANConfig.from_dict(ckpt.config)
    model = build_model(cfg, seed=perceptual_seed)
    load_arrays_into_module(model, ckpt.arrays)
    model.eval()
    return model


def train_stage1(
    dataset,
    cfg: MSVQGANConfig,
    seed: int = 0,
    steps: Optional[int] = None,
    out_path: Optional[str] = None,
    log_path: Optional[str] = None,
    checkpoint_every: int = 1000,
    batch_size: Optional[int] = None,
    callback: Optional[Callable] = None,
):
    """Optimize the top branch; returns (Checkpoint, step history)."""
    cfg = MSVQGANConfig(**{**cfg.to_dict(), "stage": "stage1"}).validate()
    if len(dataset) == 0:
        raise VQDError("stage-1 training requires a non-empty dataset")
    steps = cfg.stage1_steps if steps is None else steps
    batch = cfg.stage1_batch if batch_size is None else batch_size

    model = build_model(cfg, seed=derive_seed(seed, "vqgan-init"))
    perceptual = build_perceptual(seed=derive_seed(seed, "perceptual") % 2**31)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage1_lr, betas=ADAM_BETAS)
    rng = derive_rng(seed, "vqgan-stage1-data")
    logger = JsonlLogger(log_path)

    try:
        for step in range(1, steps + 1):
            x = _batch_to_tensor(dataset.sample_batch(batch, cfg.crop_size, rng))
            _, losses, _ = model.reconstruct(x, perceptual=perceptual)
            total = losses["l_vq"] + cfg.perceptual_weight * losses["l_per"]
            opt.zero_grad()
            total.backward()
            opt.step()
            record = {
                "step": step,
                "loss": _scalar(total),
                "l_vq": _scalar(losses["l_vq"]),
                "l_rec": _scalar(losses["l_rec"]),
                "l_per": _scalar(losses["l_per"]),
            }
            logger.log(record)
            try:
                _check_finite(step, {"total": total, **losses})
            except TrainingDiverged:
                if out_path:
                    save_checkpoint(model_checkpoint(model, step), out_path + ".diverged")
                raise
            if out_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(model_checkpoint(model, step), out_path)
            if callback and callback(step, model, record):
                break
    finally:
        logger.close()

    ckpt = model_checkpoint(model, step)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt, logger.history


def train_stage2(
    stage1_ckpt: Checkpoint,
    dataset,
    cfg: MSVQGANConfig,
    seed: int = 0,
    steps: Optional[int] = None,
    out_path: Optional[str] = None,
    log_path: Optional[str] = None,
    checkpoint_every: int = 1000,
    batch_size: Optional[int] = None,
    callback: Optional[Callable] = None,
):
    """Fine-tune all three branches with the adversarial term added."""
    require_stage(stage1_ckpt, "stage1")
    cfg = MSVQGANConfig(**{**cfg.to_dict(), "stage": "stage2"}).validate()
    arch = {f: cfg.to_dict()[f] for f in _ARCH_FIELDS}
    ckpt_arch = Checkpoint(arrays={}, config={f: stage1_ckpt.config.get(f) for f in _ARCH_FIELDS})
    require_matching_config(arch, ckpt_arch)
    if len(dataset) == 0:
        raise VQDError("stage-2 training requires a non-empty dataset")
    steps = cfg.stage2_steps if steps is None else steps
    batch = cfg.stage2_batch if batch_size is None else batch_size

    source = model_from_checkpoint(stage1_ckpt)
    model = build_model(cfg, seed=derive_seed(seed, "vqgan-init-stage2"))
    load_stage1_into_stage2(model, source)

    inherited = stage1_parameter_names(cfg)
    top_params = [p for n, p in model.named_parameters() if n in inherited]
    new_params = [p for n, p in model.named_parameters() if n not in inherited]
    opt = torch.optim.Adam(
        [
            {"params": top_params, "lr": cfg.stage2_lr / cfg.top_lr_divisor},
            {"params": new_params, "lr": cfg.stage2_lr},
        ],
        betas=ADAM_BETAS,
    )
    disc = PatchDiscriminator(channels=cfg.disc_channels, n_layers=cfg.disc_layers)
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.stage2_lr, betas=ADAM_BETAS)
    perceptual = build_perceptual(seed=derive_seed(seed, "perceptual") % 2**31)
    rng = derive_rng(seed, "vqgan-stage2-data")
    logger = JsonlLogger(log_path)

    try:
        for step in range(1, steps + 1):
            x = _batch_to_tensor(dataset.sample_batch(batch, cfg.crop_size, rng))

            # generator step: discriminator weights frozen
            for p in disc.parameters():
                p.requires_grad_(False)
            x_hat, losses, _ = model.reconstruct(x, perceptual=perceptual, discriminator=disc)
            total = (
                losses["l_vq"]
                + cfg.perceptual_weight * losses["l_per"]
                + cfg.adversarial_weight * losses["l_adv"]
            )
            opt.zero_grad()
            total.backward()
            opt.step()
            for p in disc.parameters():
                p.requires_grad_(True)

            # discriminator step on detached fakes
            d_losses = discriminator_step(disc, x, x_hat.detach())
            d_opt.zero_grad()
            d_losses["d_total"].backward()
            d_opt.step()

            record = {
                "step": step,
                "loss": _scalar(total),
                "l_vq": _scalar(losses["l_vq"]),
                "l_rec": _scalar(losses["l_rec"]),
                "l_per": _scalar(losses["l_per"]),
                "l_adv": _scalar(losses["l_adv"]),
                "d_total": _scalar(d_losses["d_total"]),
            }
            logger.log(record)
            try:
                _check_finite(step, {"total": total, **losses, **d_losses})
            except TrainingDiverged:
                if out_path:
                    save_checkpoint(model_checkpoint(model, step), out_path + ".diverged")
                raise
            if out_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(model_checkpoint(model, step), out_path)
            if callback and callback(step, model, record):
                break
    finally:
        logger.close()

    ckpt = model_checkpoint(model, step)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt, logger.history
