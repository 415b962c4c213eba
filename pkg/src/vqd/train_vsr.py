"""Two-stage training of the recurrent upscaler with online LR synthesis.

Every step crops an HR clip window, synthesizes its LR counterpart through
the degradation pipeline (basic operators only in stage 1, with the
codebook-transfer stage in stage 2), and optimizes L1 (stage 1) or
L1 + perceptual + GAN (stage 2).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import (
    Checkpoint,
    arrays_from_module,
    load_arrays_into_module,
    require_stage,
    save_checkpoint,
)
from .data import hr_sr_enhance
from .degrade import DegradationConfig, degrade_clip
from .discriminator import PatchDiscriminator, discriminator_step, generator_loss
from .errors import ConfigError, VQDError
from .msvqgan import MultiScaleVQGAN
from .perceptual import build_perceptual
from .rng import derive_rng, derive_seed
from .train_vqgan import JsonlLogger, TrainingDiverged, _check_finite, _scalar
from .vsr import RecurrentUpscaler, VSRConfig

VSR_ADAM_BETAS = (0.9, 0.99)


def vsr_checkpoint(model: RecurrentUpscaler, stage: str, step: int) -> Checkpoint:
    return Checkpoint(
        arrays=arrays_from_module(model),
        config=model.cfg.to_dict(),
        stage=stage,
        step=step,
        kind="vsr",
    )


def vsr_from_checkpoint(ckpt: Checkpoint) -> RecurrentUpscaler:
    if ckpt.kind != "vsr":
        raise ConfigError(f"expected a vsr checkpoint, got kind {ckpt.kind!r}")
    cfg = VSRConfig.from_dict(ckpt.config)
    torch.manual_seed(0)
    model = RecurrentUpscaler(cfg)
    load_arrays_into_module(model, ckpt.arrays)
    model.eval()
    return model


def _clip_to_tensor(clip: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip.transpose(0, 3, 1, 2))).float()


def train_vsr(
    stage: int,
    dataset,
    degradation_cfg: DegradationConfig,
    cfg: VSRConfig,
    seed: int = 0,
    degradation_model: Optional[MultiScaleVQGAN] = None,
    stage1_ckpt: Optional[Checkpoint] = None,
    enhancer=None,
    steps: Optional[int] = None,
    out_path: Optional[str] = None,
    log_path: Optional[str] = None,
    checkpoint_every: int = 1000,
    callback: Optional[Callable] = None,
):
    """Train the upscaler; returns (Checkpoint, step history)."""
    cfg.validate()
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if len(dataset) == 0:
        raise VQDError("VSR training requires a non-empty dataset")

    deg_dict = degradation_cfg.to_dict()
    if stage == 1:
        # only the basic operators feed stage-1 supervision
        deg_dict["vqd"]["enable"] = False
        deg = DegradationConfig.from_dict(deg_dict)
        model_deg = None
    else:
        deg_dict["vqd"]["enable"] = True
        deg = DegradationConfig.from_dict(deg_dict)
        if degradation_model is None:
            raise ConfigError("stage-2 VSR training needs a stage-2 degradation model")
        model_deg = degradation_model

    torch.manual_seed(derive_seed(seed, "vsr-init", stage))
    model = RecurrentUpscaler(cfg)
    if stage == 2:
        if stage1_ckpt is None:
            raise ConfigError("stage-2 VSR training needs a stage-1 VSR checkpoint")
        require_stage(stage1_ckpt, "stage1")
        load_arrays_into_module(model, stage1_ckpt.arrays)
    model.train()

    lr = cfg.stage1_lr if stage == 1 else cfg.stage2_lr
    steps = (cfg.stage1_steps if stage == 1 else cfg.stage2_steps) if steps is None else steps
    batch = cfg.stage1_batch if stage == 1 else cfg.stage2_batch
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=VSR_ADAM_BETAS)

    disc = perceptual = d_opt = None
    if stage == 2:
        disc = PatchDiscriminator(channels=cfg.disc_channels, n_layers=cfg.disc_layers)
        d_opt = torch.optim.Adam(disc.parameters(), lr=lr, betas=VSR_ADAM_BETAS)
        perceptual = build_perceptual(seed=derive_seed(seed, "vsr-perceptual") % 2**31)

    rng = derive_rng(seed, "vsr-data", stage)
    logger = JsonlLogger(log_path)
    scale = deg.down.scale

    try:
        for step in range(1, steps + 1):
            sr_frames, gt_frames = [], []
            for _ in range(batch):
                hr = dataset.sample_window(cfg.clip_length, cfg.train_crop, rng)
                lr_clip = degrade_clip(hr, deg, model_deg, rng)
                gt = hr
                if cfg.use_enhanced_gt and enhancer is not None:
                    gt = np.stack([hr_sr_enhance(f, enhancer) for f in hr], axis=0)
                sr = model.forward_clip(_clip_to_tensor(lr_clip), clamp=False)
                sr_frames.append(sr)
                gt_frames.append(_clip_to_tensor(gt))
            sr_all = torch.cat(sr_frames, dim=0)
            gt_all = torch.cat(gt_frames, dim=0)

            l1 = (sr_all - gt_all).abs().mean()
            losses = {"l1": l1}
            total = cfg.l1_weight * l1
            if stage == 2:
                for p in disc.parameters():
                    p.requires_grad_(False)
                losses["l_per"] = perceptual(gt_all, sr_all)
                losses["l_gan"] = generator_loss(disc(sr_all), kind=cfg.gan_kind)
                total = (
                    total
                    + cfg.perceptual_weight * losses["l_per"]
                    + cfg.gan_weight * losses["l_gan"]
                )
            opt.zero_grad()
            total.backward()
            opt.step()

            if stage == 2:
                for p in disc.parameters():
                    p.requires_grad_(True)
                d_losses = discriminator_step(disc, gt_all, sr_all.detach(), kind=cfg.gan_kind)
                d_opt.zero_grad()
                d_losses["d_total"].backward()
                d_opt.step()
                losses["d_total"] = d_losses["d_total"]

            record = {"step": step, "loss": _scalar(total)}
            record.update({k: _scalar(v) for k, v in losses.items()})
            logger.log(record)
            try:
                _check_finite(step, {"total": total, **losses})
            except TrainingDiverged:
                if out_path:
                    save_checkpoint(vsr_checkpoint(model, f"stage{stage}", step), out_path + ".diverged")
                raise
            if out_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(vsr_checkpoint(model, f"stage{stage}", step), out_path)
            if callback and callback(step, model, record):
                break
    finally:
        logger.close()

    ckpt = vsr_checkpoint(model, f"stage{stage}", step)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt, logger.history
