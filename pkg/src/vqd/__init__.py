"""Degradation modeling and recurrent upscaling for animation clips.

Modules by responsibility:

- ``vq``: codebook storage, nearest / k-th-closest quantization, the
  quantizer loss terms, and the straight-through gradient rule.
- ``msvqgan``: the three-branch multi-scale autoencoder and its config.
- ``train_vqgan``: the two-stage degradation-model training loops.
- ``degrade``: the composed HR -> LR synthesis pipeline.
- ``vsr`` / ``train_vsr``: the recurrent x4 upscaler and its training.
- ``data``: manifests, scene filtering, ground-truth enhancement, and the
  synthetic cartoon-style clip generator.
- ``metrics``: PSNR / SSIM and the no-reference scoring protocol.
- ``checkpoint``: the self-describing archive format.
- ``cli``: the ``vqd`` command-line front end.
"""

__version__ = "0.1.0"
