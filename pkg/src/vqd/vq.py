"""Codebook storage and vector-quantization primitives.

The codebook holds L latent entries of dimension n_z. Quantization replaces
each latent vector with either its nearest entry or, for degradation
synthesis, the k-th closest entry where k is drawn uniformly from [1, K].
Ordering uses squared Euclidean distance with ties broken by lowest entry
index, which makes every operation deterministic and oracle-comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatchError

BRANCH_TAGS = ("top", "middle", "bottom")


def init_codebook_entries(
    size: int, dim: int, seed: int = 0, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Fresh codebook weights, uniform on [-1/L, 1/L] per element."""
    if size < 1 or dim < 1:
        raise ValueError(f"codebook needs size >= 1 and dim >= 1, got {size}x{dim}")
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / size
    return (torch.rand(size, dim, generator=gen, dtype=torch.float64) * 2 - 1).to(dtype) * bound


@dataclass
class Codebook:
    """L x n_z matrix of learned latent entries."""

    entries: torch.Tensor

    def __post_init__(self):
        if self.entries.dim() != 2:
            raise ShapeMismatchError(
                f"codebook entries must be 2-D (L x n_z), got {tuple(self.entries.shape)}"
            )
        if self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError("codebook needs L >= 1 and n_z >= 1")
        if not torch.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initialize(cls, size: int, dim: int, seed: int = 0) -> "Codebook":
        return cls(init_codebook_entries(size, dim, seed))


@dataclass
class LatentMap:
    """h x w grid of latent vectors plus the branch that produced it."""

    values: torch.Tensor
    origin: str = "top"

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeMismatchError(
                f"latent map must be h x w x n_z, got {tuple(self.values.shape)}"
            )
        if self.origin not in BRANCH_TAGS:
            raise ValueError(f"origin must be one of {BRANCH_TAGS}, got {self.origin!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class QuantizationResult:
    quantized: LatentMap
    indices: torch.Tensor  # h x w int64 in [0, L)
    distances: torch.Tensor  # h x w Euclidean distance to the chosen entry


def _check_dims(z: LatentMap, cb: Codebook) -> None:
    if z.dim != cb.dim:
        raise ShapeMismatchError(
            f"latent dimension {z.dim} does not match codebook dimension {cb.dim}"
        )


def squared_distances(flat: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """(N, n_z) x (L, n_z) -> (N, L) squared Euclidean distances."""
    d2 = (
        (flat ** 2).sum(dim=1, keepdim=True)
        + (entries ** 2).sum(dim=1)[None, :]
        - 2.0 * flat @ entries.T
    )
    return d2.clamp_min(0)


def _row_chunk(size: int) -> int:
    # keep each chunk's N x L distance block around 16M elements
    return max(64, (1 << 24) // max(1, size))


def _exact_d2(flat: torch.Tensor, entries: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # direct per-row recomputation, so identical vectors report distance 0
    return ((flat - entries[idx]) ** 2).sum(dim=1)


def nearest_indices(flat: torch.Tensor, entries: torch.Tensor):
    """Lowest-index nearest entry per row; returns (indices, squared distances)."""
    n = flat.shape[0]
    size = entries.shape[0]
    chunk = _row_chunk(size)
    out_idx = torch.empty(n, dtype=torch.int64)
    arange = torch.arange(size)
    for start in range(0, n, chunk):
        d2 = squared_distances(flat[start : start + chunk], entries)
        mins = d2.min(dim=1, keepdim=True).values
        # lowest index among exact minima, independent of argmin tie behavior
        tied = torch.where(d2 == mins, arange, size)
        out_idx[start : start + chunk] = tied.min(dim=1).values
    return out_idx, _exact_d2(flat, entries, out_idx)


def kth_indices(flat: torch.Tensor, entries: torch.Tensor, k: int):
    """Index of the k-th closest entry (ascending, ties by lowest index)."""
    size = entries.shape[0]
    if k < 1 or k > size:
        raise ValueError(f"k must be in [1, {size}], got {k}")
    n = flat.shape[0]
    chunk = _row_chunk(size)
    out_idx = torch.empty(n, dtype=torch.int64)
    for start in range(0, n, chunk):
        d2 = squared_distances(flat[start : start + chunk], entries)
        # stable sort keeps equal distances in index order
        _, idx = torch.sort(d2, dim=1, stable=True)
        out_idx[start : start + chunk] = idx[:, k - 1]
    return out_idx, _exact_d2(flat, entries, out_idx)


def _result_from_flat(z: LatentMap, cb: Codebook, idx: torch.Tensor, d2: torch.Tensor):
    h, w, _ = z.values.shape
    quantized = cb.entries[idx].reshape(h, w, cb.dim)
    return QuantizationResult(
        quantized=LatentMap(quantized, origin=z.origin),
        indices=idx.reshape(h, w),
        distances=d2.clamp_min(0).sqrt().reshape(h, w),
    )


def nearest_quantize(z: LatentMap, cb: Codebook) -> QuantizationResult:
    """Replace every latent vector with its nearest codebook entry."""
    _check_dims(z, cb)
    flat = z.values.reshape(-1, z.dim)
    idx, d2 = nearest_indices(flat, cb.entries)
    return _result_from_flat(z, cb, idx, d2)


def topk_quantize(z: LatentMap, cb: Codebook, k: int) -> QuantizationResult:
    """Replace every latent vector with its k-th closest codebook entry.

    k = 1 reproduces ``nearest_quantize`` exactly; larger k selects entries
    further out in the distance ordering, i.e. heavier degradation.
    """
    _check_dims(z, cb)
    flat = z.values.reshape(-1, z.dim)
    if k == 1:
        idx, d2 = nearest_indices(flat, cb.entries)
    else:
        idx, d2 = kth_indices(flat, cb.entries, k)
    return _result_from_flat(z, cb, idx, d2)


def sample_degradation_level(max_level: int, rng: np.random.Generator) -> int:
    """Draw the degradation level k uniformly from the integers [1, max_level]."""
    if max_level < 1:
        raise ValueError(f"max degradation level must be >= 1, got {max_level}")
    return int(rng.integers(1, max_level + 1))


def vq_loss_terms(
    z,
    q,
    beta: float = 0.25,
    beta_placement: str = "as-printed",
):
    """Codebook and commitment quadratic terms of the quantizer objective.

    Each term is the squared Euclidean norm over the latent dimension,
    averaged over grid positions. Stop-gradients partition the flow: the
    codebook term moves entries toward frozen encoder outputs, the
    commitment term pulls encoder outputs toward frozen entries.

    ``beta_placement`` selects which term carries the beta weight:
    "as-printed" puts it on the codebook term, "commitment" on the
    commitment term (the convention of the earlier VQ literature).

    Accepts raw tensors, or a LatentMap / QuantizationResult pair.
    """
    z = z.values if isinstance(z, LatentMap) else z
    if isinstance(q, QuantizationResult):
        z_q = q.quantized.values
    elif isinstance(q, LatentMap):
        z_q = q.values
    else:
        z_q = q
    if z.shape != z_q.shape:
        raise ShapeMismatchError(
            f"latent shape {tuple(z.shape)} does not match quantized shape {tuple(z_q.shape)}"
        )
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if beta_placement not in ("as-printed", "commitment"):
        raise ValueError(f"unknown beta_placement {beta_placement!r}")
    codebook_term = ((z.detach() - z_q) ** 2).sum(dim=-1).mean()
    commitment_term = ((z_q.detach() - z) ** 2).sum(dim=-1).mean()
    if beta_placement == "as-printed":
        codebook_term = beta * codebook_term
    else:
        commitment_term = beta * commitment_term
    return codebook_term, commitment_term


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, quantized):
        return quantized

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(z, quantized) -> torch.Tensor:
    """Forward the quantized values, backpropagate as the identity on ``z``.

    The returned tensor is bit-equal to ``quantized``; gradients of any
    downstream loss flow to ``z`` unchanged and never to ``quantized``.
    """
    z = z.values if isinstance(z, LatentMap) else z
    if isinstance(quantized, QuantizationResult):
        quantized = quantized.quantized.values
    elif isinstance(quantized, LatentMap):
        quantized = quantized.values
    if z.shape != quantized.shape:
        raise ShapeMismatchError(
            f"latent shape {tuple(z.shape)} does not match quantized shape "
            f"{tuple(quantized.shape)}"
        )
    return _StraightThrough.apply(z, quantized)
