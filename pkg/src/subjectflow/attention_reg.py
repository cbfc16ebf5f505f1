"""Per-subject attention maps, rasterised masks and the dice regulariser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import AttentionRecordSet
from .synthdata import SceneSpec


@dataclass
class SubjectMap:
    values: torch.Tensor  # (H_g, W_g) or (B, H_g, W_g), in [0, 1]
    subject_index: int


@dataclass
class SubjectMask:
    values: torch.Tensor  # same grid, {0, 1}
    subject_index: int


def minmax_normalize(x: torch.Tensor, dims: tuple[int, ...] = (-2, -1)) -> torch.Tensor:
    """Scale to [0, 1] over ``dims``; constant inputs map to zeros."""
    lo = x.amin(dim=dims, keepdim=True)
    hi = x.amax(dim=dims, keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (x - lo) / safe, torch.zeros_like(x))


def aggregate_subject_map(records: AttentionRecordSet, i: int) -> SubjectMap:
    """Mean over double blocks and reference rows, reshaped to the latent grid, min-max normalised.

    Keeps the batch dimension: ``values`` is (B, H_g, W_g).
    """
    if not 0 <= i < records.n_subjects:
        raise IndexError(f"subject {i} not in records with {records.n_subjects} subjects")
    maps = records.subject(i)  # (B, K, l, l_t)
    if maps.shape[1] == 0:
        raise ValueError("records hold no double-block maps")
    mean = maps.mean(dim=(1, 2)).reshape(maps.shape[0], *records.latent_grid)
    return SubjectMap(minmax_normalize(mean), i)


def rasterize_mask(scene: SceneSpec, i: int, grid: tuple[int, int]) -> SubjectMask:
    """Area-fraction pooling of subject ``i``'s pixel mask onto ``grid``; coverage >= 0.5 -> 1."""
    if not 0 <= i < scene.n_subjects:
        raise IndexError(f"scene has no subject {i}")
    m = scene.masks[i].astype(np.float64)
    gh, gw = grid
    H, W = m.shape
    if H % gh or W % gw:
        raise ValueError(f"canvas {H}x{W} not divisible into grid {gh}x{gw}")
    cover = m.reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3))
    return SubjectMask(torch.as_tensor((cover >= 0.5).astype(np.float64)), i)


def scene_masks(scene: SceneSpec, grid: tuple[int, int]) -> torch.Tensor:
    """(n, H_g, W_g) stacked masks; raises if two subjects share a cell."""
    masks = torch.stack([rasterize_mask(scene, i, grid).values for i in range(scene.n_subjects)])
    if scene.n_subjects > 1 and (masks.sum(0) > 1).any():
        raise ValueError("rasterised subject masks overlap")
    return masks


def dice_terms(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps) over the last two dims."""
    inter = (pred * target).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def dice_loss(maps, masks, eps: float = 1e-6) -> torch.Tensor:
    """Sum over subjects of the dice term.

    Accepts lists of :class:`SubjectMap` / :class:`SubjectMask` or tensors
    shaped (..., n, H, W). Batched inputs return one loss per batch element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(maps, (list, tuple)):
        if len(maps) != len(masks):
            raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
        if not maps:
            return torch.tensor(0.0)
        pred = torch.stack([m.values for m in maps], dim=-3)
        target = torch.stack([m.values for m in masks], dim=-3)
    else:
        pred, target = maps, masks
    target = target.to(pred.dtype)
    if pred.shape[-3:] != target.shape[-3:]:
        raise ValueError(f"map shape {tuple(pred.shape)} vs mask shape {tuple(target.shape)}")
    return dice_terms(pred, target, eps).sum(dim=-1)


def combined_loss(l_diff, l_attn, lam: float):
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return l_diff + lam * l_attn


def batch_attention_loss(records: AttentionRecordSet, masks: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Mean over the batch of the dice loss; ``masks`` is (B, n, H_g, W_g)."""
    maps = torch.stack([aggregate_subject_map(records, i).values for i in range(records.n_subjects)], dim=1)
    return dice_loss(maps, masks, eps).mean()
