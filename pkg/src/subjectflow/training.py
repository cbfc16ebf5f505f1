"""Supervised stages: flow-matching pretraining and multi-subject training with the dice term."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adapters import trainable_parameters
from .attention_reg import batch_attention_loss, combined_loss, scene_masks
from .flow import diffusion_loss, interpolate, velocity_target
from .model import Model, assemble_tokens, patchify
from .synthdata import IdentitySpec, SceneSpec, render_scene, scene_from_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-2
    lam: float = 0.0
    dice_eps: float = 1e-6
    n_subjects: int = 2
    n_scenes: int = 4096
    data_seed: int = 0
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0


class SceneSet:
    """A fixed set of scenes pre-rendered to latents and grid masks."""

    def __init__(self, scenes: Sequence[SceneSpec], model_config):
        self.scenes = list(scenes)
        p = model_config.patch_size
        targets = np.stack([render_scene(s)[0] for s in self.scenes])
        self.z0 = patchify(targets, p).float()
        self.masks = torch.stack([scene_masks(s, model_config.latent_grid) for s in self.scenes]).float()
        self.ref_cache: dict = {}

    @classmethod
    def generate(cls, count: int, n_subjects: int, pool: Sequence[IdentitySpec], seed: int, model_config, **kw):
        seeds = np.random.SeedSequence(seed).generate_state(count)
        scenes = [
            scene_from_seed(int(s), n_subjects, pool, max_subjects=model_config.max_subjects, **kw) for s in seeds
        ]
        return cls(scenes, model_config)

    def __len__(self) -> int:
        return len(self.scenes)


def flow_matching_step(
    model: Model,
    data: SceneSet,
    idx: Sequence[int],
    gen: torch.Generator,
    lam: float = 0.0,
    dice_eps: float = 1e-6,
) -> tuple[torch.Tensor, dict]:
    """Loss for one batch: L_diff + lam * L_attn (the attention term only when lam > 0)."""
    dtype = model.img_in.weight.dtype
    z0 = data.z0[idx].to(dtype)
    eps = torch.randn(z0.shape, generator=gen, dtype=dtype)
    t = torch.rand(len(idx), generator=gen, dtype=dtype)
    z_t = interpolate(z0, eps, t)
    batch = assemble_tokens([data.scenes[i] for i in idx], z_t, model.config, data.ref_cache)
    want_maps = lam > 0
    v, records = model(batch, t, record_attention=want_maps)
    l_diff = diffusion_loss(v, velocity_target(z0, eps))
    stats = {"l_diff": l_diff.item()}
    if want_maps:
        l_attn = batch_attention_loss(records, data.masks[idx].to(dtype), dice_eps)
        stats["l_attn"] = l_attn.item()
        loss = combined_loss(l_diff, l_attn, lam)
    else:
        loss = l_diff
    stats["loss"] = loss.item()
    return loss, stats


def train(
    model: Model,
    data: SceneSet,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """AdamW on the trainable parameters; returns the logged metric records."""
    params = trainable_parameters(model)
    if not params:
        raise ValueError("model has no trainable parameters")
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    idx_rng = np.random.default_rng(cfg.seed)
    fh = open(metrics_path, "a") if metrics_path else None
    history: list[dict] = []
    running: dict[str, float] = {}
    t0 = time.time()
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            idx = idx_rng.choice(len(data), size=cfg.batch_size, replace=False)
            loss, stats = flow_matching_step(model, data, idx, gen, cfg.lam, cfg.dice_eps)
            if not math.isfinite(stats["loss"]):
                log.warning("step %d: non-finite loss, skipped", step)
                opt.zero_grad(set_to_none=True)
                continue
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            for k, v in stats.items():
                running[k] = running.get(k, 0.0) + v
            if step % cfg.log_every == 0 or step == cfg.steps:
                n = cfg.log_every if step % cfg.log_every == 0 else step % cfg.log_every
                rec = {"step": step, **{k: v / n for k, v in running.items()}, "elapsed": round(time.time() - t0, 2)}
                running = {}
                history.append(rec)
                log.info("step %d %s", step, {k: round(v, 4) for k, v in rec.items() if k != "step"})
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if callback:
                    callback(step, rec)
    finally:
        if fh:
            fh.close()
    model.eval()
    return history
