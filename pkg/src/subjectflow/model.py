"""Miniature in-context diffusion transformer.

Text tokens, noisy-latent patch tokens and reference patch tokens share one
attention sequence. Double blocks keep separate weights for the text stream
and the image stream (latent + references) and can record the attention from
each reference's queries to the latent keys. Single blocks run one set of
weights over the whole sequence and record nothing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import PAD, PLACEMENT_GRID, SceneSpec, placement_token_base, prompt_length, render_reference


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    latent_grid: tuple[int, int] = (8, 8)
    channels: int = 192
    d_model: int = 64
    n_heads: int = 4
    k_double: int = 2
    k_single: int = 2
    max_subjects: int = 2
    vocab_size: int = 72
    ref_grid: tuple[int, int] = (4, 4)
    patch_size: int = 8
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "latent_grid", tuple(self.latent_grid))
        object.__setattr__(self, "ref_grid", tuple(self.ref_grid))

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(*self.latent_grid, *self.ref_grid) < 2:
            raise ConfigError("latent and reference grids must be at least 2x2")
        if self.k_double < 1:
            raise ConfigError("need at least one double block")
        if self.max_subjects < 1:
            raise ConfigError("max_subjects must be >= 1")
        if min(self.channels, self.k_single + 1, self.vocab_size, self.patch_size, self.mlp_ratio) < 1:
            raise ConfigError("channels, vocab_size, patch_size, mlp_ratio must be positive")
        return self

    @property
    def l_t(self) -> int:
        return self.latent_grid[0] * self.latent_grid[1]

    @property
    def l_ref(self) -> int:
        return self.ref_grid[0] * self.ref_grid[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_grid"] = list(self.latent_grid)
        d["ref_grid"] = list(self.ref_grid)
        return d


# --- latent space: identity patchify -----------------------------------------


def patchify(image: np.ndarray | torch.Tensor, p: int) -> torch.Tensor:
    """(..., H, W, 3) in [0, 1] -> (..., H/p, W/p, p*p*3) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    *lead, H, W, ch = x.shape
    x = x.reshape(*lead, H // p, p, W // p, p, ch)
    x = x.movedim(-4, -3)  # (..., H/p, W/p, p, p, ch)
    return x.reshape(*lead, H // p, W // p, p * p * ch) * 2.0 - 1.0


def unpatchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """Inverse of :func:`patchify`; values are mapped back to [0, 1] but not clipped."""
    *lead, gh, gw, C = z.shape
    ch = C // (p * p)
    x = z.reshape(*lead, gh, gw, p, p, ch).movedim(-3, -4)
    return (x.reshape(*lead, gh * p, gw * p, ch) + 1.0) / 2.0


# --- token layout -------------------------------------------------------------

TEXT, LATENT = 0, 1  # segment ids; reference i (1-based) is 1 + i


@dataclass
class TokenBatch:
    text_ids: torch.Tensor  # (B, L) long
    latent: torch.Tensor  # (B, l_t, C)
    refs: torch.Tensor  # (B, n, l, C)
    positions: torch.Tensor  # (S, 2) long
    segment_ids: torch.Tensor  # (S,) long

    @property
    def n_subjects(self) -> int:
        return self.refs.shape[1]

    @property
    def seq_len(self) -> int:
        return self.positions.shape[0]

    def segment_slice(self, seg: int) -> slice:
        idx = torch.nonzero(self.segment_ids == seg).flatten()
        return slice(int(idx[0]), int(idx[-1]) + 1)

    def with_latent(self, latent: torch.Tensor) -> "TokenBatch":
        """Same layout with a new noisy latent, given as (B, l_t, C) or (B, H_g, W_g, C)."""
        if latent.dim() == 4:
            latent = latent.reshape(latent.shape[0], -1, latent.shape[-1])
        return TokenBatch(self.text_ids, latent, self.refs, self.positions, self.segment_ids)


def _layout(n: int, text_len: int, config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    Hg, Wg = config.latent_grid
    Hr, Wr = config.ref_grid
    pos = [torch.zeros(text_len, 2, dtype=torch.long)]
    seg = [torch.full((text_len,), TEXT, dtype=torch.long)]
    rr, cc = torch.meshgrid(torch.arange(Hg), torch.arange(Wg), indexing="ij")
    pos.append(torch.stack([rr.flatten(), cc.flatten()], dim=1))
    seg.append(torch.full((Hg * Wg,), LATENT, dtype=torch.long))
    rr, cc = torch.meshgrid(torch.arange(Hr), torch.arange(Wr), indexing="ij")
    for i in range(1, n + 1):
        pos.append(torch.stack([rr.flatten() + i * Hg, cc.flatten() + i * Wg], dim=1))
        seg.append(torch.full((Hr * Wr,), LATENT + i, dtype=torch.long))
    return torch.cat(pos), torch.cat(seg)


def reference_patches(scene: SceneSpec, config: ModelConfig) -> torch.Tensor:
    """(n, l, C) patchified reference renders for a scene."""
    Hr, Wr = config.ref_grid
    p = config.patch_size
    if not scene.subjects:
        return torch.zeros(0, Hr * Wr, config.channels)
    imgs = np.stack([render_reference(ident, Hr * p) for ident, _ in scene.subjects])
    return patchify(imgs, p).reshape(len(scene.subjects), Hr * Wr, -1)


def assemble_tokens(
    scene: SceneSpec | Sequence[SceneSpec],
    z_t: torch.Tensor,
    config: ModelConfig,
    ref_cache: dict | None = None,
) -> TokenBatch:
    """Lay out [text | latent | ref_1 | ... | ref_n] for one scene or a batch of scenes.

    Reference ``i`` uses the reference grid shifted by ``i * latent_grid`` so
    its positions never collide with the canvas.
    """
    scenes = [scene] if isinstance(scene, SceneSpec) else list(scene)
    z = torch.as_tensor(z_t)
    if z.dim() == 3:
        z = z.unsqueeze(0)
    if z.shape[0] != len(scenes):
        raise ValueError(f"{len(scenes)} scenes but latent batch of {z.shape[0]}")
    if tuple(z.shape[1:3]) != config.latent_grid or z.shape[3] != config.channels:
        raise ValueError(f"latent shape {tuple(z.shape[1:])} does not match config")
    counts = {s.n_subjects for s in scenes}
    if len(counts) != 1:
        raise ValueError("all scenes in a batch must have the same subject count")
    n = counts.pop()
    if n > config.max_subjects:
        raise CapacityError(f"{n} subjects exceed model capacity {config.max_subjects}")

    text_len = prompt_length(config.max_subjects)
    text = []
    for s in scenes:
        toks = list(s.prompt_tokens) or [PAD] * text_len
        if len(toks) != text_len:
            raise ValueError(f"prompt of length {len(toks)}, model expects {text_len}")
        text.append(toks)
    text_ids = torch.tensor(text, dtype=torch.long)

    refs = []
    for s in scenes:
        key = tuple(ident.identity_id for ident, _ in s.subjects)
        if ref_cache is not None and key in ref_cache:
            refs.append(ref_cache[key])
            continue
        r = reference_patches(s, config)
        if ref_cache is not None:
            ref_cache[key] = r
        refs.append(r)
    refs_t = torch.stack(refs).to(z.dtype)
    positions, segments = _layout(n, text_len, config)
    return TokenBatch(text_ids, z.reshape(z.shape[0], config.l_t, config.channels), refs_t, positions, segments)


# --- modules ----------------------------------------------------------------


def sinusoidal(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = x[..., None].to(freqs.dtype) * freqs
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


def position_embedding(positions: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    rows = sinusoidal(positions[:, 0].to(dtype), dim // 2, max_period=100.0)
    cols = sinusoidal(positions[:, 1].to(dtype), dim // 2, max_period=100.0)
    return torch.cat([rows, cols], dim=-1)


def placement_positions(config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Latent-grid (row, col) of every placement token id and a mask of which ids are placement tokens."""
    Hg, Wg = config.latent_grid
    base = placement_token_base(config.max_subjects)
    pos = torch.zeros(config.vocab_size, 2, dtype=torch.float64)
    is_cell = torch.zeros(config.vocab_size, dtype=torch.bool)
    for tok in range(base, min(config.vocab_size, base + PLACEMENT_GRID * PLACEMENT_GRID)):
        r, c = divmod(tok - base, PLACEMENT_GRID)
        pos[tok, 0] = (r + 0.5) * Hg / PLACEMENT_GRID - 0.5
        pos[tok, 1] = (c + 0.5) * Wg / PLACEMENT_GRID - 0.5
        is_cell[tok] = True
    return pos, is_cell


class FeedForward(nn.Module):
    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(h)))


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the full key sequence; q, k are (B, H, S, dh)."""
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    B, S, D = x.shape
    return x.reshape(B, S, n_heads, D // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    B, H, S, dh = x.shape
    return x.transpose(1, 2).reshape(B, S, H * dh)


class Stream(nn.Module):
    """Per-stream weights of a double block."""

    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ratio)


class DoubleBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.txt = Stream(d, ratio)
        self.img = Stream(d, ratio)

    def forward(self, x_txt, x_img, ref_slices=None, latent_slice=None, probe=None):
        n_txt = x_txt.shape[1]
        qkv = torch.cat([self.txt.qkv(self.txt.norm1(x_txt)), self.img.qkv(self.img.norm1(x_img))], dim=1)
        q, k, v = (_split_heads(z, self.n_heads) for z in qkv.chunk(3, dim=-1))
        w = attention_weights(q, k)
        if probe is not None:
            probe.append(w.detach())
        out = _merge_heads(w @ v)
        x_txt = x_txt + self.txt.proj(out[:, :n_txt])
        x_img = x_img + self.img.proj(out[:, n_txt:])
        x_txt = x_txt + self.txt.ffn(self.txt.norm2(x_txt))
        x_img = x_img + self.img.ffn(self.img.norm2(x_img))
        maps = None
        if ref_slices is not None:
            mean_w = w.mean(dim=1)  # head average, (B, S, S)
            maps = torch.stack([mean_w[:, sl, latent_slice] for sl in ref_slices], dim=1)
        return x_txt, x_img, maps


class SingleBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ratio)

    def forward(self, x):
        q, k, v = (_split_heads(z, self.n_heads) for z in self.qkv(self.norm1(x)).chunk(3, dim=-1))
        x = x + self.proj(_merge_heads(attention_weights(q, k) @ v))
        return x + self.ffn(self.norm2(x))


@dataclass
class AttentionRecordSet:
    """maps[b, k, i] is the (l, l_t) attention of reference i's queries on latent keys at double block k."""

    maps: torch.Tensor  # (B, K_double, n, l, l_t)
    latent_grid: tuple[int, int]

    @property
    def n_blocks(self) -> int:
        return self.maps.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.maps.shape[2]

    def subject(self, i: int) -> torch.Tensor:
        """(B, K, l, l_t) maps for subject ``i`` (0-based)."""
        return self.maps[:, :, i]


class Model(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        self.txt_embed = nn.Embedding(config.vocab_size, d)
        # text has no 2D position of its own; a learned slot embedding keeps its order
        self.txt_slot = nn.Embedding(prompt_length(config.max_subjects), d)
        # placement tokens sit at their cell on the latent grid; other text at (0, 0)
        cell_pos, is_cell = placement_positions(config)
        self.register_buffer("cell_pos", cell_pos, persistent=False)
        self.register_buffer("is_cell", is_cell, persistent=False)
        self.img_in = nn.Linear(config.channels, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.double_blocks = nn.ModuleList(DoubleBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.k_double))
        self.single_blocks = nn.ModuleList(SingleBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.k_single))
        self.norm_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, config.channels)
        # per-channel, time-dependent pass-through of the noisy latent; the
        # noise part of the velocity is full rank and would not fit through d
        self.skip_gate = nn.Linear(d, config.channels)

    # adapter attachment points
    def ffn_sites(self) -> dict[str, nn.Module]:
        return {name: m for name, m in self.named_modules() if name.endswith("ffn")}

    def linear_sites(self) -> dict[str, nn.Module]:
        return {name: m for name, m in self.named_modules() if name.endswith((".qkv", ".proj"))}

    def forward(self, batch: TokenBatch, t, record_attention: bool = False, probe: list | None = None):
        cfg = self.config
        dtype = self.img_in.weight.dtype
        B = batch.latent.shape[0]
        t = torch.as_tensor(t, dtype=dtype)
        t = t.expand(B) if t.dim() == 0 else t
        temb = self.time_mlp(sinusoidal(t * 1000.0, cfg.d_model))[:, None, :]
        skip = self.skip_gate(temb)  # (B, 1, C)
        pos = position_embedding(batch.positions, cfg.d_model, dtype)

        n_txt = batch.text_ids.shape[1]
        ids = batch.text_ids
        cell_emb = position_embedding(self.cell_pos[ids].reshape(-1, 2), cfg.d_model, dtype).reshape(*ids.shape, -1)
        txt_pos = torch.where(self.is_cell[ids][..., None], cell_emb, pos[:n_txt])
        x_txt = self.txt_embed(ids) + self.txt_slot.weight[: ids.shape[1]] + txt_pos + temb
        img_tokens = torch.cat([batch.latent.to(dtype), batch.refs.to(dtype).flatten(1, 2)], dim=1)
        x_img = self.img_in(img_tokens) + pos[n_txt:] + temb

        ref_slices = latent_slice = None
        if record_attention and batch.n_subjects:
            latent_slice = batch.segment_slice(LATENT)
            ref_slices = [batch.segment_slice(LATENT + i) for i in range(1, batch.n_subjects + 1)]
        maps = []
        for blk in self.double_blocks:
            x_txt, x_img, m = blk(x_txt, x_img, ref_slices, latent_slice, probe)
            if m is not None:
                maps.append(m)
        x = torch.cat([x_txt, x_img], dim=1)
        for blk in self.single_blocks:
            x = blk(x)
        lat = x[:, n_txt : n_txt + cfg.l_t]
        v = self.out(self.norm_out(lat)) + skip * batch.latent.to(dtype)
        v = v.reshape(B, *cfg.latent_grid, cfg.channels)

        records = None
        if record_attention:
            if maps:
                stacked = torch.stack(maps, dim=1)
            else:
                stacked = torch.zeros(B, cfg.k_double, 0, cfg.l_ref, cfg.l_t, dtype=dtype)
            records = AttentionRecordSet(stacked, cfg.latent_grid)
        return v, records


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Model:
    """Deterministic initialisation; the global torch RNG is left untouched."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Model(config)
    return model.to(dtype)


def forward(model: Model, batch: TokenBatch, t, record_attention: bool = False):
    return model(batch, t, record_attention=record_attention)
