"""LoRA and mixture-of-experts LoRA adapters.

FFN sites get a bank of LoRA experts routed per token by a top-k softmax gate
that reads the FFN input; attention projections get plain LoRA. All ``B``
matrices start at zero so a freshly adapted model reproduces its base.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .model import Model


class AdapterError(ValueError):
    pass


def topk_mask(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the k largest entries along the last dim; ties go to the lowest index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise AdapterError(f"k={k} outside 1..{n}")
    order = torch.argsort(-logits, dim=-1, stable=True)
    mask = torch.zeros_like(logits, dtype=torch.bool)
    return mask.scatter(-1, order[..., :k], True)


def gate(W_g: torch.Tensor, h: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax over the top-k logits of ``h @ W_g^T``; the rest are exactly zero."""
    return gate_from_logits(h @ W_g.transpose(-1, -2), k)


def gate_from_logits(logits: torch.Tensor, k: int) -> torch.Tensor:
    keep = topk_mask(logits, k)
    masked = logits.masked_fill(~keep, float("-inf"))
    return torch.softmax(masked, dim=-1)


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        dtype = base.weight.dtype
        self.A = nn.Parameter(torch.randn(rank, base.in_features, dtype=dtype) / math.sqrt(base.in_features))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return (self.alpha / self.rank) * ((x @ self.A.T) @ self.B.T)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.delta(x)


class MoELoRA(nn.Module):
    """Wraps an FFN: h_out = FFN(h) + sum_i p_i (alpha/r) B_i A_i h."""

    def __init__(self, ffn: nn.Module, d_in: int, d_out: int, n_experts: int, rank: int, alpha: float, k: int):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise AdapterError(f"top_k={k} must be in 1..{n_experts}")
        self.ffn = ffn
        self.n_experts, self.rank, self.alpha, self.k = n_experts, rank, alpha, k
        dtype = next(ffn.parameters()).dtype
        self.A = nn.Parameter(torch.randn(n_experts, rank, d_in, dtype=dtype) / math.sqrt(d_in))
        self.B = nn.Parameter(torch.zeros(n_experts, d_out, rank, dtype=dtype))
        self.W_g = nn.Parameter(torch.randn(n_experts, d_in, dtype=dtype) / math.sqrt(d_in))
        self.last_routing: torch.Tensor | None = None

    def expert_outputs(self, h: torch.Tensor) -> torch.Tensor:
        """(..., N_e, d_out) un-gated expert deltas (alpha/r) B_i A_i h."""
        low = torch.einsum("erd,...d->...er", self.A, h)
        return (self.alpha / self.rank) * torch.einsum("eor,...er->...eo", self.B, low)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        p = gate(self.W_g, h, self.k)
        self.last_routing = p.detach()
        return moe_lora_forward(self.ffn(h), p, self.expert_outputs(h))


def moe_lora_forward(ffn_out: torch.Tensor, routing: torch.Tensor, expert_out: torch.Tensor) -> torch.Tensor:
    """ffn_out + sum_i routing_i * expert_out_i."""
    if expert_out.shape[:-1] != routing.shape or expert_out.shape[-1] != ffn_out.shape[-1]:
        raise ValueError("routing / expert output dimensions disagree")
    return ffn_out + (routing.unsqueeze(-1) * expert_out).sum(dim=-2)


@dataclass(frozen=True)
class AdapterSpec:
    ffn_mode: str = "moe"  # moe | lora | none
    attn_mode: str = "lora"  # lora | none
    sites: tuple[str, ...] | None = None  # restrict to these names; None = every site
    n_experts: int = 4
    top_k: int = 1
    rank: int = 8
    alpha: float = 8.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = list(self.sites) if self.sites is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        d = dict(d)
        if d.get("sites") is not None:
            d["sites"] = tuple(d["sites"])
        return cls(**d)


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, attr = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, attr, module)


def attach_adapters(model: Model, spec: AdapterSpec) -> Model:
    """Freeze the base and wrap the chosen sites in place. Returns ``model``."""
    if spec.ffn_mode not in ("moe", "lora", "none") or spec.attn_mode not in ("lora", "none"):
        raise AdapterError(f"bad adapter modes {spec.ffn_mode!r}/{spec.attn_mode!r}")
    if spec.rank < 1:
        raise AdapterError("rank must be >= 1")
    if getattr(model, "adapter_spec", None) is not None:
        raise AdapterError("model already has adapters")
    ffn_sites = model.ffn_sites()
    lin_sites = model.linear_sites()
    if spec.sites is not None:
        unknown = [s for s in spec.sites if s not in ffn_sites and s not in lin_sites]
        if unknown:
            raise AdapterError(f"unknown adapter sites: {unknown}")
        wanted = set(spec.sites)
        ffn_sites = {k: v for k, v in ffn_sites.items() if k in wanted}
        lin_sites = {k: v for k, v in lin_sites.items() if k in wanted}

    for p in model.parameters():
        p.requires_grad_(False)

    d = model.config.d_model
    if spec.ffn_mode != "none":
        n_e, k = (spec.n_experts, spec.top_k) if spec.ffn_mode == "moe" else (1, 1)
        for name, ffn in ffn_sites.items():
            _set_submodule(model, name, MoELoRA(ffn, d, d, n_e, spec.rank, spec.alpha, k))
    if spec.attn_mode == "lora":
        for name, lin in lin_sites.items():
            _set_submodule(model, name, LoRALinear(lin, spec.rank, spec.alpha))
    model.adapter_spec = spec
    return model


def adapter_modules(model: nn.Module) -> dict[str, nn.Module]:
    return {n: m for n, m in model.named_modules() if isinstance(m, (LoRALinear, MoELoRA))}


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Only the adapter parameters (A, B, W_g) from the state dict."""
    return {k: v for k, v in model.state_dict().items() if k.rsplit(".", 1)[-1] in ("A", "B", "W_g")}


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def expected_trainable_count(model: Model, spec: AdapterSpec) -> int:
    """Closed form: r(d_in + d_out) per LoRA, N_e r(d_in + d_out) + N_e d_in per MoE site."""
    d = model.config.d_model
    total = 0
    for m in adapter_modules(model).values():
        if isinstance(m, LoRALinear):
            total += spec.rank * (m.base.in_features + m.base.out_features)
        else:
            total += m.n_experts * spec.rank * (d + d) + m.n_experts * d
    return total
