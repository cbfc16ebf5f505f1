import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from subjectflow.adapters import (
    AdapterError,
    AdapterSpec,
    LoRALinear,
    MoELoRA,
    adapter_modules,
    attach_adapters,
    expected_trainable_count,
    gate,
    gate_from_logits,
    moe_lora_forward,
    trainable_parameters,
)
from subjectflow.model import FeedForward, ModelConfig, assemble_tokens, build_model


def test_gate_examples():
    logits = torch.tensor([2.0, 1.0, 0.5, -1.0], dtype=torch.float64)
    assert gate_from_logits(logits, 1).tolist() == [1.0, 0.0, 0.0, 0.0]
    p = gate_from_logits(logits, 2)
    assert p[0].item() == pytest.approx(0.7311, abs=1e-4)
    assert p[1].item() == pytest.approx(0.2689, abs=1e-4)
    assert p[2].item() == 0.0 and p[3].item() == 0.0


def test_gate_tie_goes_to_lowest_index():
    assert gate_from_logits(torch.tensor([1.0, 1.0, 0.0, 0.0]), 1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_gate_k_too_large():
    with pytest.raises(AdapterError):
        gate(torch.zeros(4, 3), torch.zeros(3), 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.integers(0, 10_000))))
def test_gate_sparsity_and_normalisation(args):
    n, k, seed = args
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(n, 5, generator=g, dtype=torch.float64)
    h = torch.randn(7, 5, generator=g, dtype=torch.float64)
    p = gate(W, h, k)
    assert ((p > 0).sum(-1) == k).all()
    assert torch.allclose(p.sum(-1), torch.ones(7, dtype=torch.float64))


def test_moe_forward_scalar_example():
    ffn_out = torch.tensor([1.0])
    routing = torch.tensor([1.0])
    expert = torch.tensor([[0.5]])
    assert moe_lora_forward(ffn_out, routing, expert).item() == 1.5


def test_unrouted_expert_contributes_nothing():
    ffn_out = torch.zeros(2)
    routing = torch.tensor([1.0, 0.0])
    expert = torch.tensor([[0.1, 0.2], [5.0, 5.0]])
    assert torch.allclose(moe_lora_forward(ffn_out, routing, expert), torch.tensor([0.1, 0.2]))


def test_zero_init_bank_is_identity():
    ffn = FeedForward(8, 2).double()
    moe = MoELoRA(ffn, 8, 8, 4, 2, 2.0, 1)
    h = torch.randn(3, 8, dtype=torch.float64)
    assert torch.equal(moe(h), ffn(h))


def test_alpha_scales_delta_linearly():
    base = torch.nn.Linear(4, 3).double()
    a = LoRALinear(base, 2, 1.0)
    b = LoRALinear(base, 2, 2.0)
    with torch.no_grad():
        b.A.copy_(a.A)
        a.B.normal_()
        b.B.copy_(a.B)
    x = torch.randn(5, 4, dtype=torch.float64)
    assert torch.allclose(b.delta(x), 2 * a.delta(x), atol=1e-15)


def _fixed_input(model, pool_scene):
    cfg = model.config
    z = torch.randn(1, *cfg.latent_grid, cfg.channels, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    return assemble_tokens(pool_scene, z, cfg)


def test_attached_model_matches_base(small_config, two_subject_scenes):
    base = build_model(small_config, seed=1, dtype=torch.float64)
    adapted = attach_adapters(build_model(small_config, seed=1, dtype=torch.float64), AdapterSpec())
    batch = _fixed_input(base, two_subject_scenes[0])
    vb, rb = base(batch, 0.3, record_attention=True)
    va, ra = adapted(batch, 0.3, record_attention=True)
    assert torch.equal(va, vb) and torch.equal(ra.maps, rb.maps)


def test_only_adapter_parameters_train(small_config):
    model = attach_adapters(build_model(small_config, seed=1), AdapterSpec(rank=4, n_experts=4))
    params = dict(model.named_parameters())
    for name, p in params.items():
        assert p.requires_grad == (name.rsplit(".", 1)[-1] in ("A", "B", "W_g")), name


def test_trainable_count_closed_form():
    cfg = ModelConfig(d_model=32, n_heads=4, k_double=2, k_single=1)
    spec = AdapterSpec(rank=4, n_experts=4)
    model = attach_adapters(build_model(cfg, seed=0), spec)
    d, r, e = 32, 4, 4
    n_ffn = 2 * 2 + 1
    moe = n_ffn * (e * r * 2 * d + e * d)
    qkv = 5 * r * (d + 3 * d)
    proj = 5 * r * (d + d)
    assert sum(p.numel() for p in trainable_parameters(model)) == moe + qkv + proj
    assert expected_trainable_count(model, spec) == moe + qkv + proj


def test_unknown_site_rejected(small_config):
    with pytest.raises(AdapterError):
        attach_adapters(build_model(small_config, seed=0), AdapterSpec(sites=("double_blocks.0.img.fnn",)))


def test_site_restriction(small_config):
    model = attach_adapters(build_model(small_config, seed=0), AdapterSpec(sites=("double_blocks.0.img.ffn",)))
    assert list(adapter_modules(model)) == ["double_blocks.0.img.ffn"]


def test_every_moe_site_routes_to_exactly_k(small_config, two_subject_scenes):
    model = attach_adapters(build_model(small_config, seed=2, dtype=torch.float64), AdapterSpec(top_k=2))
    model(_fixed_input(model, two_subject_scenes[0]), 0.5)
    for m in adapter_modules(model).values():
        if isinstance(m, MoELoRA):
            assert ((m.last_routing > 0).sum(-1) == 2).all()


def test_double_attach_rejected(small_config):
    model = attach_adapters(build_model(small_config, seed=0), AdapterSpec())
    with pytest.raises(AdapterError):
        attach_adapters(model, AdapterSpec())
