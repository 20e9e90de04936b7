import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from refmar.backbone import ToyDiT, ToyDiTConfig
from refmar.errors import InjectionError, ShapeMismatchError
from refmar.lora import (
    DEFAULT_TARGETS, LoRAAdapter, LoRATargetSpec, inject_adapters, load_adapters, lora_forward,
    merge_adapter, read_adapter_meta, save_adapters, trainable_count,
)

MICRO = ToyDiTConfig(width=64, heads=2, layers=1)


def _randomize_B(adapted, seed=0, scale=0.05):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for ad in adapted.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape, generator=gen) * scale)


def test_init_B_zero_A_gaussian():
    lin = nn.Linear(300, 200)
    ad = LoRAAdapter(lin, r=32, generator=torch.Generator().manual_seed(0))
    assert not ad.B.any()
    assert ad.alpha == 32 and ad.scaling == 1.0
    assert abs(ad.A.std().item() - 32 ** -0.5) < 0.01
    assert not lin.weight.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(1, 12), st.floats(0.5, 8.0), st.integers(0, 2**16))
def test_lora_forward_matches_numpy_oracle(r, d, k, alpha, seed):
    r = min(r, d, k)
    rng = np.random.default_rng(seed)
    W0, A, B, x = (rng.normal(size=s) for s in [(d, k), (r, k), (d, r), (3, k)])
    lin = nn.Linear(k, d, bias=False).double()
    ad = LoRAAdapter(lin, r, alpha).double()
    with torch.no_grad():
        lin.weight.copy_(torch.from_numpy(W0))
        ad.A.copy_(torch.from_numpy(A))
        ad.B.copy_(torch.from_numpy(B))
    expected = x @ W0.T + (alpha / r) * (x @ A.T @ B.T)
    xt = torch.from_numpy(x)
    np.testing.assert_allclose(ad(xt).detach().numpy(), expected, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(lora_forward(ad, xt @ lin.weight.T, xt).detach().numpy(), expected,
                               rtol=1e-10, atol=1e-10)
    merged = merge_adapter(ad, lin.weight.detach())
    np.testing.assert_allclose((xt @ merged.T).numpy(), expected, rtol=1e-10, atol=1e-10)


def test_merge_is_identity_when_B_zero_or_alpha_zero():
    lin = nn.Linear(8, 6)
    ad = LoRAAdapter(lin, 2)
    assert torch.equal(merge_adapter(ad, lin.weight.detach()), lin.weight)
    ad0 = LoRAAdapter(lin, 2, alpha=0.0)
    with torch.no_grad():
        ad0.B.fill_(1.0)
    assert torch.equal(merge_adapter(ad0, lin.weight.detach()), lin.weight)


def test_shape_errors():
    lin = nn.Linear(8, 6)
    with pytest.raises(ShapeMismatchError):
        LoRAAdapter(lin, 7)
    with pytest.raises(ShapeMismatchError):
        LoRAAdapter(lin, 0)
    ad = LoRAAdapter(lin, 2)
    with pytest.raises(ShapeMismatchError):
        lora_forward(ad, torch.zeros(6), torch.zeros(9))
    with pytest.raises(ShapeMismatchError):
        merge_adapter(ad, torch.zeros(8, 6))


class _Named(nn.Module):
    def __init__(self):
        super().__init__()
        self.to_q = nn.Linear(4, 4)
        self.xto_q = nn.Linear(4, 4)
        self.img_mod = nn.Sequential(nn.SiLU(), nn.Linear(4, 8))


def test_patterns_match_exact_suffix_only():
    spec = LoRATargetSpec(["to_q", "img_mod.1"])
    adapted = inject_adapters(_Named(), spec, r=2)
    assert sorted(adapted.adapters) == ["img_mod.1", "to_q"]
    assert isinstance(adapted.model.xto_q, nn.Linear)


def test_injection_errors():
    with pytest.raises(InjectionError):
        inject_adapters(_Named(), LoRATargetSpec([]), r=2)
    with pytest.raises(InjectionError):
        inject_adapters(_Named(), LoRATargetSpec(["nothing"]), r=2)


def test_twelve_default_patterns_all_hit_the_toy_backbone():
    adapted = inject_adapters(ToyDiT(MICRO), r=4)
    hit = {p for p in DEFAULT_TARGETS for n in adapted.adapters if n == p or n.endswith("." + p)}
    assert hit == set(DEFAULT_TARGETS)
    assert all(not p.requires_grad for p in adapted.base_parameters().values())
    assert all(p.requires_grad for p in adapted.trainable_parameters())


def test_trainable_count_oracle_default_model():
    # independent hand count for width w, L blocks: per block two 6w x w modulations,
    # eight w x w attention maps, two w x 4w MLP outputs; plus the (2w + 2) x w output modulation
    w, L, r = 384, 2, 16
    per_block = 2 * (6 * w + w) + 8 * (w + w) + 2 * (w + 4 * w)
    expected = r * (L * per_block + (2 * w + 2) + w)
    assert expected == 509984
    model = ToyDiT()
    assert trainable_count(model.named_projections(), LoRATargetSpec(), r) == expected
    adapted = inject_adapters(model, r=r)
    assert adapted.num_trainable() == expected
    ratio = expected / (adapted.num_base() + expected)
    assert 0.03 < ratio < 0.06


def test_save_load_roundtrip(tmp_path):
    torch.manual_seed(0)
    x = torch.randn(1, 1, 32, 32)
    conds = [torch.randn(1, 1, 32, 32)]
    tok = torch.tensor([[3, 4, 5]])
    adapted = inject_adapters(ToyDiT(MICRO), r=4, seed=3)
    _randomize_B(adapted)
    ref = adapted.predict_velocity(x, 0.3, conds, tok)
    save_adapters(adapted, tmp_path / "a.npz", {"note": "x"})
    meta = read_adapter_meta(tmp_path / "a.npz")
    assert meta["note"] == "x" and len(meta["targets"]) == len(adapted.adapters)
    loaded = load_adapters(ToyDiT(MICRO), tmp_path / "a.npz")
    assert torch.equal(loaded.predict_velocity(x, 0.3, conds, tok), ref)


def test_load_rejects_mismatched_backbone(tmp_path):
    adapted = inject_adapters(ToyDiT(MICRO), r=4)
    save_adapters(adapted, tmp_path / "a.npz")
    with pytest.raises(ShapeMismatchError):
        load_adapters(ToyDiT(ToyDiTConfig(width=32, heads=2, layers=1)), tmp_path / "a.npz")
