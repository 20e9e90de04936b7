"""Low-rank adaptation of frozen linear projections.

A wrapped projection computes ``W0 x + (alpha / r) B A x`` where ``W0`` stays
frozen, ``A`` starts Gaussian and ``B`` starts at zero, so an injected model
reproduces its base outputs exactly until the first optimizer step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import InjectionError, ShapeMismatchError

DEFAULT_TARGETS = (
    "to_q", "to_k", "to_v", "to_out.0",
    "add_q_proj", "add_k_proj", "add_v_proj", "to_add_out",
    "img_mlp.net.2", "img_mod.1", "txt_mlp.net.2", "txt_mod.1",
)


@dataclass
class LoRATargetSpec:
    module_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_TARGETS))

    def matches(self, name: str) -> bool:
        return any(name == p or name.endswith("." + p) for p in self.module_patterns)


class LoRAAdapter(nn.Module):
    """Trainable rank-``r`` residual around a frozen ``nn.Linear``."""

    def __init__(self, base: nn.Linear, r: int, alpha: float | None = None,
                 target_name: str = "", init_std: float | None = None,
                 generator: torch.Generator | None = None, dropout: float = 0.0):
        super().__init__()
        d, k = base.out_features, base.in_features
        if not 1 <= r <= min(d, k):
            raise ShapeMismatchError(f"{target_name}: rank {r} outside [1, min({d}, {k})]")
        self.base = base
        self.r = r
        self.alpha = float(r if alpha is None else alpha)
        self.target_name = target_name
        std = r ** -0.5 if init_std is None else init_std
        self.A = nn.Parameter(torch.randn(r, k, generator=generator) * std)
        self.B = nn.Parameter(torch.zeros(d, r))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + self.scaling * ((self.dropout(x) @ self.A.T) @ self.B.T)


def lora_forward(adapter: LoRAAdapter, base_out: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``base_out + (alpha / r) * B (A x)`` for a single vector or a batch of row vectors."""
    d, r = adapter.B.shape
    k = adapter.A.shape[1]
    if x.shape[-1] != k or base_out.shape[-1] != d:
        raise ShapeMismatchError(
            f"lora_forward: x[..., {x.shape[-1]}] / base_out[..., {base_out.shape[-1]}] "
            f"incompatible with A {tuple(adapter.A.shape)}, B {tuple(adapter.B.shape)}")
    return base_out + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def merge_adapter(adapter: LoRAAdapter, W0: torch.Tensor) -> torch.Tensor:
    """Fold the low-rank update into a dense ``d x k`` weight."""
    expected = (adapter.B.shape[0], adapter.A.shape[1])
    if tuple(W0.shape) != expected:
        raise ShapeMismatchError(f"merge_adapter: W0 {tuple(W0.shape)} != {expected}")
    with torch.no_grad():
        if adapter.alpha == 0 or not adapter.B.any():
            return W0.clone()
        return W0 + adapter.scaling * (adapter.B @ adapter.A)


class AdaptedBackbone(nn.Module):
    """Handle over a backbone whose matching projections were wrapped in place."""

    def __init__(self, model: nn.Module, adapters: dict[str, LoRAAdapter]):
        super().__init__()
        self.model = model
        self.adapters = adapters

    def predict_velocity(self, *args, **kwargs):
        return self.model.predict_velocity(*args, **kwargs)

    forward = predict_velocity

    def named_projections(self):
        return self.model.named_projections()

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        for name in sorted(self.adapters):
            yield self.adapters[name].A
            yield self.adapters[name].B

    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def base_parameters(self) -> dict[str, torch.Tensor]:
        own = {id(p) for p in self.trainable_parameters()}
        return {n: p for n, p in self.model.named_parameters() if id(p) not in own}

    def num_base(self) -> int:
        return sum(p.numel() for p in self.base_parameters().values())


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    if isinstance(parent, (nn.Sequential, nn.ModuleList)) and child.isdigit():
        parent[int(child)] = module
    else:
        setattr(parent, child, module)


def inject_adapters(
    backbone: nn.Module,
    spec: LoRATargetSpec | None = None,
    r: int = 64,
    alpha: float | None = None,
    seed: int = 0,
    init_std: float | None = None,
    dropout: float = 0.0,
) -> AdaptedBackbone:
    """Wrap every ``nn.Linear`` whose dotted name ends with a target pattern.

    All backbone parameters are frozen; only the adapters' ``A``/``B`` train.
    ``alpha`` defaults to ``r``.
    """
    spec = spec or LoRATargetSpec()
    if not spec.module_patterns:
        raise InjectionError("empty target-module pattern list")
    targets = [(n, m) for n, m in backbone.named_modules()
               if isinstance(m, nn.Linear) and spec.matches(n)]
    if not targets:
        raise InjectionError(f"patterns {spec.module_patterns} matched no linear projection")
    for p in backbone.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    adapters = {}
    for name, lin in targets:
        ad = LoRAAdapter(lin, r, alpha, name, init_std, gen, dropout)
        _set_submodule(backbone, name, ad)
        adapters[name] = ad
    return AdaptedBackbone(backbone, adapters)


def trainable_count(named_projections: Sequence[tuple[str, int, int]], spec: LoRATargetSpec, r: int) -> int:
    """Analytic count: sum of ``r (d + k)`` over matching projections."""
    return sum(r * (d + k) for name, d, k in named_projections if spec.matches(name))


# --------------------------------------------------------------------------- checkpoints

def save_adapters(adapted: AdaptedBackbone, path: str | Path, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding every A/B pair plus a JSON ``__meta__`` record."""
    arrays = {}
    meta = {"format": "refmar-lora", "version": 1, "targets": {}, **(extra or {})}
    for name, ad in sorted(adapted.adapters.items()):
        arrays[f"{name}::A"] = ad.A.detach().cpu().numpy()
        arrays[f"{name}::B"] = ad.B.detach().cpu().numpy()
        meta["targets"][name] = {"r": ad.r, "alpha": ad.alpha,
                                 "d": ad.out_features, "k": ad.in_features}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_adapter_meta(path: str | Path) -> dict:
    with np.load(path) as z:
        return json.loads(z["__meta__"].tobytes().decode())


def load_adapters(backbone: nn.Module, path: str | Path, seed: int = 0) -> AdaptedBackbone:
    """Inject adapters described by a checkpoint and copy in its factors.

    Any shape disagreement with the backbone is an error.
    """
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    targets = meta["targets"]
    shapes = {n: (d, k) for n, d, k in backbone.named_projections()}
    for name, t in targets.items():
        if shapes.get(name) != (t["d"], t["k"]):
            raise ShapeMismatchError(
                f"checkpoint target {name!r} is {t['d']}x{t['k']}, backbone has {shapes.get(name)}")
    ranks = {t["r"] for t in targets.values()}
    alphas = {t["alpha"] for t in targets.values()}
    if len(ranks) != 1 or len(alphas) != 1:
        raise ShapeMismatchError("mixed ranks/alphas in one checkpoint are not supported")
    adapted = inject_adapters(backbone, LoRATargetSpec(sorted(targets)), ranks.pop(), alphas.pop(), seed)
    extra = set(adapted.adapters) - set(targets)
    if extra:
        raise ShapeMismatchError(f"checkpoint lacks adapters for {sorted(extra)}")
    with torch.no_grad():
        for name, ad in adapted.adapters.items():
            A, B = arrays[f"{name}::A"], arrays[f"{name}::B"]
            if A.shape != tuple(ad.A.shape) or B.shape != tuple(ad.B.shape):
                raise ShapeMismatchError(f"{name}: factor shapes {A.shape}/{B.shape} do not fit")
            ad.A.copy_(torch.from_numpy(A))
            ad.B.copy_(torch.from_numpy(B))
    return adapted
