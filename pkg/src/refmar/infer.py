"""Restoration by integrating the learned velocity field, single-seed and ensembled."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .backbone import tokenize
from .conditioning import MODES, build_condition, load_prompts, stack_latents
from .data import ReferenceSet, WindowedImage, round_half_away
from .errors import ConfigError, ShapeMismatchError
from .flowmatch import seeded_generator


@dataclass
class SamplerConfig:
    step_count: int = 28
    seed: int = 0
    conditioning_mode: str = "none"
    K: int = 5
    guidance: None = None

    def __post_init__(self):
        if self.step_count < 1:
            raise ConfigError("step_count must be >= 1")
        if self.conditioning_mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.conditioning_mode!r}")
        if self.guidance is not None:
            raise ConfigError("guidance is not supported")


@dataclass
class EnsembleResult:
    members: list[WindowedImage]
    mean_image: WindowedImage
    seeds: list[int] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.members)

    def pixel_variance(self) -> np.ndarray:
        return np.stack([m.pixels.astype(np.float64) for m in self.members]).var(axis=0)


def initial_noise(shape: Sequence[int], seed: int) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=seeded_generator(seed, "x0"))


@torch.no_grad()
def integrate(velocity_fn, x0: torch.Tensor, step_count: int) -> torch.Tensor:
    """Forward Euler from t=0 to t=1 on a uniform grid."""
    x = x0.clone()
    dt = 1.0 / step_count
    for i in range(step_count):
        x = x + dt * velocity_fn(x, i * dt)
    return x


@torch.no_grad()
def sample_latent(model, conds: Sequence[torch.Tensor], tokens: torch.Tensor,
                  latent_shape: Sequence[int], cfg: SamplerConfig) -> torch.Tensor:
    conds = stack_latents(list(conds))
    tokens = tokens[None] if tokens.dim() == 1 else tokens
    x0 = initial_noise(latent_shape, cfg.seed)[None]
    out = integrate(lambda x, t: model.predict_velocity(x, torch.tensor([t]), conds, tokens), x0, cfg.step_count)
    return out[0]


def restore(src: WindowedImage, refs: ReferenceSet | None, model, codec, cfg: SamplerConfig,
            prompts: dict | None = None) -> WindowedImage:
    """Restore one slice; deterministic in ``(inputs, cfg.seed)``."""
    if cfg.conditioning_mode != "none" and refs is None:
        raise ConfigError(f"mode {cfg.conditioning_mode!r} needs a reference set")
    conds, prompt = build_condition(cfg.conditioning_mode, src, refs, codec, cfg.K, prompts or load_prompts())
    shape = codec.encode(src).shape
    z = sample_latent(model, conds, tokenize(prompt.text), shape, cfg)
    out = codec.decode(z)
    if out.shape != src.shape:
        raise ShapeMismatchError(f"decoded {out.shape} differs from input {src.shape}")
    return src.with_pixels(out.pixels)


def ensemble_mean(members: Sequence[WindowedImage]) -> WindowedImage:
    """Pixel-space mean accumulated in float64 and rounded to 8 bits once."""
    if not members:
        raise ConfigError("ensemble needs at least one member")
    acc = np.zeros(members[0].shape, dtype=np.float64)
    for m in members:
        if m.shape != acc.shape:
            raise ShapeMismatchError("ensemble members differ in shape")
        acc += m.pixels
    mean = np.clip(round_half_away(acc / len(members)), 0, 255).astype(np.uint8)
    return members[0].with_pixels(mean)


def ensemble_restore(src: WindowedImage, refs: ReferenceSet | None, model, codec,
                     M: int = 10, base_seed: int = 0, cfg: SamplerConfig | None = None,
                     prompts: dict | None = None) -> EnsembleResult:
    """Restore with seeds ``base_seed .. base_seed + M - 1`` and average in pixel space."""
    if M < 1:
        raise ConfigError("M must be >= 1")
    cfg = cfg or SamplerConfig()
    seeds = [base_seed + i for i in range(M)]
    members = []
    for s in seeds:
        member_cfg = SamplerConfig(cfg.step_count, s, cfg.conditioning_mode, cfg.K)
        members.append(restore(src, refs, model, codec, member_cfg, prompts))
    return EnsembleResult(members, ensemble_mean(members), seeds)
