"""Desk-scale stand-in for a pretrained instruction-conditioned editing model.

The toy backbone is pretrained (all weights, briefly) on a generic editing
task, "keep the image as it is", over a phantom corpus disjoint from every
experiment dataset. Inputs carry mild white noise so the base learns to lean
on its own prior a little instead of copying blindly. The codec is fitted on
the same corpus. The result is frozen and cached on disk keyed by its
configuration; bump ``FOUNDATION_VERSION`` whenever the architecture or the
pretraining recipe changes, since the key cannot see code edits.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import PatchPCACodec, ToyDiT, ToyDiTConfig, codec_from_state, tokenize
from .conditioning import build_condition
from .data import ReferenceSet, phantom_dataset
from .flowmatch import FlowMatchBatch, config_hash, flow_match_loss, seeded_generator

log = logging.getLogger(__name__)

FOUNDATION_VERSION = 4
PRETRAIN_PROMPTS = {
    "none": "Keep this CT slice exactly as it is",
    "multi": "Keep the first CT slice exactly as it is; the other slices are only context",
    "grid": "Keep the top left cell of this grid as it is, at full size",
}
CORPUS_SEED = 9_000


@dataclass
class FoundationConfig:
    model: ToyDiTConfig = field(default_factory=ToyDiTConfig)
    codec_channels: int = 1
    codec_factor: int = 4
    corpus_subjects: int = 8
    pretrain_steps: int = 600
    pretrain_lr: float = 1e-3
    input_noise: float = 12.0
    modes: tuple[str, ...] = ("none", "multi", "grid")
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ToyDiTConfig(**self.model)
        self.modes = tuple(self.modes)

    def to_dict(self):
        d = asdict(self)
        d["version"] = FOUNDATION_VERSION
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def default_cache_dir() -> Path:
    return Path(os.environ.get("REFMAR_CACHE", Path.home() / ".cache" / "refmar"))


def _corpus(cfg: FoundationConfig):
    pairs = phantom_dataset(cfg.corpus_subjects, 1, seed=CORPUS_SEED, severity=1.0)
    rng = np.random.default_rng(cfg.seed)
    images = []
    for p in pairs:
        sev = rng.uniform(0.2, 1.0)
        # re-scale the corruption so the corpus spans severities
        src = np.clip(np.rint(p.target.pixels + sev * (p.source.pixels.astype(float) - p.target.pixels)), 0, 255)
        images.append(p.target)
        images.append(p.source.with_pixels(src.astype(np.uint8)))
    return pairs, images


def pretrain(cfg: FoundationConfig) -> tuple[ToyDiT, PatchPCACodec]:
    pairs, images = _corpus(cfg)
    codec = PatchPCACodec(cfg.codec_channels, cfg.codec_factor).fit(images)
    model = ToyDiT(cfg.model)
    donors = [p.target for p in pairs]
    rng = np.random.default_rng([cfg.seed, 1])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.pretrain_lr, weight_decay=0.0)
    model.train()
    for step in range(cfg.pretrain_steps):
        img = images[int(rng.integers(len(images)))]
        mode = cfg.modes[step % len(cfg.modes)]
        refs = None
        if mode != "none":
            pool = [d for d in donors if d.category == img.category and d.subject_id != img.subject_id]
            if len(pool) < 5:  # tiny corpora: borrow from other categories, then repeat
                pool = [d for d in donors if d.subject_id != img.subject_id] or donors
            pick = rng.choice(len(pool), 5, replace=len(pool) < 5)
            refs = ReferenceSet([pool[i] for i in pick], [pool[i].subject_id for i in pick])
        # mild white noise on the input keeps the base from trusting it blindly
        sigma = rng.uniform(0.0, cfg.input_noise)
        noisy = np.clip(np.rint(img.pixels + rng.normal(0.0, sigma, img.shape)), 0, 255).astype(np.uint8)
        conds, _ = build_condition(mode, img.with_pixels(noisy), refs, codec)
        x1 = codec.encode(img)[None]
        x0 = torch.randn(x1.shape, generator=seeded_generator(cfg.seed, "pretrain", step))
        t = torch.tensor([float(rng.uniform())])
        batch = FlowMatchBatch.build(x0, x1, t, [c[None] for c in conds], tokenize(PRETRAIN_PROMPTS[mode])[None])
        opt.zero_grad(set_to_none=True)
        loss = flow_match_loss(batch, model, step)
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("pretrain step %d mode %s loss %.4f", step, mode, float(loss.detach()))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, codec


def load_foundation(cfg: FoundationConfig | None = None, cache_dir: str | Path | None = None,
                    use_cache: bool = True) -> tuple[ToyDiT, PatchPCACodec]:
    """Return a fresh (model, codec) pair, pretraining once per configuration."""
    cfg = cfg or FoundationConfig()
    cache = Path(cache_dir) if cache_dir else default_cache_dir()
    path = cache / f"foundation-{cfg.hash()}.pt"
    if use_cache and path.exists():
        blob = torch.load(path, weights_only=False)
        model = ToyDiT(ToyDiTConfig(**blob["model_config"]))
        model.load_state_dict(blob["state_dict"])
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model, codec_from_state(blob["codec"])
    model, codec = pretrain(cfg)
    if use_cache:
        cache.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save({"model_config": cfg.model.to_dict(), "state_dict": model.state_dict(),
                    "codec": codec.state_dict(), "foundation": json.dumps(cfg.to_dict(), sort_keys=True)}, tmp)
        tmp.replace(path)
    return model, codec
