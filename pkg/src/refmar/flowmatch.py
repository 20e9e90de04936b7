"""Flow-matching fine-tuning of low-rank adapters on a frozen velocity backbone."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import tokenize
from .conditioning import MODES, build_condition, load_prompts
from .data import DatasetManifest, ReferenceSet, TrainingPair
from .errors import ConfigError, TrainingAbort
from .lora import DEFAULT_TARGETS, AdaptedBackbone, LoRATargetSpec, inject_adapters, save_adapters

log = logging.getLogger(__name__)


def seeded_generator(*keys: int | str) -> torch.Generator:
    """Torch generator whose state depends only on ``keys``."""
    ints = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF for k in keys]
    state = np.random.SeedSequence(ints).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 31 | int(state[1]) >> 1)


def config_hash(payload: Mapping) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance() -> str:
    """Package version plus a digest of the installed sources."""
    from . import __version__

    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return f"refmar-{__version__}+{h.hexdigest()[:10]}"


# --------------------------------------------------------------------------- time sampling

class UniformTimeSampler:
    name = "uniform"

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(0.0, 1.0, count)


@dataclass
class LogitNormalTimeSampler:
    mean: float = 0.0
    std: float = 1.0
    name = "logit_normal"

    def sample(self, count, rng):
        return 1.0 / (1.0 + np.exp(-rng.normal(self.mean, self.std, count)))


@dataclass
class FixedTimeSampler:
    value: float = 0.5
    name = "fixed"

    def sample(self, count, rng):
        return np.full(count, float(self.value))


def make_time_sampler(name: str):
    if name == "uniform":
        return UniformTimeSampler()
    if name == "logit_normal":
        return LogitNormalTimeSampler()
    if name.startswith("fixed"):
        _, _, v = name.partition(":")
        return FixedTimeSampler(float(v) if v else 0.5)
    raise ConfigError(f"unknown time sampler {name!r}")


def sample_time(sampler, count: int, seed: int) -> np.ndarray:
    return np.clip(sampler.sample(count, np.random.default_rng(seed)), 0.0, 1.0)


# --------------------------------------------------------------------------- loss

@dataclass
class FlowMatchBatch:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    cond_latents: list[torch.Tensor]
    instruction_tokens: torch.Tensor

    @classmethod
    def build(cls, x0, x1, t, cond_latents, instruction_tokens) -> "FlowMatchBatch":
        t = torch.as_tensor(t, dtype=x1.dtype).reshape(-1)
        tb = t.reshape(-1, *([1] * (x1.dim() - 1)))
        x_t = (1 - tb) * x0 + tb * x1
        return cls(x0, x1, t, x_t, list(cond_latents), instruction_tokens)

    @property
    def target_velocity(self) -> torch.Tensor:
        return self.x1 - self.x0


def flow_match_loss(batch: FlowMatchBatch, model, step: int | None = None) -> torch.Tensor:
    """Mean squared error between predicted and straight-line velocity."""
    pred = model.predict_velocity(batch.x_t, batch.t, batch.cond_latents, batch.instruction_tokens)
    loss = torch.mean((pred - batch.target_velocity) ** 2)
    if not torch.isfinite(loss):
        raise TrainingAbort("non-finite flow-matching loss", step)
    return loss


# --------------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    total_steps: int = 750
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    scheduler: str = "none"
    r: int = 64
    alpha: float | None = None
    N: int = 128
    conditioning_mode: str = "none"
    seed: int = 0
    batch_size: int = 1
    K: int = 5
    time_sampler: str = "uniform"
    lora_dropout: float = 0.0
    lora_init_std: float | None = None
    target_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_TARGETS))

    def __post_init__(self):
        if self.conditioning_mode not in MODES:
            raise ConfigError(f"conditioning_mode must be one of {MODES}")
        if self.scheduler != "none":
            raise ConfigError("only a constant learning rate (scheduler='none') is supported")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class TrainLog:
    config_hash: str
    seed: int
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def append(self, record: dict, path: Path | None = None) -> None:
        self.records.append(record)
        if path is not None:
            with open(path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def epochs_touched(self) -> int:
        return len({r["epoch"] for r in self.records})


@dataclass
class AdapterCheckpoint:
    model: AdaptedBackbone
    config: TrainConfig
    provenance: str

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def save(self, path: str | Path) -> None:
        save_adapters(self.model, path, {"config_hash": self.config_hash, "provenance": self.provenance,
                                         "train_config": self.config.to_dict()})


def step_schedule(train_ids: Sequence[str], repeats: int, seed: int) -> list[tuple[int, str]]:
    """Concatenate ``repeats`` seeded permutations of the training ids."""
    ids = sorted(train_ids)
    out = []
    for epoch in range(repeats):
        perm = np.random.default_rng([seed, 11, epoch]).permutation(len(ids))
        out.extend((epoch, ids[i]) for i in perm)
    return out


@dataclass
class EncodedExample:
    x1: torch.Tensor
    conds: list[torch.Tensor]
    tokens: torch.Tensor


def encode_examples(pair_ids, pairs, references, mode, codec, K=5, prompts=None) -> dict[str, EncodedExample]:
    prompts = prompts or load_prompts()
    out = {}
    for pid in pair_ids:
        pair = pairs[pid]
        refs = references.get(pid) if references else None
        conds, prompt = build_condition(mode, pair.source, refs, codec, K, prompts)
        out[pid] = EncodedExample(codec.encode(pair.target), conds, tokenize(prompt.text))
    return out


def collate(examples: Sequence[EncodedExample]):
    x1 = torch.stack([e.x1 for e in examples])
    conds = [torch.stack([e.conds[j] for e in examples]) for j in range(len(examples[0].conds))]
    n = max(len(e.tokens) for e in examples)
    tokens = torch.zeros(len(examples), n, dtype=torch.long)
    for i, e in enumerate(examples):
        tokens[i, : len(e.tokens)] = e.tokens
    return x1, conds, tokens


@torch.no_grad()
def fixed_draw_loss(model, examples: Mapping[str, EncodedExample],
                    t_grid: Sequence[float] = tuple(np.linspace(0.05, 0.95, 10)), seed: int = 0) -> float:
    """Training-set loss on a fixed grid of times and fixed noise draws.

    Unlike the per-step log, two evaluations of different weights see the same
    (x0, t) pairs, so their ratio measures learning rather than sampling luck.
    """
    total, count = 0.0, 0
    for pid in sorted(examples):
        e = examples[pid]
        x0 = torch.randn(e.x1.shape, generator=seeded_generator(seed, "eval", pid))[None]
        for t in t_grid:
            batch = FlowMatchBatch.build(x0, e.x1[None], torch.tensor([float(t)]),
                                         [c[None] for c in e.conds], e.tokens[None])
            total += float(flow_match_loss(batch, model))
            count += 1
    return total / count


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    backbone,
    codec,
    pairs: Mapping[str, TrainingPair],
    references: Mapping[str, ReferenceSet] | None = None,
    log_path: str | Path | None = None,
) -> tuple[AdapterCheckpoint, TrainLog]:
    """Run the fixed optimizer-step budget over the repeated training split.

    Only adapter factors receive gradients; every base weight is left bitwise
    untouched. ``backbone`` may be a bare model (adapters get injected) or an
    ``AdaptedBackbone``.
    """
    if config.conditioning_mode != "none" and not references:
        raise ConfigError(f"mode {config.conditioning_mode!r} needs reference sets")
    if isinstance(backbone, AdaptedBackbone):
        model = backbone
    else:
        model = inject_adapters(backbone, LoRATargetSpec(list(config.target_patterns)), config.r,
                                config.alpha, config.seed, config.lora_init_std, config.lora_dropout)
    train_ids = manifest.train_ids
    examples = encode_examples(train_ids, pairs, references, config.conditioning_mode, codec, config.K)
    repeats = math.ceil(config.total_steps * config.batch_size / len(train_ids))
    schedule = step_schedule(train_ids, repeats, config.seed)
    sampler = make_time_sampler(config.time_sampler)
    params = list(model.trainable_parameters())
    opt = torch.optim.AdamW(params, lr=config.learning_rate, betas=config.betas,
                            weight_decay=config.weight_decay)
    chash = config.hash()
    tlog = TrainLog(chash, config.seed)
    path = Path(log_path) if log_path else None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"kind": "header", "config_hash": chash, "seed": config.seed,
                                    "config": config.to_dict()}, sort_keys=True) + "\n")
    model.train()
    t_start = time.perf_counter()
    for step in range(config.total_steps):
        lo, hi = step * config.batch_size, (step + 1) * config.batch_size
        if hi > len(schedule):
            raise TrainingAbort("training schedule exhausted before the step budget", step)
        items = schedule[lo:hi]
        x1, conds, tokens = collate([examples[pid] for _, pid in items])
        x0 = torch.stack([torch.randn(x1.shape[1:], generator=seeded_generator(config.seed, step, pid))
                          for _, pid in items])
        t = torch.from_numpy(sample_time(sampler, len(items), [config.seed, 5, step])).float()
        batch = FlowMatchBatch.build(x0, x1, t, conds, tokens)
        opt.zero_grad(set_to_none=True)
        loss = flow_match_loss(batch, model, step)
        loss.backward()
        opt.step()
        tlog.append({"step": step + 1, "epoch": items[-1][0], "pair_ids": [p for _, p in items],
                     "loss": float(loss.detach()), "lr": config.learning_rate,
                     "t": [float(v) for v in t], "wall_s": round(time.perf_counter() - t_start, 4),
                     "timestamp": time.time()}, path)
        if step % 100 == 0:
            log.info("step %d loss %.5f", step + 1, tlog.records[-1]["loss"])
    model.eval()
    return AdapterCheckpoint(model, config, provenance()), tlog
