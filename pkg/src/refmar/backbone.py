"""Velocity-field backbone and latent codec interfaces, with desk-scale toy versions.

``ToyDiT`` is a two-stream (image / text) diffusion transformer. Noisy target
tokens and the condition-image tokens share the image stream; instruction
tokens live in the text stream; every block runs joint attention over both.
Projection names follow the usual MMDiT convention (``to_q``, ``add_q_proj``,
``img_mod.1`` ...) so that adapter target patterns written for full-scale
editing models also resolve here.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

from .data import WindowedImage, round_half_away
from .errors import ConfigError, ShapeMismatchError


@runtime_checkable
class VelocityBackbone(Protocol):
    def predict_velocity(self, x_t: torch.Tensor, t, condition_latents: Sequence[torch.Tensor],
                         instruction_tokens: torch.Tensor) -> torch.Tensor: ...

    def named_projections(self) -> list[tuple[str, int, int]]: ...


@runtime_checkable
class LatentCodec(Protocol):
    def encode(self, img: WindowedImage | np.ndarray) -> torch.Tensor: ...

    def decode(self, latent: torch.Tensor) -> WindowedImage: ...


# --------------------------------------------------------------------------- codecs

def _pixels(img: WindowedImage | np.ndarray) -> np.ndarray:
    return img.pixels if isinstance(img, WindowedImage) else np.asarray(img)


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def from_unit_range(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


class IdentityCodec:
    """Lossless codec: the latent is the image rescaled to [-1, 1], one channel."""

    channels = 1
    factor = 1

    def encode(self, img):
        return torch.from_numpy(to_unit_range(_pixels(img))[None]).float()

    def decode(self, latent):
        z = latent.detach().double().cpu().numpy()
        return WindowedImage(from_unit_range(z.reshape(z.shape[-2:])))

    def state_dict(self):
        return {"kind": "identity"}


class PatchPCACodec:
    """Lossy linear codec: each ``factor x factor`` pixel patch is projected on its
    top principal components, whitened to unit variance per channel."""

    def __init__(self, channels: int = 1, factor: int = 4):
        if channels < 1 or channels > factor * factor:
            raise ConfigError(f"channels must lie in [1, {factor * factor}]")
        self.channels = channels
        self.factor = factor
        self.mean = np.zeros(factor * factor)
        self.basis = np.eye(factor * factor)[:channels]
        self.scale = np.ones(channels)

    def _patches(self, x: np.ndarray) -> np.ndarray:
        f = self.factor
        h, w = x.shape
        if h % f or w % f:
            raise ShapeMismatchError(f"image {x.shape} not divisible by codec factor {f}")
        return x.reshape(h // f, f, w // f, f).transpose(0, 2, 1, 3).reshape(h // f, w // f, f * f)

    def fit(self, images: Sequence[WindowedImage | np.ndarray]) -> "PatchPCACodec":
        patches = np.concatenate([self._patches(to_unit_range(_pixels(im))).reshape(-1, self.factor**2)
                                  for im in images])
        self.mean = patches.mean(0)
        cov = np.cov(patches - self.mean, rowvar=False)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][: self.channels]
        basis = evecs[:, order].T
        # fix eigenvector signs so refits are reproducible
        basis *= np.sign(basis.sum(1, keepdims=True) + 1e-12)
        self.basis = basis
        self.scale = np.sqrt(np.maximum(evals[order], 1e-12))
        return self

    def encode(self, img):
        p = self._patches(to_unit_range(_pixels(img))) - self.mean
        z = (p @ self.basis.T) / self.scale
        return torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1))).float()

    def decode(self, latent):
        z = latent.detach().double().cpu().numpy()
        z = z.reshape(z.shape[-3:])
        c, h, w = z.shape
        f = self.factor
        p = (z.transpose(1, 2, 0) * self.scale) @ self.basis + self.mean
        x = p.reshape(h, w, f, f).transpose(0, 2, 1, 3).reshape(h * f, w * f)
        return WindowedImage(from_unit_range(x))

    def state_dict(self):
        return {"kind": "patch_pca", "channels": self.channels, "factor": self.factor,
                "mean": self.mean.tolist(), "basis": self.basis.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_state_dict(cls, state) -> "PatchPCACodec":
        codec = cls(state["channels"], state["factor"])
        codec.mean = np.asarray(state["mean"])
        codec.basis = np.asarray(state["basis"])
        codec.scale = np.asarray(state["scale"])
        return codec


def codec_from_state(state) -> LatentCodec:
    if state["kind"] == "identity":
        return IdentityCodec()
    return PatchPCACodec.from_state_dict(state)


def codec_roundtrip(codec: LatentCodec, img: WindowedImage):
    """Encode then decode ``img``; returns the reconstruction and its pixel metrics."""
    from .metrics import psnr, ssim

    out = img.with_pixels(codec.decode(codec.encode(img)).pixels)
    return out, {"psnr_db": psnr(out, img), "ssim": ssim(out, img)}


# --------------------------------------------------------------------------- tokenizer

def tokenize(text: str, vocab_size: int = 512, max_len: int = 48) -> torch.Tensor:
    """Hash lower-cased words into ``1..vocab_size-1``; 0 is padding."""
    words = "".join(ch.lower() if ch.isalnum() else " " for ch in text).split()
    ids = [1 + zlib.crc32(w.encode()) % (vocab_size - 1) for w in words][:max_len]
    if not ids:
        ids = [1]
    return torch.tensor(ids, dtype=torch.long)


def pad_tokens(seqs: Sequence[torch.Tensor]) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.zeros(len(seqs), n, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# --------------------------------------------------------------------------- model

@dataclass
class ToyDiTConfig:
    latent_channels: int = 1
    patch: int = 16
    width: int = 384
    heads: int = 6
    layers: int = 2
    mlp_ratio: int = 4
    vocab_size: int = 512
    max_frames: int = 8
    reference_index_embedding: bool = True
    recompute: bool = False
    zero_init_head: bool = False
    source_concat: bool = True
    input_skip: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def sincos_1d(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).float()


def sincos_2d(gh: int, gw: int, dim: int) -> torch.Tensor:
    rows = torch.arange(gh).repeat_interleave(gw)
    cols = torch.arange(gw).repeat(gh)
    return torch.cat([sincos_1d(rows, dim // 2), sincos_1d(cols, dim // 2)], dim=1)


def patchify(x: torch.Tensor, p: int) -> tuple[torch.Tensor, tuple[int, int]]:
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeMismatchError(f"latent {tuple(x.shape)} not divisible by patch {p}")
    gh, gw = h // p, w // p
    tok = x.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return tok, (gh, gw)


def unpatchify(tok: torch.Tensor, grid: tuple[int, int], c: int, p: int) -> torch.Tensor:
    b = tok.shape[0]
    gh, gw = grid
    return tok.reshape(b, gh, gw, c, p, p).permute(0, 3, 1, 4, 2, 5).reshape(b, c, gh * p, gw * p)


def rope_angles(rows: torch.Tensor, cols: torch.Tensor, head_dim: int) -> torch.Tensor:
    """Rotary angles: the first half of each head rotates with the row, the second with the column."""
    quarter = head_dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ang = torch.cat([rows.double()[:, None] * freqs, cols.double()[:, None] * freqs], dim=1)
    return ang.float()


def apply_rope(x: torch.Tensor, ang: torch.Tensor) -> torch.Tensor:
    # x: (B, H, N, D); ang: (N, D/2)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(ang), torch.sin(ang)
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class JointAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.ModuleList([nn.Linear(dim, dim), nn.Dropout(0.0)])
        self.add_q_proj = nn.Linear(dim, dim)
        self.add_k_proj = nn.Linear(dim, dim)
        self.add_v_proj = nn.Linear(dim, dim)
        self.to_add_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, img, txt, txt_mask, rope=None):
        q = torch.cat([self.add_q_proj(txt), self.to_q(img)], dim=1)
        k = torch.cat([self.add_k_proj(txt), self.to_k(img)], dim=1)
        v = torch.cat([self.add_v_proj(txt), self.to_v(img)], dim=1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if rope is not None:
            q, k = apply_rope(q, rope), apply_rope(k, rope)
        # padding text tokens are never attended to
        keep = torch.cat([txt_mask, torch.ones(img.shape[:2], dtype=torch.bool)], dim=1)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=keep[:, None, None, :])
        out = out.transpose(1, 2).reshape(q.shape[0], -1, img.shape[-1])
        n_txt = txt.shape[1]
        return self.to_out[1](self.to_out[0](out[:, n_txt:])), self.to_add_out(out[:, :n_txt])


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.img_mod = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        self.txt_mod = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        self.img_norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.txt_norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.img_norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.txt_norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = JointAttention(dim, heads)
        self.img_mlp = FeedForward(dim, mlp_ratio * dim)
        self.txt_mlp = FeedForward(dim, mlp_ratio * dim)

    def forward(self, img, txt, temb, txt_mask, rope=None):
        i_sh1, i_sc1, i_g1, i_sh2, i_sc2, i_g2 = self.img_mod(temb)[:, None].chunk(6, dim=-1)
        t_sh1, t_sc1, t_g1, t_sh2, t_sc2, t_g2 = self.txt_mod(temb)[:, None].chunk(6, dim=-1)
        a_img, a_txt = self.attn(
            self.img_norm1(img) * (1 + i_sc1) + i_sh1,
            self.txt_norm1(txt) * (1 + t_sc1) + t_sh1,
            txt_mask,
            rope,
        )
        img = img + i_g1 * a_img
        txt = txt + t_g1 * a_txt
        img = img + i_g2 * self.img_mlp(self.img_norm2(img) * (1 + i_sc2) + i_sh2)
        txt = txt + t_g2 * self.txt_mlp(self.txt_norm2(txt) * (1 + t_sc2) + t_sh2)
        return img, txt


class ToyDiT(nn.Module):
    """Small instruction-conditioned velocity transformer.

    Frame embeddings tell the noisy target (frame 0), the corrupted source
    (frame 1) and references (frames 2..) apart. With
    ``reference_index_embedding=False`` every reference shares frame 2, which
    makes the prediction invariant to reference order.

    Two shortcuts keep the model usable at this size. Each x_t token also
    embeds the co-located source patch (``src_in``), and the output carries an
    elementwise skip ``a * source + b * x_t`` whose gains come from the output
    modulation head plus a per-token correction. Both apply only when the
    first condition latent is aligned with x_t (not for grid composites).
    """

    def __init__(self, config: ToyDiTConfig | None = None):
        super().__init__()
        cfg = config or ToyDiTConfig()
        if cfg.width % cfg.heads or cfg.width % 4:
            raise ConfigError("width must be divisible by heads and by 4")
        self.config = cfg
        g = torch.random.fork_rng()
        with g:
            torch.manual_seed(cfg.seed)
            pdim = cfg.latent_channels * cfg.patch * cfg.patch
            self.img_in = nn.Linear(pdim, cfg.width)
            # the co-located source patch is also fed into each x_t token
            self.src_in = nn.Linear(pdim, cfg.width) if cfg.source_concat else None
            self.txt_in = nn.Embedding(cfg.vocab_size, cfg.width)
            self.frame_embed = nn.Embedding(cfg.max_frames, cfg.width)
            self.time_embed = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.SiLU(),
                                            nn.Linear(cfg.width, cfg.width))
            self.blocks = nn.ModuleList(
                DiTBlock(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
            # output modulation: shift, scale and, with the input skip, the gains of
            # v += a(t) * source + b(t) * x_t; named like the block heads so it is adaptable
            self.img_mod = nn.Sequential(nn.SiLU(), nn.Linear(cfg.width, 2 * cfg.width + 2 * cfg.input_skip))
            # with the input skip, two extra outputs per token adjust a and b locally
            self.proj_out = nn.Linear(cfg.width, pdim + 2 * cfg.input_skip)
            with torch.no_grad():
                self.frame_embed.weight.mul_(0.1)
                self.txt_in.weight.mul_(0.1)
                if cfg.input_skip:
                    self.img_mod[1].weight[-2:].zero_()
                    self.img_mod[1].bias[-2:].zero_()
                    self.proj_out.weight[-2:].zero_()
                    self.proj_out.bias[-2:].zero_()
                if cfg.zero_init_head:
                    self.proj_out.weight.zero_()
                    self.proj_out.bias.zero_()

    def named_projections(self) -> list[tuple[str, int, int]]:
        return [(name, m.out_features, m.in_features)
                for name, m in self.named_modules() if isinstance(m, nn.Linear)]

    def _frame_ids(self, n_conds: int) -> list[int]:
        ids = [0, 1]
        for j in range(n_conds - 1):
            ids.append(2 + j if self.config.reference_index_embedding else 2)
        if max(ids) >= self.config.max_frames:
            raise ConfigError(f"{n_conds} condition images exceed max_frames={self.config.max_frames}")
        return ids

    def _embed_image(self, latent, frame):
        tok, grid = patchify(latent, self.config.patch)
        pos = sincos_2d(*grid, self.config.width)
        return self.img_in(tok) + pos + self.frame_embed.weight[frame], grid

    def _rope(self, n_txt: int, grids: list[tuple[int, int]]) -> torch.Tensor:
        # text tokens sit at the origin, i.e. are not rotated; every image
        # (target, source, references) shares the same row/column coordinates
        rows = [torch.zeros(n_txt)]
        cols = [torch.zeros(n_txt)]
        for gh, gw in grids:
            rows.append(torch.arange(gh).repeat_interleave(gw).float() + 1)
            cols.append(torch.arange(gw).repeat(gh).float() + 1)
        return rope_angles(torch.cat(rows), torch.cat(cols), self.config.width // self.config.heads)

    def predict_velocity(self, x_t, t, condition_latents, instruction_tokens):
        cfg = self.config
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t = x_t[None]
            condition_latents = [c[None] if c.dim() == 3 else c for c in condition_latents]
            if instruction_tokens.dim() == 1:
                instruction_tokens = instruction_tokens[None]
        if len(condition_latents) == 0:
            raise ConfigError("at least one condition latent (the corrupted source) is required")
        if x_t.shape[1] != cfg.latent_channels:
            raise ShapeMismatchError(f"x_t has {x_t.shape[1]} channels, model expects {cfg.latent_channels}")
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.float32).reshape(-1).expand(b)
        if ((t < 0) | (t > 1)).any():
            raise ConfigError("t must lie in [0, 1]")
        frames = self._frame_ids(len(condition_latents))
        h0, grid = self._embed_image(x_t, frames[0])
        # a grid composite is not pixel-aligned with x_t, so it only enters through attention
        if self.src_in is not None and condition_latents[0].shape == x_t.shape:
            h0 = h0 + self.src_in(patchify(condition_latents[0], cfg.patch)[0])
        parts, grids = [h0], [grid]
        for c, f in zip(condition_latents, frames[1:]):
            if c.shape[0] != b or c.shape[1] != cfg.latent_channels:
                raise ShapeMismatchError(f"condition latent {tuple(c.shape)} incompatible with x_t {tuple(x_t.shape)}")
            h, g = self._embed_image(c, f)
            parts.append(h)
            grids.append(g)
        img = torch.cat(parts, dim=1)
        txt_mask = instruction_tokens != 0
        txt = self.txt_in(instruction_tokens) + sincos_1d(
            torch.arange(instruction_tokens.shape[1]), cfg.width)[None]
        temb = self.time_embed(sincos_1d(t * 1000.0, cfg.width).to(self.img_in.weight.dtype))
        rope = self._rope(instruction_tokens.shape[1], grids)
        for block in self.blocks:
            if cfg.recompute and torch.is_grad_enabled():
                img, txt = checkpoint(block, img, txt, temb, txt_mask, rope, use_reentrant=False)
            else:
                img, txt = block(img, txt, temb, txt_mask, rope)
        n0 = h0.shape[1]
        mod = self.img_mod(temb)
        shift, scale = mod[:, None, : 2 * cfg.width].chunk(2, dim=-1)
        out = F.layer_norm(img[:, :n0], (cfg.width,), eps=1e-6) * (1 + scale) + shift
        head = self.proj_out(out)
        pdim = cfg.latent_channels * cfg.patch * cfg.patch
        v = unpatchify(head[..., :pdim], grid, cfg.latent_channels, cfg.patch)
        if cfg.input_skip:
            gains = head[..., pdim:] + mod[:, None, -2:]
            gains = gains[..., None].expand(*gains.shape, pdim)
            a, b_ = (unpatchify(gains[..., i, :], grid, 1, cfg.patch) for i in range(2))
            v = v + b_ * x_t
            if condition_latents[0].shape == x_t.shape:
                v = v + a * condition_latents[0]
        return v[0] if squeeze else v

    forward = predict_velocity
