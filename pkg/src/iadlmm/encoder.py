"""Expert-guided vision encoder.

image -> frozen patch backbone -> low-rank residual adapter (LoRRA)
      -> query resampler over [frozen base queries ; expert queries from the VPG]
      -> linear projection into the language model's embedding width.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .prompts import PromptGenerator


class Attention(nn.Module):
    """Multi-head attention; keys/values come from ``context`` when given."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, context=None, causal=False, key_padding=None, return_weights=False):
        context = x if context is None else context
        B, T, D = x.shape
        S = context.shape[1]
        h, hd = self.heads, D // self.heads
        q = self.q(x).view(B, T, h, hd).transpose(1, 2)
        k = self.k(context).view(B, S, h, hd).transpose(1, 2)
        v = self.v(context).view(B, S, h, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if causal:
            mask = torch.ones(T, S, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(mask, float("-inf"))
        if key_padding is not None:
            logits = logits.masked_fill(key_padding[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, T, D)
        out = self.o(out)
        return (out, weights) if return_weights else out


def mlp(dim: int, ratio: int = 4) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = mlp(dim)

    def forward(self, x, causal=False, key_padding=None):
        x = x + self.attn(self.ln1(x), causal=causal, key_padding=key_padding)
        return x + self.mlp(self.ln2(x))


class PatchBackbone(nn.Module):
    """Small ViT: non-overlapping patch embedding, learned positions, two blocks."""

    def __init__(self, image_size=64, patch_size=8, dim=64, depth=2, heads=4, channels=3):
        super().__init__()
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.patchify = nn.Conv2d(channels, dim, patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.randn(1, self.grid * self.grid, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.ln = nn.LayerNorm(dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` in [0, 1] -> ``(B, n_patches, dim)``."""
        H, W = images.shape[-2:]
        if H % self.patch_size or W % self.patch_size or H // self.patch_size != self.grid:
            raise ValueError(f"image {H}x{W} incompatible with patch {self.patch_size} / grid {self.grid}")
        x = self.patchify(images - 0.5).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


class LoRRA(nn.Module):
    """Residual rank-r bottleneck: ``v + up(act(down(v)))``; ``up`` starts at zero."""

    def __init__(self, dim: int, rank: int = 4, activation: str = "gelu"):
        super().__init__()
        self.down = nn.Linear(dim, rank)
        self.up = nn.Linear(rank, dim)
        self.act = {"gelu": nn.GELU(), "relu": nn.ReLU(), "linear": nn.Identity()}[activation]
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return v + self.up(self.act(self.down(v)))


class ResamplerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int):
        super().__init__()
        self.ln_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.ln_q = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(kv_dim)
        self.cross_attn = Attention(dim, heads, kv_dim=kv_dim)
        self.ln_mlp = nn.LayerNorm(dim)
        self.mlp = mlp(dim)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        q = q + self.self_attn(self.ln_self(q))
        q = q + self.cross_attn(self.ln_q(q), context=self.ln_kv(kv))
        return q + self.mlp(self.ln_mlp(q))


class Resampler(nn.Module):
    """Learned queries cross-attending to visual features (a small Q-Former)."""

    def __init__(self, n_queries: int, dim: int, kv_dim: int, depth: int = 2, heads: int = 4):
        super().__init__()
        self.base_queries = nn.Parameter(torch.randn(n_queries, dim) * 0.5)
        self.blocks = nn.ModuleList(ResamplerBlock(dim, heads, kv_dim) for _ in range(depth))
        self.ln = nn.LayerNorm(dim)

    def forward(self, v: torch.Tensor, expert_queries: torch.Tensor | None = None) -> torch.Tensor:
        q = self.base_queries.expand(v.shape[0], -1, -1)
        if expert_queries is not None:
            q = torch.cat([q, expert_queries], dim=1)
        for blk in self.blocks:
            q = blk(q, v)
        return self.ln(q)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = PatchBackbone(cfg.image_size, cfg.patch_size, cfg.d_vit, cfg.vit_blocks, cfg.vit_heads)
        self.lorra = LoRRA(cfg.d_vit, cfg.lorra_rank, cfg.lorra_activation)
        self.vpg = PromptGenerator(cfg.vpg_input, tuple(cfg.vpg_channels))
        self.resampler = Resampler(cfg.n_base_queries, cfg.d_qformer, cfg.d_vit, cfg.resampler_blocks, cfg.resampler_heads)
        self.projection = nn.Linear(cfg.d_qformer, cfg.d_llm)

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def adapt(self, v: torch.Tensor) -> torch.Tensor:
        return self.lorra(v)

    def expert_queries(self, maps: torch.Tensor) -> torch.Tensor:
        return self.vpg(maps)

    def resample(self, v_e: torch.Tensor, q_e: torch.Tensor | None) -> torch.Tensor:
        return self.resampler(v_e, q_e)

    def project(self, f_p: torch.Tensor) -> torch.Tensor:
        return self.projection(f_p)

    def encode_features(self, v_I, maps=None, use_lorra=True, use_vpg=True):
        v_e = self.adapt(v_I) if use_lorra else v_I
        q_e = self.expert_queries(maps) if use_vpg else None
        return self.project(self.resample(v_e, q_e))

    def forward(self, images, maps=None, use_lorra=True, use_vpg=True):
        """``(B, C, H, W)`` images and ``(B, H, W)`` maps -> visual tokens ``(B, N_v, d_llm)``."""
        return self.encode_features(self.embed_patches(images), maps, use_lorra, use_vpg)

    def n_visual_tokens(self, use_vpg: bool = True) -> int:
        return self.cfg.n_base_queries + (self.vpg.n_tokens if use_vpg else 0)


def images_to_tensor(pixels, dtype=torch.float32) -> torch.Tensor:
    """Stack of ``H x W x C`` arrays -> ``(B, C, H, W)`` tensor."""
    arr = np.stack([np.asarray(p) for p in pixels]) if isinstance(pixels, (list, tuple)) else np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def numpy_embedder(backbone: PatchBackbone):
    """Wrap a frozen backbone as ``image -> (n_patches, D)`` numpy features."""

    def embed(pixels):
        dtype = backbone.pos.dtype
        with torch.no_grad():
            return backbone(images_to_tensor(pixels, dtype))[0].double().numpy()

    return embed


__all__ = [
    "Attention",
    "Block",
    "PatchBackbone",
    "LoRRA",
    "Resampler",
    "VisionEncoder",
    "images_to_tensor",
    "numpy_embedder",
]
