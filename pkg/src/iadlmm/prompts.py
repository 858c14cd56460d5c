"""Convolutional prompt generators that turn an anomaly map into tokens.

The same recipe serves both targets: the visual prompt generator (VPG) emits
expert queries for the resampler, the textual prompt generator (TPG) emits
expert tokens placed directly in the language model's input. Neither ever sees
image pixels.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .experts import AnomalyMap, resize_map


class PromptGenerator(nn.Module):
    """Stack of (3x3 conv, ReLU, 2x2 max-pool) blocks; the final grid becomes tokens.

    The last block's channel count is the token width. Tokens are read off the
    final spatial grid in row-major order.
    """

    def __init__(self, input_size: int, channels: tuple[int, ...], in_channels: int = 1):
        super().__init__()
        self.input_size = input_size
        layers = []
        c_in = in_channels
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c
        self.net = nn.Sequential(*layers)
        side = input_size // 2 ** len(channels)
        self.n_tokens = side * side

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """``(B, H, W)`` anomaly maps -> ``(B, n_tokens, width)``."""
        dtype = self.net[0].weight.dtype
        x = resize_map(maps.to(dtype), self.input_size)[:, None]
        return self.net(x).flatten(2).transpose(1, 2)


def textual_prompt_generator(cfg: ModelConfig) -> PromptGenerator:
    return PromptGenerator(cfg.tpg_input, tuple(cfg.tpg_channels))


def gen_text_prompts(amap: AnomalyMap | np.ndarray, tpg: PromptGenerator) -> torch.Tensor:
    """Expert tokens ``(n_tokens, d_llm)`` for a single map."""
    values = amap.values if isinstance(amap, AnomalyMap) else amap
    dtype = tpg.net[0].weight.dtype
    return tpg(torch.as_tensor(np.asarray(values), dtype=dtype)[None])[0]


def gen_expert_queries(amap: AnomalyMap | np.ndarray, vpg: PromptGenerator) -> torch.Tensor:
    """Expert queries ``(n_tokens, d_qformer)`` for a single map."""
    return gen_text_prompts(amap, vpg)


__all__ = ["PromptGenerator", "textual_prompt_generator", "gen_text_prompts", "gen_expert_queries"]
