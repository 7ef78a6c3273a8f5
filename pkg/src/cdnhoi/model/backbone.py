"""Visual feature extractor: small CNN, 1x1 projection, flatten, sine positions, encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig


@dataclass
class SequencedFeatures:
    tokens: torch.Tensor  # (B, H'*W', D_c)
    height: int
    width: int


def positional_encoding(height: int, width: int, dim: int, temperature: float = 10000.0,
                        dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sine/cosine table of shape ``(height * width, dim)``.

    The first half of the channels encodes the row, the second half the column,
    each as interleaved sin/cos at geometrically spaced frequencies.
    """
    if dim % 4:
        raise ValueError(f"positional encoding width must be divisible by 4, got {dim}")
    npf = dim // 2
    scale = 2 * math.pi
    y = (torch.arange(1, height + 1, dtype=torch.float64) / (height + 1e-6) * scale)
    x = (torch.arange(1, width + 1, dtype=torch.float64) / (width + 1e-6) * scale)
    dim_t = torch.arange(npf, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / npf)
    pos_y = y[:, None] / dim_t  # (H, npf)
    pos_x = x[:, None] / dim_t  # (W, npf)
    pos_y = torch.stack((pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()), dim=2).flatten(1)
    pos_x = torch.stack((pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()), dim=2).flatten(1)
    table = torch.cat([pos_y[:, None, :].expand(height, width, npf),
                       pos_x[None, :, :].expand(height, width, npf)], dim=2)
    return table.reshape(height * width, dim).to(dtype)


class Backbone(nn.Module):
    """Stride-2 conv blocks; ``len(channels)`` blocks give total stride ``2**len(channels)``."""

    def __init__(self, channels, in_channels=3):
        super().__init__()
        blocks = []
        c_in = in_channels
        for c in channels:
            blocks += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.GroupNorm(min(8, c), c), nn.ReLU(),
                       nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(min(8, c), c), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*blocks)
        self.num_channels = c_in

    def forward(self, x):
        return self.body(x)


class EncoderLayer(nn.Module):
    def __init__(self, d_model, nhead, dim_feedforward, dropout=0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, nhead, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.linear2 = nn.Linear(dim_feedforward, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, src, pos):
        q = k = src + pos
        src = self.norm1(src + self.dropout(self.self_attn(q, k, src, need_weights=False)[0]))
        src2 = self.linear2(self.dropout(F.relu(self.linear1(src))))
        return self.norm2(src + self.dropout(src2))


class FeatureExtractor(nn.Module):
    """Image ``(B, 3, H, W)`` -> encoder memory ``X_s`` plus the position table ``E_pos``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.stride
        self.hidden_dim = cfg.hidden_dim
        self.backbone = Backbone(cfg.channels)
        self.input_proj = nn.Conv2d(self.backbone.num_channels, cfg.hidden_dim, kernel_size=1)
        self.layers = nn.ModuleList(EncoderLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, cfg.dropout)
                                    for _ in range(cfg.encoder_layers))

    def forward(self, images: torch.Tensor):
        _, _, h, w = images.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} is not divisible by the backbone stride {self.stride}")
        fmap = self.input_proj(self.backbone(images))
        hp, wp = fmap.shape[-2:]
        x = fmap.flatten(2).transpose(1, 2)  # (B, H'W', D_c)
        pos = positional_encoding(hp, wp, self.hidden_dim, dtype=x.dtype)[None]
        for layer in self.layers:
            x = layer(x, pos)
        return SequencedFeatures(x, hp, wp), pos
