from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..config import ModelConfig
from .backbone import FeatureExtractor, SequencedFeatures
from .decoders import CascadeDecoders, PairDetections, QueryState

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class CDNOutput:
    pairs: PairDetections  # (layers_ho, B, N_d, ...)
    action_logits: torch.Tensor  # (layers_int, B, N_d, C_a)
    hopd_queries: QueryState  # last-layer HO-PD output handed to the interaction decoder
    features: SequencedFeatures
    attention: dict | None = None


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack uint8 ``(H, W, 3)`` arrays into a normalized ``(B, 3, H, W)`` tensor."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    return ((t - PIXEL_MEAN) / PIXEL_STD).to(dtype)


class CDN(nn.Module):
    """Feature extractor followed by the two cascade decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.decoders = CascadeDecoders(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, cfg.num_queries,
                                        cfg.decoder_layers_ho, cfg.decoder_layers_int,
                                        cfg.num_object_classes, cfg.num_action_classes, cfg.dropout)

    def forward(self, images: torch.Tensor, return_attention: bool = False,
                detach_handoff: bool = False) -> CDNOutput:
        features, pos = self.extractor(images)
        memory = features.tokens
        attention = {} if return_attention else None
        queries = self.decoders.initial_queries(images.shape[0])
        pairs, handoff = self.decoders.decode_pairs(queries, memory, pos, attention)
        if detach_handoff:
            handoff = QueryState(handoff.vectors.detach(), handoff.layer, handoff.provenance)
        actions = self.decoders.decode_interactions(handoff, memory, pos, attention)
        return CDNOutput(pairs, actions, handoff, features, attention)

    def extractor_parameters(self):
        return self.extractor.parameters()

    def decoder_parameters(self):
        return self.decoders.parameters()
