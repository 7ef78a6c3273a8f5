"""Cascade decoders.

The human-object pair decoder (HO-PD) turns learned queries into box pairs, object
classes and an interactive score. Its last-layer query vectors seed the interaction
decoder one-to-one, which only classifies actions. Both decoders share the layer
design below but never share weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LEARNED_INIT = "learned-init"
HOPD_OUTPUT = "ho-pd-output"


class CascadeError(ValueError):
    pass


@dataclass
class QueryState:
    vectors: torch.Tensor  # (B, N_d, C_q)
    layer: int
    provenance: str


@dataclass
class PairDetections:
    """Per-layer HO-PD outputs; leading dims are ``(layers, B, N_d)``."""

    human_boxes: torch.Tensor  # normalized cxcywh
    object_boxes: torch.Tensor
    object_logits: torch.Tensor  # (..., C_o + 1), last index is "no object"
    interactive_logits: torch.Tensor  # (layers, B, N_d)

    def layer(self, i: int) -> "PairDetections":
        return PairDetections(self.human_boxes[i], self.object_boxes[i],
                              self.object_logits[i], self.interactive_logits[i])

    @property
    def num_layers(self) -> int:
        return self.human_boxes.shape[0]


class MLP(nn.Module):
    def __init__(self, input_dim, hidden_dim, output_dim, num_layers):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class PairHeads(nn.Module):
    """Shared FFN heads of HO-PD: two 3-layer box MLPs, object classifier, interactive score."""

    def __init__(self, dim, num_object_classes):
        super().__init__()
        self.human_box = MLP(dim, dim, 4, 3)
        self.object_box = MLP(dim, dim, 4, 3)
        self.object_class = nn.Linear(dim, num_object_classes + 1)
        self.interactive = nn.Linear(dim, 1)

    def forward(self, q):
        return (self.human_box(q).sigmoid(), self.object_box(q).sigmoid(),
                self.object_class(q), self.interactive(q).squeeze(-1))


class DecoderLayer(nn.Module):
    """Self-attention over queries, co-attention to the encoder memory, then a FFN."""

    def __init__(self, d_model, nhead, dim_feedforward, dropout=0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, nhead, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, nhead, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.linear2 = nn.Linear(dim_feedforward, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        self.use_self_attention = True

    def forward(self, tgt, memory, pos, query_pos, need_weights=False):
        if self.use_self_attention:
            q = k = tgt + query_pos
            tgt = self.norm1(tgt + self.dropout(self.self_attn(q, k, tgt, need_weights=False)[0]))
        attended, weights = self.cross_attn(tgt + query_pos, memory + pos, memory,
                                            need_weights=need_weights, average_attn_weights=True)
        tgt = self.norm2(tgt + self.dropout(attended))
        tgt2 = self.linear2(self.dropout(F.relu(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout(tgt2)), weights


class TransformerDecoder(nn.Module):
    """Stack of decoder layers returning every layer's (normalized) output."""

    def __init__(self, num_layers, d_model, nhead, dim_feedforward, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(d_model, nhead, dim_feedforward, dropout)
                                    for _ in range(num_layers))
        self.norm = nn.LayerNorm(d_model)

    def forward(self, tgt, memory, pos, query_pos, need_weights=False):
        outputs, attn = [], []
        for layer in self.layers:
            tgt, w = layer(tgt, memory, pos, query_pos, need_weights)
            outputs.append(self.norm(tgt))
            attn.append(w)
        return torch.stack(outputs), attn


class CascadeDecoders(nn.Module):
    def __init__(self, dim, nhead, dim_feedforward, num_queries, layers_ho, layers_int,
                 num_object_classes, num_action_classes, dropout=0.0):
        super().__init__()
        self.query_embed = nn.Embedding(num_queries, dim)
        # positional queries of the interaction decoder; kept separate so that action
        # gradients reach HO-PD only through the hand-off queries
        self.interaction_pos = nn.Embedding(num_queries, dim)
        self.hopd = TransformerDecoder(layers_ho, dim, nhead, dim_feedforward, dropout)
        self.interaction = TransformerDecoder(layers_int, dim, nhead, dim_feedforward, dropout)
        self.pair_heads = PairHeads(dim, num_object_classes)
        self.action_head = nn.Linear(dim, num_action_classes)

    def initial_queries(self, batch_size: int) -> QueryState:
        q = self.query_embed.weight[None].expand(batch_size, -1, -1)
        return QueryState(q, 0, LEARNED_INIT)

    def _check(self, queries: QueryState, memory: torch.Tensor, pos: torch.Tensor):
        v = queries.vectors
        if v.dim() != 3 or v.shape[1:] != self.query_embed.weight.shape:
            raise CascadeError(f"queries must be (B, {self.query_embed.num_embeddings}, "
                               f"{self.query_embed.embedding_dim}), got {tuple(v.shape)}")
        if memory.dim() != 3 or memory.shape[0] != v.shape[0] or memory.shape[2] != v.shape[2]:
            raise CascadeError(f"memory shape {tuple(memory.shape)} does not match queries {tuple(v.shape)}")
        if pos.shape[-2:] != memory.shape[-2:]:
            raise CascadeError(f"position table {tuple(pos.shape)} does not match memory {tuple(memory.shape)}")

    def decode_pairs(self, queries: QueryState, memory, pos, attention: dict | None = None):
        """Run HO-PD; returns per-layer pair detections and the hand-off queries.

        Passing a dict as ``attention`` collects the per-layer co-attention maps
        (averaged over heads) under the key ``"hopd"``.
        """
        if queries.provenance != LEARNED_INIT:
            raise CascadeError(f"HO-PD expects learned queries, got {queries.provenance!r}")
        self._check(queries, memory, pos)
        query_pos = self.query_embed.weight[None]
        hs, attn = self.hopd(queries.vectors, memory, pos, query_pos, attention is not None)
        if attention is not None:
            attention["hopd"] = attn
        dets = PairDetections(*self.pair_heads(hs))
        return dets, QueryState(hs[-1], len(self.hopd.layers), HOPD_OUTPUT)

    def decode_interactions(self, queries: QueryState, memory, pos, attention: dict | None = None):
        """Run the interaction decoder from HO-PD's last-layer queries; returns action logits."""
        if queries.provenance != HOPD_OUTPUT:
            raise CascadeError("the interaction decoder must be initialized with HO-PD output queries, "
                               f"got {queries.provenance!r}")
        self._check(queries, memory, pos)
        query_pos = self.interaction_pos.weight[None]
        hs, attn = self.interaction(queries.vectors, memory, pos, query_pos, attention is not None)
        if attention is not None:
            attention["interaction"] = attn
        return self.action_head(hs)

    def set_self_attention(self, enabled: bool):
        for dec in (self.hopd, self.interaction):
            for layer in dec.layers:
                layer.use_self_attention = enabled
