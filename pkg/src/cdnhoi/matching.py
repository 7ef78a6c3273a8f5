"""Bipartite matching between ground-truth triplets and decoder queries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import box_cxcywh_to_xyxy, pairwise_giou
from .config import LossWeights
from .data import ImageRecord


@dataclass
class Target:
    """Ground truth of one image in model space (normalized cxcywh boxes)."""

    human_boxes: torch.Tensor  # (G, 4)
    object_boxes: torch.Tensor  # (G, 4)
    object_classes: torch.Tensor  # (G,) long
    actions: torch.Tensor  # (G, C_a) multi-hot

    def __len__(self):
        return self.object_classes.shape[0]

    def permute(self, order) -> "Target":
        idx = torch.as_tensor(order, dtype=torch.long)
        return Target(self.human_boxes[idx], self.object_boxes[idx], self.object_classes[idx],
                      self.actions[idx])


@dataclass
class Assignment:
    """Injective map from ground-truth index to query index."""

    gt_to_query: np.ndarray  # (G,)
    num_queries: int

    @property
    def unmatched(self) -> list[int]:
        taken = set(self.gt_to_query.tolist())
        return [q for q in range(self.num_queries) if q not in taken]

    def query_targets(self) -> np.ndarray:
        """Per query, the matched ground-truth index or -1."""
        out = np.full(self.num_queries, -1, dtype=np.int64)
        out[self.gt_to_query] = np.arange(len(self.gt_to_query))
        return out


def make_target(record: ImageRecord, num_actions: int, dtype=torch.float32) -> Target:
    def norm(c):
        return c.to_box(record.width, record.height).as_tuple()

    hois = record.hois
    actions = torch.zeros(len(hois), num_actions, dtype=dtype)
    for g, h in enumerate(hois):
        actions[g, list(h.actions)] = 1.0
    return Target(torch.tensor([norm(h.human_box) for h in hois], dtype=dtype).reshape(-1, 4),
                  torch.tensor([norm(h.object_box) for h in hois], dtype=dtype).reshape(-1, 4),
                  torch.tensor([h.object_class for h in hois], dtype=torch.long),
                  actions)


def build_cost_matrix(human_boxes, object_boxes, object_logits, interactive_logits, action_logits,
                      target: Target, weights: LossWeights) -> torch.Tensor:
    """Matching cost of shape ``(#GT, N_d)`` for one image.

    Prediction arguments are the final-layer outputs of both decoders for that image:
    boxes ``(N_d, 4)``, object logits ``(N_d, C_o + 1)``, interactive logits ``(N_d,)``
    and action logits ``(N_d, C_a)``.
    """
    if len(target) == 0:
        raise ValueError("cost matrix needs at least one ground truth; skip matching instead")
    cost_l1 = (torch.cdist(target.human_boxes, human_boxes, p=1)
               + torch.cdist(target.object_boxes, object_boxes, p=1))
    cost_giou = ((1 - pairwise_giou(box_cxcywh_to_xyxy(target.human_boxes), box_cxcywh_to_xyxy(human_boxes)))
                 + (1 - pairwise_giou(box_cxcywh_to_xyxy(target.object_boxes), box_cxcywh_to_xyxy(object_boxes))))
    cost_obj = -object_logits.softmax(-1)[:, target.object_classes].T
    act = target.actions
    cost_act = -(act @ action_logits.sigmoid().T) / act.sum(1, keepdim=True).clamp(min=1)
    cost_inter = -interactive_logits.sigmoid()[None, :].expand_as(cost_l1)
    cost = (weights.lambda_b * cost_l1 + weights.lambda_giou * cost_giou + weights.lambda_o * cost_obj
            + weights.lambda_a * cost_act + weights.lambda_p * cost_inter)
    return cost


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of rows (ground truths) to columns (queries)."""
    cost = np.asarray(cost.detach().cpu() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    rows, cols = cost.shape
    if rows > cols:
        raise ValueError(f"more ground truths ({rows}) than queries ({cols})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    r, c = linear_sum_assignment(cost)
    gt_to_query = np.empty(rows, dtype=np.int64)
    gt_to_query[r] = c
    return Assignment(gt_to_query, cols)


def assignment_cost(cost, assignment: Assignment) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(cost[np.arange(len(assignment.gt_to_query)), assignment.gt_to_query].sum())


@torch.no_grad()
def match_batch(outputs, targets: Sequence[Target], weights: LossWeights) -> list[Assignment]:
    """Match every image of a batch using the last layer of both decoders."""
    pairs = outputs.pairs.layer(-1)
    actions = outputs.action_logits[-1]
    n = actions.shape[1]
    result = []
    for b, tgt in enumerate(targets):
        if len(tgt) == 0:
            result.append(Assignment(np.zeros(0, dtype=np.int64), n))
            continue
        cost = build_cost_matrix(pairs.human_boxes[b], pairs.object_boxes[b], pairs.object_logits[b],
                                 pairs.interactive_logits[b], actions[b], tgt, weights)
        result.append(hungarian_match(cost))
    return result
