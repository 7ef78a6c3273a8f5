"""Set-prediction loss: box L1 + GIoU for both boxes, interactive score, object and action classes.

Terms (matched queries come from the final-layer assignment, reused for every layer):

* box L1: sum of absolute errors of normalized cxcywh over matched pairs / #GT
* GIoU: sum of ``1 - giou`` over matched pairs / #GT
* interactive: binary cross-entropy (matched -> 1, unmatched -> 0), mean over queries
* object class: softmax cross-entropy over ``C_o + 1`` classes (unmatched -> the last,
  "no object" class), each query scaled by the weight of its target class, mean over queries
* action: per-class binary cross-entropy on sigmoid logits (unmatched -> all zeros),
  matched entries scaled by the per-action weight and unmatched queries by the
  background weight, summed and divided by #GT

Class weights default to all ones, which gives the plain (unweighted) loss.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

from .boxes import box_cxcywh_to_xyxy, elementwise_giou
from .config import LossWeights
from .matching import Assignment, Target

TERMS = ("loss_b_h", "loss_b_o", "loss_giou_h", "loss_giou_o", "loss_p", "loss_c_o", "loss_c_a")


@dataclass
class LossBreakdown:
    loss_b_h: torch.Tensor
    loss_b_o: torch.Tensor
    loss_giou_h: torch.Tensor
    loss_giou_o: torch.Tensor
    loss_p: torch.Tensor
    loss_c_o: torch.Tensor
    loss_c_a: torch.Tensor
    total: torch.Tensor
    layers: list["LossBreakdown"] | None = None

    def weighted_total(self, w: LossWeights) -> torch.Tensor:
        return (w.lambda_b * (self.loss_b_h + self.loss_b_o)
                + w.lambda_giou * (self.loss_giou_h + self.loss_giou_o)
                + w.lambda_p * self.loss_p + w.lambda_o * self.loss_c_o + w.lambda_a * self.loss_c_a)

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self) if f.name != "layers"}


def _check_weights(vec, expected, name):
    if vec is not None and vec.shape[-1] != expected:
        raise ValueError(f"{name} weight vector has length {vec.shape[-1]}, expected {expected} "
                         "(classes + background)")


def _pair_terms(pairs, targets, assignments, num_gt):
    """Box, GIoU and interactive terms for one HO-PD layer, plus object-class targets."""
    human, obj, obj_logits, inter_logits = pairs
    B, N = inter_logits.shape
    num_obj = obj_logits.shape[-1] - 1
    bidx, qidx = [], []
    for b, a in enumerate(assignments):
        bidx += [b] * len(a.gt_to_query)
        qidx += a.gt_to_query.tolist()
    dev = human.device
    bidx = torch.as_tensor(bidx, dtype=torch.long, device=dev)
    qidx = torch.as_tensor(qidx, dtype=torch.long, device=dev)
    tgt_h = torch.cat([t.human_boxes for t in targets]).to(human)
    tgt_o = torch.cat([t.object_boxes for t in targets]).to(human)
    # targets are concatenated image by image in GT order, the same order as (bidx, qidx)
    src_h, src_o = human[bidx, qidx], obj[bidx, qidx]
    loss_b_h = (src_h - tgt_h).abs().sum() / num_gt
    loss_b_o = (src_o - tgt_o).abs().sum() / num_gt
    loss_giou_h = (1 - elementwise_giou(box_cxcywh_to_xyxy(src_h), box_cxcywh_to_xyxy(tgt_h))).sum() / num_gt
    loss_giou_o = (1 - elementwise_giou(box_cxcywh_to_xyxy(src_o), box_cxcywh_to_xyxy(tgt_o))).sum() / num_gt

    target_classes = torch.full((B, N), num_obj, dtype=torch.long, device=dev)
    if len(qidx):
        target_classes[bidx, qidx] = torch.cat([t.object_classes for t in targets]).to(dev)
    interactive = torch.zeros(B, N, dtype=inter_logits.dtype, device=dev)
    interactive[bidx, qidx] = 1.0
    loss_p = F.binary_cross_entropy_with_logits(inter_logits, interactive, reduction="mean")
    return loss_b_h, loss_b_o, loss_giou_h, loss_giou_o, loss_p, target_classes


def compute_loss(outputs, targets: Sequence[Target], assignments: Sequence[Assignment],
                 weights: LossWeights, object_weights: torch.Tensor | None = None,
                 action_weights: torch.Tensor | None = None) -> LossBreakdown:
    """Weighted loss over all decoder layers.

    ``object_weights`` has length ``C_o + 1`` and ``action_weights`` length ``C_a + 1``;
    the last entry of each is the background weight. The returned breakdown holds the
    per-term means over layers plus one record per layer in ``layers``.
    """
    pairs, action_logits = outputs.pairs, outputs.action_logits
    num_obj = pairs.object_logits.shape[-1] - 1
    num_act = action_logits.shape[-1]
    _check_weights(object_weights, num_obj + 1, "object")
    _check_weights(action_weights, num_act + 1, "action")
    if len(targets) != len(assignments) or len(targets) != action_logits.shape[1]:
        raise ValueError("targets, assignments and batch size disagree")

    dtype = action_logits.dtype
    num_gt = float(max(sum(len(t) for t in targets), 1))
    zero = action_logits.new_zeros(())
    L_ho, L_int = pairs.num_layers, action_logits.shape[0]

    # action targets and per-entry weights are the same for every layer
    B, N = action_logits.shape[1:3]
    act_target = torch.zeros(B, N, num_act, dtype=dtype, device=action_logits.device)
    matched = torch.zeros(B, N, dtype=torch.bool, device=action_logits.device)
    for b, (t, a) in enumerate(zip(targets, assignments)):
        q = torch.as_tensor(a.gt_to_query, dtype=torch.long)
        act_target[b, q] = t.actions.to(dtype)
        matched[b, q] = True
    if action_weights is not None:
        aw = action_weights.to(dtype)
        act_w = torch.where(matched[..., None], aw[:num_act].expand(B, N, num_act), aw[num_act])
    else:
        act_w = None

    records = []
    for i in range(max(L_ho, L_int)):
        terms = dict.fromkeys(TERMS, zero)
        if i < L_ho:
            logits = pairs.object_logits[i]
            b_h, b_o, g_h, g_o, l_p, tgt_cls = _pair_terms(
                (pairs.human_boxes[i], pairs.object_boxes[i], logits, pairs.interactive_logits[i]),
                targets, assignments, num_gt)
            ce = F.cross_entropy(logits.transpose(1, 2), tgt_cls, reduction="none")
            if object_weights is not None:
                ce = ce * object_weights.to(dtype)[tgt_cls]
            terms.update(loss_b_h=b_h, loss_b_o=b_o, loss_giou_h=g_h, loss_giou_o=g_o,
                         loss_p=l_p, loss_c_o=ce.mean())
        if i < L_int:
            bce = F.binary_cross_entropy_with_logits(action_logits[i], act_target, reduction="none")
            if act_w is not None:
                bce = bce * act_w
            terms["loss_c_a"] = bce.sum() / num_gt
        rec = LossBreakdown(**terms, total=zero)
        rec.total = rec.weighted_total(weights)
        records.append(rec)

    # each term averages over the layers of the decoder that produces it
    mean = {k: torch.stack([getattr(r, k) for r in records[:L_int if k == "loss_c_a" else L_ho]]).mean()
            for k in TERMS}
    summary = LossBreakdown(**mean, total=zero, layers=records)
    summary.total = summary.weighted_total(weights)
    return summary
