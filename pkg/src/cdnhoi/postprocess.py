"""Turning decoder outputs into ranked HOI triplets, and pair-wise NMS."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .boxes import Box, iou
from .config import PnmsConfig
from .data import ScoredTriplet


def _np(t) -> np.ndarray:
    return t.detach().to(torch.float64).cpu().numpy() if torch.is_tensor(t) else np.asarray(t, np.float64)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def compose_triplets(human_boxes, object_boxes, object_logits, interactive_logits, action_logits,
                     img_w: float = 1.0, img_h: float = 1.0, image_id: str = "",
                     argmax_only: bool = False) -> list[ScoredTriplet]:
    """Build triplets from the final-layer outputs of one image.

    Query ``i`` of HO-PD and query ``i`` of the interaction decoder describe the same pair.
    Every (query, action) combination becomes a triplet scored
    ``action_prob * object_prob * interactive_prob``; the object class is the best
    non-background class. With ``argmax_only`` each query keeps only its best action.
    Boxes are returned as pixel corners of an ``img_w`` x ``img_h`` image.
    """
    hb, ob = _np(human_boxes), _np(object_boxes)
    obj_logits, inter, act = _np(object_logits), _np(interactive_logits), _np(action_logits)
    n = hb.shape[0]
    if not (ob.shape[0] == obj_logits.shape[0] == inter.shape[0] == act.shape[0] == n):
        raise ValueError("HO-PD and interaction decoder outputs are not index-aligned")
    z = obj_logits - obj_logits.max(-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    fg = probs[:, :-1]
    obj_cls = fg.argmax(-1)
    obj_score = fg[np.arange(n), obj_cls]
    inter_score = _sigmoid(inter)
    act_score = _sigmoid(act)
    out = []
    for q in range(n):
        h = Box(*(float(v) for v in hb[q])).to_corners(img_w, img_h)
        o = Box(*(float(v) for v in ob[q])).to_corners(img_w, img_h)
        if argmax_only:
            # object and interactive scores are shared by the query, so the argmax is over actions
            actions = [int(act_score[q].argmax())]
        else:
            actions = range(act.shape[1])
        for k in actions:
            out.append(ScoredTriplet(h, o, int(obj_cls[q]), int(k), float(act_score[q, k]),
                                     float(obj_score[q]), float(inter_score[q]), image_id, q))
    return out


def piou(m: ScoredTriplet, n: ScoredTriplet, alpha: float, beta: float) -> float:
    """Pair-wise overlap: ``iou(humans) ** alpha * iou(objects) ** beta``."""
    return iou(m.human_box, n.human_box) ** alpha * iou(m.object_box, n.object_box) ** beta


def rank(triplets: Sequence[ScoredTriplet], top_k: int | None = None) -> list[ScoredTriplet]:
    """Sort by descending score; ties keep input order."""
    ranked = sorted(triplets, key=lambda t: -t.score)
    return ranked if top_k is None else ranked[:top_k]


def pnms(triplets: Sequence[ScoredTriplet], cfg: PnmsConfig) -> list[ScoredTriplet]:
    """Rank, keep the top ``cfg.top_k``, then greedily drop any triplet whose PIoU with a
    higher-scored survivor of its group exceeds ``cfg.threshold``.

    Groups are (object class, action) unless ``cfg.class_agnostic``.
    """
    kept: list[ScoredTriplet] = []
    by_group: dict[tuple, list[ScoredTriplet]] = {}
    for t in rank(triplets, cfg.top_k):
        group = () if cfg.class_agnostic else (t.object_class, t.action)
        survivors = by_group.setdefault(group, [])
        if any(piou(s, t, cfg.alpha, cfg.beta) > cfg.threshold for s in survivors):
            continue
        survivors.append(t)
        kept.append(t)
    return kept


def postprocess(triplets: Sequence[ScoredTriplet], cfg: PnmsConfig) -> list[ScoredTriplet]:
    """Top-K ranking followed by PNMS when enabled."""
    if cfg.enabled:
        return pnms(triplets, cfg)
    return rank(triplets, cfg.top_k)


def detections_for_batch(outputs, sizes, image_ids, cfg: PnmsConfig) -> list[list[ScoredTriplet]]:
    """Final-layer outputs of a batch -> post-processed triplets per image."""
    pairs = outputs.pairs.layer(-1)
    actions = outputs.action_logits[-1]
    result = []
    for b, ((w, h), image_id) in enumerate(zip(sizes, image_ids)):
        trips = compose_triplets(pairs.human_boxes[b], pairs.object_boxes[b], pairs.object_logits[b],
                                 pairs.interactive_logits[b], actions[b], w, h, image_id,
                                 cfg.argmax_only)
        result.append(postprocess(trips, cfg))
    return result
