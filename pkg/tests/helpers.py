"""Shared test fixtures: random decoder outputs, independent oracles."""
from __future__ import annotations

import itertools
import math
from types import SimpleNamespace

import numpy as np
import torch

from cdnhoi.matching import Target
from cdnhoi.model.decoders import PairDetections


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Minimum over all injective row -> column maps."""
    rows, cols = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(cols), rows):
        best = min(best, sum(cost[r, c] for r, c in enumerate(perm)))
    return best


def random_boxes(gen, *shape):
    c = torch.rand(*shape, 2, generator=gen, dtype=torch.float64) * 0.6 + 0.2
    wh = torch.rand(*shape, 2, generator=gen, dtype=torch.float64) * 0.3 + 0.05
    return torch.cat([c, wh], -1)


def random_outputs(B=2, N=6, C_o=2, C_a=3, L_ho=2, L_int=2, seed=0, requires_grad=False):
    gen = torch.Generator().manual_seed(seed)

    def leaf(t):
        return t.requires_grad_(requires_grad)

    pairs = PairDetections(leaf(random_boxes(gen, L_ho, B, N)), leaf(random_boxes(gen, L_ho, B, N)),
                           leaf(torch.randn(L_ho, B, N, C_o + 1, generator=gen, dtype=torch.float64)),
                           leaf(torch.randn(L_ho, B, N, generator=gen, dtype=torch.float64)))
    actions = leaf(torch.randn(L_int, B, N, C_a, generator=gen, dtype=torch.float64))
    return SimpleNamespace(pairs=pairs, action_logits=actions)


def random_target(G, C_o=2, C_a=3, seed=0):
    gen = torch.Generator().manual_seed(seed + 7919)
    actions = (torch.rand(G, C_a, generator=gen) < 0.4).double()
    actions[torch.arange(G), torch.randint(C_a, (G,), generator=gen)] = 1.0
    return Target(random_boxes(gen, G), random_boxes(gen, G), torch.randint(C_o, (G,), generator=gen), actions)


def _np_iou(a, b):
    """Pairwise IoU of (n, 4) and (m, 4) corner arrays."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def naive_pnms(triplets, alpha, beta, threshold, top_k=None, class_agnostic=False):
    """Reference PNMS: full PIoU matrix, then a suppression mask over the score order."""
    order = sorted(range(len(triplets)), key=lambda i: (-triplets[i].score, i))
    if top_k is not None:
        order = order[:top_k]
    ts = [triplets[i] for i in order]
    if not ts:
        return []
    h = np.array([t.human_box.as_tuple() for t in ts], dtype=np.float64)
    o = np.array([t.object_box.as_tuple() for t in ts], dtype=np.float64)
    overlap = _np_iou(h, h) ** alpha * _np_iou(o, o) ** beta
    suppressed = np.zeros(len(ts), dtype=bool)
    for i in range(len(ts)):
        if suppressed[i]:
            continue
        for j in range(i + 1, len(ts)):
            same = class_agnostic or (ts[i].object_class, ts[i].action) == (ts[j].object_class, ts[j].action)
            if same and overlap[i, j] > threshold:
                suppressed[j] = True
    return [t for t, s in zip(ts, suppressed) if not s]


def clean_room_map(predictions, dataset, table):
    """Independent HOI mAP: per class, greedy matching in score order, all-point AP.

    Returns ``(per-class AP dict, full, rare, non_rare)`` with classes lacking ground truth
    dropped.
    """
    gt = {}
    for rec in dataset.images:
        for hoi in rec.hois:
            for a in hoi.actions:
                gt.setdefault((hoi.object_class, a), []).append(
                    (rec.image_id, np.array(hoi.human_box.as_tuple()), np.array(hoi.object_box.as_tuple())))
    aps = {}
    for cls in table.classes:
        items = gt.get(tuple(cls), [])
        if not items:
            continue
        dets = [(i, p) for i, p in enumerate(predictions) if (p.object_class, p.action) == tuple(cls)]
        dets.sort(key=lambda x: (-x[1].score, x[0]))
        used = [False] * len(items)
        tp = []
        for _, p in dets:
            ph = np.array([p.human_box.as_tuple()])
            po = np.array([p.object_box.as_tuple()])
            best, best_v = None, -1.0
            for g, (img, gh, go) in enumerate(items):
                if used[g] or img != p.image_id:
                    continue
                ih = _np_iou(ph, gh[None])[0, 0]
                io = _np_iou(po, go[None])[0, 0]
                if ih > 0.5 and io > 0.5 and min(ih, io) > best_v:
                    best, best_v = g, min(ih, io)
            if best is not None:
                used[best] = True
            tp.append(best is not None)
        # all-point AP: for each new recall level, the best precision at any recall >= it
        n = len(items)
        hits = np.cumsum(tp)
        prec = [hits[k] / (k + 1) for k in range(len(tp))]
        rec_ = [hits[k] / n for k in range(len(tp))]
        ap, prev_r = 0.0, 0.0
        for k in range(len(tp)):
            if tp[k]:
                ap += (rec_[k] - prev_r) * max(prec[k:])
                prev_r = rec_[k]
        aps[tuple(cls)] = ap
    rare = dict(zip(map(tuple, table.classes), table.rare))

    def mean(sel):
        vals = [v for c, v in aps.items() if sel(rare[c])]
        return float(np.mean(vals)) if vals else math.nan

    return aps, mean(lambda r: True), mean(lambda r: r), mean(lambda r: not r)
