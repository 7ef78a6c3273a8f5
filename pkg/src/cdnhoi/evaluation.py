"""HOI detection mAP (Default setting) with the Full / Rare / Non-Rare split.

A detection of HOI class (object, action) is a true positive when an unclaimed
ground truth of the same class overlaps it with IoU > 0.5 on the human box *and*
on the object box. AP is the area under the all-point interpolated
precision/recall curve; classes without ground truth are left out of every mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import iou
from .data import HoiClassTable, HoiDataset, ScoredTriplet, load_annotations, load_class_table, load_predictions
from .postprocess import rank

IOU_THRESHOLD = 0.5


class VocabularyError(ValueError):
    pass


@dataclass
class EvalResult:
    ap: list[float | None]  # per HOI class, None when the class has no ground truth
    num_gt: list[int]
    rare: list[bool]
    classes: list[tuple[int, int]]
    pr_curves: list[tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=list)

    def _mean(self, select) -> float:
        vals = [a for a, r in zip(self.ap, self.rare) if a is not None and select(r)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def map_full(self) -> float:
        return self._mean(lambda r: True)

    @property
    def map_rare(self) -> float:
        return self._mean(lambda r: r)

    @property
    def map_nonrare(self) -> float:
        return self._mean(lambda r: not r)

    def summary(self) -> dict[str, float]:
        return {"full": self.map_full, "rare": self.map_rare, "non_rare": self.map_nonrare}


def match_to_gt(predictions: Sequence[ScoredTriplet], gts: Sequence) -> list[bool]:
    """TP/FP flags for one image and one HOI class.

    ``predictions`` must already be in descending score order; ``gts`` holds
    ``(human_box, object_box)`` pairs. Among the eligible unclaimed ground truths the
    one with the largest ``min(iou_h, iou_o)`` is claimed, ties going to the lower index.
    """
    claimed = [False] * len(gts)
    flags = []
    for p in predictions:
        best, best_q = -1, -1.0
        for g, (hb, ob) in enumerate(gts):
            if claimed[g]:
                continue
            ih, io = iou(p.human_box, hb), iou(p.object_box, ob)
            if ih > IOU_THRESHOLD and io > IOU_THRESHOLD and min(ih, io) > best_q:
                best, best_q = g, min(ih, io)
        if best >= 0:
            claimed[best] = True
        flags.append(best >= 0)
    return flags


def precision_recall(flags: Sequence[bool], num_gt: int):
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(flags: Sequence[bool], scores: Sequence[float] | None, num_gt: int) -> float:
    """All-point interpolated AP of a ranked detection list.

    ``flags`` must be in descending score order (``scores`` is accepted for
    reference and checked for that order). Returns 0 when ``num_gt`` is 0.
    """
    if num_gt <= 0 or len(flags) == 0:
        return 0.0
    if scores is not None and np.any(np.diff(np.asarray(scores, dtype=np.float64)) > 0):
        raise ValueError("flags must be ordered by descending score")
    recall, precision = precision_recall(flags, num_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _check_vocab(num_objects, num_actions, gt: HoiDataset, table: HoiClassTable):
    if (num_objects, num_actions) != (gt.num_object_classes, gt.num_action_classes):
        raise VocabularyError(f"predictions use {num_objects} objects / {num_actions} actions, "
                              f"annotations {gt.num_object_classes} / {gt.num_action_classes}")
    for o, a in table.classes:
        if not (0 <= o < gt.num_object_classes and 0 <= a < gt.num_action_classes):
            raise VocabularyError(f"class table entry ({o}, {a}) is outside the annotation vocabulary")
    known = set(table.classes)
    for rec in gt.images:
        for h in rec.hois:
            for a in h.actions:
                if (h.object_class, a) not in known:
                    raise VocabularyError(f"image {rec.image_id}: HOI class ({h.object_class}, {a}) "
                                          "missing from the class table")


def evaluate(predictions: Sequence[ScoredTriplet], gt: HoiDataset, table: HoiClassTable,
             num_objects: int | None = None, num_actions: int | None = None) -> EvalResult:
    """Per-class AP over all images, then Full / Rare / Non-Rare means."""
    _check_vocab(num_objects if num_objects is not None else gt.num_object_classes,
                 num_actions if num_actions is not None else gt.num_action_classes, gt, table)
    index = table.index()
    gts: dict[int, dict[str, list]] = {i: {} for i in range(len(table.classes))}
    for rec in gt.images:
        for h in rec.hois:
            for a in h.actions:
                gts[index[(h.object_class, a)]].setdefault(rec.image_id, []).append((h.human_box, h.object_box))
    preds: dict[int, list[ScoredTriplet]] = {i: [] for i in range(len(table.classes))}
    for p in predictions:
        c = index.get((p.object_class, p.action))
        if c is not None:
            preds[c].append(p)

    aps, num_gt, curves = [], [], []
    for c in range(len(table.classes)):
        n = sum(len(v) for v in gts[c].values())
        ranked = rank(preds[c])
        per_image: dict[str, list[int]] = {}
        for i, p in enumerate(ranked):
            per_image.setdefault(p.image_id, []).append(i)
        flags = [False] * len(ranked)
        for image_id, idxs in per_image.items():
            for i, f in zip(idxs, match_to_gt([ranked[i] for i in idxs], gts[c].get(image_id, []))):
                flags[i] = f
        num_gt.append(n)
        curves.append(precision_recall(flags, n))
        aps.append(average_precision(flags, [p.score for p in ranked], n) if n > 0 else None)
    return EvalResult(aps, num_gt, table.rare, list(table.classes), curves)


def evaluate_files(preds_path, gt_path, classes_path) -> EvalResult:
    predictions, num_objects, num_actions = load_predictions(preds_path)
    return evaluate(predictions, load_annotations(gt_path), load_class_table(classes_path),
                    num_objects, num_actions)


def format_report(result: EvalResult) -> str:
    def f(x):
        return "nan" if math.isnan(x) else f"{100 * x:.4f}"

    lines = ["# HOI detection mAP (Default setting, values in %)",
             f"{'setting':<10}{'Full':>10}{'Rare':>10}{'Non-Rare':>10}",
             f"{'Default':<10}{f(result.map_full):>10}{f(result.map_rare):>10}{f(result.map_nonrare):>10}",
             "",
             "# per-class AP",
             f"{'object':>6} {'action':>6} {'num_gt':>7} {'rare':>5} {'AP':>10}"]
    for (o, a), ap, n, r in zip(result.classes, result.ap, result.num_gt, result.rare):
        lines.append(f"{o:>6} {a:>6} {n:>7} {str(r).lower():>5} {'-' if ap is None else f(ap):>10}")
    return "\n".join(lines) + "\n"


def write_report(path, result: EvalResult):
    Path(path).write_text(format_report(result))
