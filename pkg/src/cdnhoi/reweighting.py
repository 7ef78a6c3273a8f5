"""Decoupled dynamic class re-weighting.

Per-class weights are ``(sum_j N_j / N_i) ** p`` and the background weight is
``(sum_j N_j / N_bg) ** p``, where the counts come either from the whole training
set (static weights) or from a sliding window over recent training samples
(dynamic weights). During decoupled fine-tuning the two are blended as
``gamma * static + (1 - gamma) * dynamic`` with ``gamma = min(0.999 ** n, 0.9)``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import HoiDataset

BACKGROUND = -1


@dataclass
class WeightVector:
    weights: np.ndarray  # (C,)
    background: float
    p: float
    kind: str  # "static" | "dynamic" | "blended" | "uniform"

    def __len__(self):
        return len(self.weights)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Class weights followed by the background weight."""
        return torch.tensor(np.append(self.weights, self.background), dtype=dtype)

    @classmethod
    def uniform(cls, num_classes: int):
        return cls(np.ones(num_classes), 1.0, 0.0, "uniform")


class ClassCountQueue:
    """FIFO window of the last ``capacity`` samples with per-class counts.

    A sample is either a class id in ``[0, num_classes)`` or ``BACKGROUND``.
    """

    def __init__(self, num_classes: int, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.num_classes = num_classes
        self.capacity = capacity
        self._fifo: deque[int] = deque()
        self._counts = np.zeros(num_classes + 1, dtype=np.int64)  # last slot: background

    def push(self, labels: Iterable[int], background_count: int = 0) -> "ClassCountQueue":
        labels = [int(x) for x in labels]
        for x in labels:
            if not 0 <= x < self.num_classes:
                raise ValueError(f"class id {x} outside [0, {self.num_classes})")
        if background_count < 0:
            raise ValueError("background_count must be >= 0")
        for x in labels + [BACKGROUND] * background_count:
            self._fifo.append(x)
            self._counts[x] += 1
            if len(self._fifo) > self.capacity:
                self._counts[self._fifo.popleft()] -= 1
        return self

    @property
    def fill(self) -> int:
        return len(self._fifo)

    @property
    def counts(self) -> np.ndarray:
        return self._counts[:-1].copy()

    @property
    def background(self) -> int:
        return int(self._counts[-1])

    def contents(self) -> list[int]:
        return list(self._fifo)


def _formula(counts, background, p):
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (total / counts) ** p
        w_bg = (total / background) ** p if background > 0 else np.nan
    return w, float(w_bg)


def weights_from_counts(counts: Sequence[float], background: float, p: float,
                        fallback: WeightVector | None = None, kind: str = "static") -> WeightVector:
    """Apply the weight formula; classes without samples take the fallback weight (or 1)."""
    counts = np.asarray(counts, dtype=np.float64)
    w, w_bg = _formula(counts, background, p)
    if p == 0:
        w, w_bg = np.ones_like(counts), 1.0
    fb = fallback.weights if fallback is not None else np.ones_like(counts)
    fb_bg = fallback.background if fallback is not None else 1.0
    total = counts.sum()
    empty = (counts <= 0) | (total <= 0)
    w = np.where(empty, fb, w)
    if background <= 0 or total <= 0:
        w_bg = fb_bg
    return WeightVector(w, float(w_bg), p, kind)


def dynamic_weights(queue: ClassCountQueue, p: float, fallback: WeightVector | None = None) -> WeightVector:
    if queue.fill == 0:
        raise ValueError("cannot compute dynamic weights from an empty queue")
    return weights_from_counts(queue.counts, queue.background, p, fallback, kind="dynamic")


def smoothing_factor(n: int) -> float:
    return min(0.999 ** n, 0.9)


def blend(w_static: WeightVector, w_dynamic: WeightVector, n: int) -> WeightVector:
    """``gamma * static + (1 - gamma) * dynamic`` with ``gamma = min(0.999**n, 0.9)``."""
    if len(w_static) != len(w_dynamic):
        raise ValueError(f"weight vectors differ in length: {len(w_static)} vs {len(w_dynamic)}")
    g = smoothing_factor(n)
    return WeightVector(g * w_static.weights + (1 - g) * w_dynamic.weights,
                        g * w_static.background + (1 - g) * w_dynamic.background,
                        w_dynamic.p, "blended")


def dataset_counts(dataset: HoiDataset, kind: str, num_queries: int):
    """Whole-dataset positive counts and background count for ``kind`` in {"object", "action"}.

    Background samples are the queries left unmatched, ``num_queries - #GT`` per image.
    """
    if kind == "object":
        counts = np.zeros(dataset.num_object_classes, dtype=np.int64)
    elif kind == "action":
        counts = np.zeros(dataset.num_action_classes, dtype=np.int64)
    else:
        raise ValueError(f"kind must be 'object' or 'action', got {kind!r}")
    background = 0
    for rec in dataset.images:
        for h in rec.hois:
            if kind == "object":
                counts[h.object_class] += 1
            else:
                for a in h.actions:
                    counts[a] += 1
        background += max(num_queries - len(rec.hois), 0)
    return counts, background


def static_weights(dataset: HoiDataset, p: float, kind: str, num_queries: int) -> WeightVector:
    if not dataset.images:
        raise ValueError("static weights need a non-empty dataset")
    counts, background = dataset_counts(dataset, kind, num_queries)
    return weights_from_counts(counts, background, p, kind="static")


class DynamicReweighter:
    """Keeps the object and action queues and produces blended weights every iteration."""

    def __init__(self, dataset: HoiDataset, num_queries: int, p_o: float, p_a: float,
                 capacity_o: int | None = None, capacity_a: int | None = None,
                 reweight_objects: bool = True, reweight_actions: bool = True,
                 gamma_mode: str = "fill"):
        self.num_queries = num_queries
        self.gamma_mode = gamma_mode
        self.reweight_objects = reweight_objects
        self.reweight_actions = reweight_actions
        self.p_o, self.p_a = p_o, p_a
        obj_counts, obj_bg = dataset_counts(dataset, "object", num_queries)
        act_counts, act_bg = dataset_counts(dataset, "action", num_queries)
        # default window: two passes over the training samples
        cap_o = capacity_o or 2 * int(obj_counts.sum() + obj_bg)
        cap_a = capacity_a or 2 * int(act_counts.sum() + act_bg)
        self.object_queue = ClassCountQueue(dataset.num_object_classes, cap_o)
        self.action_queue = ClassCountQueue(dataset.num_action_classes, cap_a)
        self.static_o = weights_from_counts(obj_counts, obj_bg, p_o)
        self.static_a = weights_from_counts(act_counts, act_bg, p_a)

    def _weights(self, queue, static, p):
        n = queue.fill if self.gamma_mode == "fill" else queue.capacity
        return blend(static, dynamic_weights(queue, p, fallback=static), n)

    def update(self, targets, assignments, dtype=torch.float32):
        """Push this iteration's samples and return ``(object_weights, action_weights)`` tensors."""
        obj_labels, act_labels, unmatched = [], [], 0
        for t, a in zip(targets, assignments):
            obj_labels += t.object_classes.tolist()
            act_labels += torch.nonzero(t.actions, as_tuple=True)[1].tolist()
            unmatched += a.num_queries - len(a.gt_to_query)
        self.object_queue.push(obj_labels, unmatched)
        self.action_queue.push(act_labels, unmatched)
        if self.reweight_objects:
            w_o = self._weights(self.object_queue, self.static_o, self.p_o)
        else:
            w_o = WeightVector.uniform(self.object_queue.num_classes)
        if self.reweight_actions:
            w_a = self._weights(self.action_queue, self.static_a, self.p_a)
        else:
            w_a = WeightVector.uniform(self.action_queue.num_classes)
        return w_o.as_tensor(dtype), w_a.as_tensor(dtype)
