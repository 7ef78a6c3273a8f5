"""Box representations and overlap measures.

Two coordinate forms are used throughout the package:

* ``Box``: normalized ``(cx, cy, w, h)`` in ``[0, 1]``, the form the model predicts.
* ``Corners``: absolute ``(x1, y1, x2, y2)`` in pixels, the form stored in annotation
  and prediction files and used by evaluation.

Areas are plain ``(x2 - x1) * (y2 - y1)`` on continuous coordinates (no ``+1`` pixel
convention). Zero-area boxes are legal and overlap nothing.

The scalar functions ``iou``/``giou`` accept either form as long as both arguments
share a frame. The tensor functions at the bottom are the batched versions used by
the matcher and the loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch


@dataclass(frozen=True)
class Corners:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"corner box must satisfy x1<=x2, y1<=y2, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_box(self, img_w: float, img_h: float) -> "Box":
        """Normalize to center-size form relative to an ``img_w`` x ``img_h`` image."""
        _check_dims(img_w, img_h)
        w = self.x2 - self.x1
        h = self.y2 - self.y1
        return Box((self.x1 + 0.5 * w) / img_w, (self.y1 + 0.5 * h) / img_h, w / img_w, h / img_h)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be >= 0, got w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def corners(self) -> Corners:
        """Corner view in the same (normalized) frame."""
        return Corners(self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                       self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)

    def to_corners(self, img_w: float, img_h: float) -> Corners:
        return to_corners(self, img_w, img_h)


AnyBox = Union[Box, Corners]


def _check_dims(img_w, img_h):
    if not (img_w > 0 and img_h > 0):
        raise ValueError(f"image dimensions must be positive, got {img_w}x{img_h}")


def to_corners(b: Box, img_w: float, img_h: float) -> Corners:
    """Convert a normalized center-size box into absolute pixel corners."""
    _check_dims(img_w, img_h)
    cx, cy = b.cx * img_w, b.cy * img_h
    hw, hh = 0.5 * b.w * img_w, 0.5 * b.h * img_h
    return Corners(cx - hw, cy - hh, cx + hw, cy + hh)


def _xyxy(b: AnyBox) -> tuple[float, float, float, float]:
    if isinstance(b, Box):
        return b.corners().as_tuple()
    return b.as_tuple()


def _inter_union(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter, union


def iou(a: AnyBox, b: AnyBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter, union = _inter_union(_xyxy(a), _xyxy(b))
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: AnyBox, b: AnyBox) -> float:
    """Generalized IoU: ``iou - (enclosing - union) / enclosing``."""
    pa, pb = _xyxy(a), _xyxy(b)
    inter, union = _inter_union(pa, pb)
    enclose = (max(pa[2], pb[2]) - min(pa[0], pb[0])) * (max(pa[3], pb[3]) - min(pa[1], pb[1]))
    if enclose <= 0.0:
        # both boxes collapse onto the same point or line
        return 0.0
    overlap = inter / union if union > 0.0 else 0.0
    return overlap - (enclose - union) / enclose


# --- batched tensor versions -------------------------------------------------------

def box_cxcywh_to_xyxy(x: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(x: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = x.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _safe_div(num: torch.Tensor, den: torch.Tensor) -> torch.Tensor:
    # 0/0 -> 0 without poisoning gradients through the untaken branch
    positive = den > 0
    return torch.where(positive, num / torch.where(positive, den, torch.ones_like(den)),
                       torch.zeros_like(num))


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor):
    """IoU matrix ``[N, M]`` for xyxy boxes; also returns the union matrix."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return _safe_div(inter, union), union


def pairwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU matrix ``[N, M]`` for xyxy boxes."""
    overlap, union = pairwise_iou(boxes1, boxes2)
    lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclose = wh[..., 0] * wh[..., 1]
    return overlap - _safe_div(enclose - union, enclose)


def elementwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU between aligned rows of two ``[N, 4]`` xyxy tensors."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    lt = torch.max(boxes1[:, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    lt_c = torch.min(boxes1[:, :2], boxes2[:, :2])
    rb_c = torch.max(boxes1[:, 2:], boxes2[:, 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return _safe_div(inter, union) - _safe_div(enclose - union, enclose)
