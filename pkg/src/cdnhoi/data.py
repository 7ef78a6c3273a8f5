"""Synthetic HOI scenes and the annotation / prediction / class-table file formats.

File formats are line-delimited JSON. The first line of every ``.jsonl`` file is a
header carrying the vocabulary sizes; every following line is one record.

annotations.jsonl::

    {"format": "cdnhoi-annotations", "version": 1, "num_object_classes": 3, "num_action_classes": 4}
    {"image_id": "000000", "file_name": "images/000000.png", "width": 64, "height": 64,
     "hois": [{"human_box": [x1, y1, x2, y2], "object_box": [...], "object_class": 2, "actions": [1]}]}

predictions.jsonl (one record per scored triplet)::

    {"format": "cdnhoi-predictions", "version": 1, "num_object_classes": 3, "num_action_classes": 4}
    {"image_id": "000000", "human_box": [...], "object_box": [...], "object_class": 2, "action": 1,
     "score": 0.72, "action_score": 0.9, "object_score": 0.95, "interactive_score": 0.84}

classes.json holds the HOI class table (see ``HoiClassTable.to_dict``).
Boxes in files are absolute pixel corners.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .boxes import Corners

ANNOTATION_FORMAT = "cdnhoi-annotations"
PREDICTION_FORMAT = "cdnhoi-predictions"
FORMAT_VERSION = 1
DEFAULT_RARE_THRESHOLD = 10


class AnnotationError(ValueError):
    """Malformed annotation, prediction or class-table file."""


@dataclass(frozen=True)
class HoiInstance:
    """Ground-truth triplet: a human, an object of ``object_class`` and one or more actions."""

    human_box: Corners
    object_box: Corners
    object_class: int
    actions: tuple[int, ...]

    def validate(self, num_objects: int, num_actions: int):
        if not 0 <= self.object_class < num_objects:
            raise ValueError(f"object_class {self.object_class} outside [0, {num_objects})")
        if not self.actions:
            raise ValueError("ground truth needs at least one action")
        for a in self.actions:
            if not 0 <= a < num_actions:
                raise ValueError(f"action {a} outside [0, {num_actions})")


@dataclass(frozen=True)
class ScoredTriplet:
    """One detected <human, object, action> with its score components.

    The triplet score is always the product of the three components.
    """

    human_box: Corners
    object_box: Corners
    object_class: int
    action: int
    action_score: float
    object_score: float
    interactive_score: float
    image_id: str = ""
    query: int = -1

    @property
    def score(self) -> float:
        return self.action_score * self.object_score * self.interactive_score


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    hois: list[HoiInstance]
    file_name: str = ""


@dataclass
class HoiDataset:
    num_object_classes: int
    num_action_classes: int
    images: list[ImageRecord]

    def __len__(self):
        return len(self.images)

    def hoi_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for rec in self.images:
            for hoi in rec.hois:
                for a in hoi.actions:
                    key = (hoi.object_class, a)
                    counts[key] = counts.get(key, 0) + 1
        return counts


@dataclass
class HoiClassTable:
    """HOI classes (object, action) with training-instance counts and the rare split."""

    classes: list[tuple[int, int]]
    counts: list[int]
    rare_threshold: int = DEFAULT_RARE_THRESHOLD

    @property
    def rare(self) -> list[bool]:
        return [c < self.rare_threshold for c in self.counts]

    @property
    def num_object_classes(self) -> int:
        return 1 + max(o for o, _ in self.classes)

    @property
    def num_action_classes(self) -> int:
        return 1 + max(a for _, a in self.classes)

    def index(self) -> dict[tuple[int, int], int]:
        return {c: i for i, c in enumerate(self.classes)}

    @classmethod
    def from_dataset(cls, dataset: HoiDataset, rare_threshold: int = DEFAULT_RARE_THRESHOLD):
        counts = dataset.hoi_counts()
        classes = [(o, a) for a in range(dataset.num_action_classes)
                   for o in range(dataset.num_object_classes)]
        return cls(classes, [counts.get(c, 0) for c in classes], rare_threshold)

    def to_dict(self) -> dict:
        return {
            "rare_threshold": self.rare_threshold,
            "classes": [{"object_class": o, "action": a, "count": n, "rare": r}
                        for (o, a), n, r in zip(self.classes, self.counts, self.rare)],
        }

    @classmethod
    def from_dict(cls, d: dict, source: str = "<dict>"):
        try:
            threshold = int(d["rare_threshold"])
            classes, counts = [], []
            for i, entry in enumerate(d["classes"]):
                classes.append((int(entry["object_class"]), int(entry["action"])))
                counts.append(int(entry["count"]))
                if "rare" in entry and bool(entry["rare"]) != (counts[-1] < threshold):
                    raise AnnotationError(f"{source}: class {i}: field 'rare' disagrees with count")
        except (KeyError, TypeError) as e:
            raise AnnotationError(f"{source}: malformed class table ({e!r})") from e
        return cls(classes, counts, threshold)


def save_class_table(path, table: HoiClassTable):
    Path(path).write_text(json.dumps(table.to_dict(), indent=1) + "\n")


def load_class_table(path) -> HoiClassTable:
    return HoiClassTable.from_dict(json.loads(Path(path).read_text()), source=str(path))


# --- synthetic scene generation ------------------------------------------------------

# unit offsets of the object relative to the human; one per direction
_DIRECTIONS = [(1, 0), (-1, 0), (0, -1), (0, 1), (1, -1), (-1, -1), (1, 1), (-1, 1)]
# each direction comes in an "adjacent" (gap) and an "overlapping" (straddles the edge) variant
NUM_PATTERNS = 2 * len(_DIRECTIONS)

_PALETTE = [(230, 60, 50), (60, 200, 80), (70, 110, 240), (240, 210, 40),
            (200, 70, 220), (40, 210, 210), (250, 140, 30), (150, 150, 150)]
_HUMAN_COLOR = np.array([235, 205, 170], dtype=np.float32)
_HUMAN_EDGE = np.array([120, 80, 60], dtype=np.float32)
_SHAPES = ("ellipse", "triangle", "frame", "diamond", "cross")


@dataclass
class SceneSpec:
    num_images: int = 32
    image_size: int = 64
    num_object_classes: int = 3
    num_action_classes: int = 4
    pairs_per_image: tuple[int, int] = (1, 2)
    class_skew: float = 0.0
    class_shapes: bool = True
    rare_threshold: int = DEFAULT_RARE_THRESHOLD

    def validate(self):
        if self.num_object_classes < 1 or self.num_action_classes < 1:
            raise ValueError("need at least one object class and one action class")
        lo, hi = self.pairs_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"pairs_per_image must satisfy 1 <= min <= max, got {self.pairs_per_image}")
        if self.class_skew < 0:
            raise ValueError("class_skew must be >= 0")
        if self.num_action_classes > NUM_PATTERNS:
            raise ValueError(f"only {NUM_PATTERNS} distinct geometric action patterns exist, "
                             f"{self.num_action_classes} action classes requested")
        if self.image_size < 48:
            raise ValueError("image_size must be at least 48 pixels")

    @classmethod
    def from_dict(cls, d: dict):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        d = dict(d)
        if "pairs_per_image" in d:
            d["pairs_per_image"] = tuple(d["pairs_per_image"])
        return cls(**d)


def hoi_class_probabilities(spec: SceneSpec) -> np.ndarray:
    """Zipf-like probabilities over HOI classes, ordered action-major.

    Class ``r = action * C_o + object`` gets weight ``(r + 1) ** -class_skew``, so both
    action and object marginals decrease with their index.
    """
    n = spec.num_object_classes * spec.num_action_classes
    w = (np.arange(n, dtype=np.float64) + 1.0) ** (-spec.class_skew)
    return w / w.sum()


def _place_pair(rng: np.random.Generator, size: int, action: int):
    hw, hh = int(rng.integers(10, 17)), int(rng.integers(18, 27))
    ow, oh = int(rng.integers(10, 17)), int(rng.integers(10, 17))
    dx, dy = _DIRECTIONS[action % len(_DIRECTIONS)]
    overlapping = action >= len(_DIRECTIONS)
    hx1 = int(rng.integers(0, size - hw + 1))
    hy1 = int(rng.integers(0, size - hh + 1))
    hcx2, hcy2 = 2 * hx1 + hw, 2 * hy1 + hh  # doubled centers keep everything integral
    gap = 0 if overlapping else int(rng.integers(1, 4))
    if overlapping:
        ocx2 = hcx2 + dx * hw
        ocy2 = hcy2 + dy * hh
    else:
        ocx2 = hcx2 + dx * (hw + ow + 2 * gap)
        ocy2 = hcy2 + dy * (hh + oh + 2 * gap)
    ox1 = (ocx2 - ow) // 2
    oy1 = (ocy2 - oh) // 2
    human = (hx1, hy1, hx1 + hw, hy1 + hh)
    obj = (ox1, oy1, ox1 + ow, oy1 + oh)
    return human, obj


def _inside(b, size):
    return b[0] >= 0 and b[1] >= 0 and b[2] <= size and b[3] <= size


def _intersects(a, b):
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def _shape_mask(shape: str, box, xs, ys):
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rw, rh = (x2 - x1) / 2, (y2 - y1) / 2
    inside = (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if shape == "box":
        return inside
    if shape == "ellipse":
        return ((xs - cx) / rw) ** 2 + ((ys - cy) / rh) ** 2 <= 1.0
    if shape == "triangle":
        return inside & (np.abs(xs - cx) <= (ys - y1) / (y2 - y1) * rw + 0.5)
    if shape == "frame":
        inner = (xs >= x1 + 3) & (xs < x2 - 3) & (ys >= y1 + 3) & (ys < y2 - 3)
        return inside & ~inner
    if shape == "diamond":
        return np.abs(xs - cx) / rw + np.abs(ys - cy) / rh <= 1.0
    if shape == "cross":
        return inside & ((np.abs(xs - cx) <= rw / 3) | (np.abs(ys - cy) <= rh / 3))
    raise ValueError(shape)


def render_scene(size: int, hois: Sequence[HoiInstance], rng: np.random.Generator,
                 class_shapes: bool = True) -> np.ndarray:
    """Rasterize humans and objects into an ``(size, size, 3)`` uint8 image."""
    img = np.full((size, size, 3), 24.0, dtype=np.float32)
    img += rng.uniform(0.0, 12.0, size=(size, size, 1)).astype(np.float32)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    for hoi in hois:
        h = hoi.human_box.as_tuple()
        body = _shape_mask("box", h, xs, ys)
        edge = body & ~_shape_mask("box", (h[0] + 2, h[1] + 2, h[2] - 2, h[3] - 2), xs, ys)
        img[body] = _HUMAN_COLOR
        img[edge] = _HUMAN_EDGE
    for hoi in hois:
        k = hoi.object_class
        shape = _SHAPES[k % len(_SHAPES)] if class_shapes else "box"
        color = np.array(_PALETTE[k % len(_PALETTE)], dtype=np.float32)
        if k >= len(_PALETTE):
            color = color * (0.6 + 0.4 * ((k // len(_PALETTE)) % 2))
        img[_shape_mask(shape, hoi.object_box.as_tuple(), xs, ys)] = color
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_dataset(spec: SceneSpec, seed: int):
    """Generate ``spec.num_images`` synthetic scenes.

    Returns ``(images, dataset, class_table)``; ``images`` is a list of uint8 arrays
    aligned with ``dataset.images``. The action of each pair is the geometric
    relation between its human and object boxes, so it is recoverable from pixels.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    probs = hoi_class_probabilities(spec)
    size = spec.image_size
    images, records = [], []
    for idx in range(spec.num_images):
        lo, hi = spec.pairs_per_image
        want = int(rng.integers(lo, hi + 1))
        placed: list[tuple] = []
        hois: list[HoiInstance] = []
        for p in range(want):
            r = int(rng.choice(len(probs), p=probs))
            action, obj = divmod(r, spec.num_object_classes)
            for _ in range(200):
                human, box = _place_pair(rng, size, action)
                if not (_inside(human, size) and _inside(box, size)):
                    continue
                if any(_intersects(human, b) or _intersects(box, b) for b in placed):
                    continue
                placed += [human, box]
                hois.append(HoiInstance(Corners(*map(float, human)), Corners(*map(float, box)),
                                        obj, (action,)))
                break
            else:
                if p == 0:
                    raise RuntimeError("could not place a pair; image_size too small")
        image_id = f"{idx:06d}"
        images.append(render_scene(size, hois, rng, spec.class_shapes))
        records.append(ImageRecord(image_id, size, size, hois, f"images/{image_id}.png"))
    dataset = HoiDataset(spec.num_object_classes, spec.num_action_classes, records)
    return images, dataset, HoiClassTable.from_dataset(dataset, spec.rare_threshold)


def write_dataset(out_dir, images, dataset: HoiDataset, table: HoiClassTable):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for img, rec in zip(images, dataset.images):
        Image.fromarray(img).save(out / rec.file_name)
    save_annotations(out / "annotations.jsonl", dataset)
    save_class_table(out / "classes.json", table)


def load_images(root, dataset: HoiDataset) -> list[np.ndarray]:
    root = Path(root)
    return [np.asarray(Image.open(root / rec.file_name).convert("RGB")) for rec in dataset.images]


# --- line-delimited record files -------------------------------------------------------

_HOI_FIELDS = {"human_box", "object_box", "object_class", "actions"}
_IMAGE_FIELDS = {"image_id", "file_name", "width", "height", "hois"}
_PRED_FIELDS = {"image_id", "human_box", "object_box", "object_class", "action", "score",
                "action_score", "object_score", "interactive_score"}
_HEADER_FIELDS = {"format", "version", "num_object_classes", "num_action_classes"}


def _header(fmt, num_objects, num_actions):
    return {"format": fmt, "version": FORMAT_VERSION,
            "num_object_classes": num_objects, "num_action_classes": num_actions}


def _dump(path, header, records: Iterable[dict]):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps(header) + "\n")
        for r in records:
            f.write(json.dumps(r) + "\n")
    os.replace(tmp, path)


class _Reader:
    def __init__(self, path, fmt):
        self.path = str(path)
        self.fmt = fmt

    def fail(self, line, field, msg):
        where = f"{self.path}:line {line}"
        if field:
            where += f": field '{field}'"
        raise AnnotationError(f"{where}: {msg}")

    def records(self):
        with open(self.path) as f:
            lines = [(i + 1, ln) for i, ln in enumerate(f) if ln.strip()]
        if not lines:
            self.fail(1, None, "missing header")
        records = []
        for lineno, ln in lines:
            try:
                rec = json.loads(ln)
            except json.JSONDecodeError as e:
                self.fail(lineno, None, f"invalid JSON ({e.msg})")
            if not isinstance(rec, dict):
                self.fail(lineno, None, "record is not an object")
            records.append((lineno, rec))
        lineno, header = records[0]
        self.check_fields(lineno, header, _HEADER_FIELDS)
        if header["format"] != self.fmt:
            self.fail(lineno, "format", f"expected {self.fmt!r}, got {header['format']!r}")
        if header["version"] != FORMAT_VERSION:
            self.fail(lineno, "version", f"unsupported version {header['version']!r}")
        self.num_objects = self.int_field(lineno, header, "num_object_classes", 1, None)
        self.num_actions = self.int_field(lineno, header, "num_action_classes", 1, None)
        return records[1:]

    def check_fields(self, lineno, rec, fields):
        unknown = set(rec) - fields
        if unknown:
            self.fail(lineno, sorted(unknown)[0], "unknown field")
        missing = fields - set(rec)
        if missing:
            self.fail(lineno, sorted(missing)[0], "missing field")

    def int_field(self, lineno, rec, name, lo, hi, value=None):
        v = rec[name] if value is None else value
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(lineno, name, f"expected integer, got {v!r}")
        if v < lo or (hi is not None and v >= hi):
            self.fail(lineno, name, f"value {v} outside [{lo}, {hi})")
        return v

    def number(self, lineno, name, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(lineno, name, f"expected finite number, got {v!r}")
        return float(v)

    def box(self, lineno, rec, name):
        v = rec[name]
        if not isinstance(v, list) or len(v) != 4:
            self.fail(lineno, name, "expected [x1, y1, x2, y2]")
        vals = [self.number(lineno, name, x) for x in v]
        try:
            return Corners(*vals)
        except ValueError as e:
            self.fail(lineno, name, str(e))


def save_annotations(path, dataset: HoiDataset):
    def rec(r: ImageRecord):
        return {"image_id": r.image_id, "file_name": r.file_name, "width": r.width, "height": r.height,
                "hois": [{"human_box": list(h.human_box.as_tuple()),
                          "object_box": list(h.object_box.as_tuple()),
                          "object_class": h.object_class, "actions": list(h.actions)}
                         for h in r.hois]}

    _dump(path, _header(ANNOTATION_FORMAT, dataset.num_object_classes, dataset.num_action_classes),
          (rec(r) for r in dataset.images))


def load_annotations(path) -> HoiDataset:
    reader = _Reader(path, ANNOTATION_FORMAT)
    images = []
    for lineno, rec in reader.records():
        reader.check_fields(lineno, rec, _IMAGE_FIELDS)
        if not isinstance(rec["image_id"], str):
            reader.fail(lineno, "image_id", "expected string")
        if not isinstance(rec["file_name"], str):
            reader.fail(lineno, "file_name", "expected string")
        width = reader.int_field(lineno, rec, "width", 1, None)
        height = reader.int_field(lineno, rec, "height", 1, None)
        if not isinstance(rec["hois"], list):
            reader.fail(lineno, "hois", "expected list")
        hois = []
        for j, h in enumerate(rec["hois"]):
            if not isinstance(h, dict):
                reader.fail(lineno, f"hois[{j}]", "expected object")
            reader.check_fields(lineno, h, _HOI_FIELDS)
            obj = reader.int_field(lineno, h, "object_class", 0, reader.num_objects)
            acts = h["actions"]
            if not isinstance(acts, list) or not acts:
                reader.fail(lineno, f"hois[{j}].actions", "expected non-empty list")
            acts = tuple(reader.int_field(lineno, h, f"hois[{j}].actions", 0, reader.num_actions, a)
                         for a in acts)
            hois.append(HoiInstance(reader.box(lineno, h, "human_box"),
                                    reader.box(lineno, h, "object_box"), obj, acts))
        images.append(ImageRecord(rec["image_id"], width, height, hois, rec["file_name"]))
    return HoiDataset(reader.num_objects, reader.num_actions, images)


def save_predictions(path, predictions: Sequence[ScoredTriplet], num_objects: int, num_actions: int):
    def rec(t: ScoredTriplet):
        return {"image_id": t.image_id, "human_box": list(t.human_box.as_tuple()),
                "object_box": list(t.object_box.as_tuple()), "object_class": t.object_class,
                "action": t.action, "score": t.score, "action_score": t.action_score,
                "object_score": t.object_score, "interactive_score": t.interactive_score}

    _dump(path, _header(PREDICTION_FORMAT, num_objects, num_actions), (rec(t) for t in predictions))


def load_predictions(path) -> tuple[list[ScoredTriplet], int, int]:
    """Return ``(triplets, num_object_classes, num_action_classes)``."""
    reader = _Reader(path, PREDICTION_FORMAT)
    out = []
    for lineno, rec in reader.records():
        reader.check_fields(lineno, rec, _PRED_FIELDS)
        if not isinstance(rec["image_id"], str):
            reader.fail(lineno, "image_id", "expected string")
        comps = {}
        for name in ("action_score", "object_score", "interactive_score"):
            v = reader.number(lineno, name, rec[name])
            if not 0.0 <= v <= 1.0:
                reader.fail(lineno, name, f"value {v} outside [0, 1]")
            comps[name] = v
        t = ScoredTriplet(reader.box(lineno, rec, "human_box"), reader.box(lineno, rec, "object_box"),
                          reader.int_field(lineno, rec, "object_class", 0, reader.num_objects),
                          reader.int_field(lineno, rec, "action", 0, reader.num_actions),
                          image_id=rec["image_id"], **comps)
        if reader.number(lineno, "score", rec["score"]) != t.score:
            reader.fail(lineno, "score", "score is not the product of its components")
        out.append(t)
    return out, reader.num_objects, reader.num_actions
