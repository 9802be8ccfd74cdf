"""Default boxes, IoU and box-offset coding.

All coordinates are normalized to the unit image square. Box arrays use
center form ``(cx, cy, w, h)`` unless a name says ``corners`` (``xmin,
ymin, xmax, ymax``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoxGeom:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive width and height, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, xmin, ymin, xmax, ymax) -> "BoxGeom":
        return cls((xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin)

    @property
    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class LayerSpec:
    grid_h: int
    grid_w: int
    scale: float
    aspect_ratios: tuple = (1.0, 2.0, 0.5)
    # scale of the optional extra square box sqrt(s_k * s_{k+1}); None disables it
    extra_scale: float | None = None

    @property
    def boxes_per_cell(self) -> int:
        return len(self.aspect_ratios) + (self.extra_scale is not None)

    def to_dict(self) -> dict:
        return {"grid_h": self.grid_h, "grid_w": self.grid_w, "scale": self.scale,
                "aspect_ratios": list(self.aspect_ratios), "extra_scale": self.extra_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(int(d["grid_h"]), int(d["grid_w"]), float(d["scale"]),
                   tuple(float(a) for a in d["aspect_ratios"]), d.get("extra_scale"))


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray               # [A, 4] center form
    layer: np.ndarray               # [A] feature-layer index
    row: np.ndarray                 # [A]
    col: np.ndarray                 # [A]
    ratio_index: np.ndarray         # [A]; len(aspect_ratios) marks the extra box
    layer_specs: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.boxes)

    @property
    def corners(self) -> np.ndarray:
        return center_to_corners(self.boxes)

    def box(self, i: int) -> BoxGeom:
        return BoxGeom(*map(float, self.boxes[i]))


def linear_scales(n_layers: int, s_min: float = 0.2, s_max: float = 0.9) -> list:
    if n_layers == 1:
        return [s_min]
    return [s_min + (s_max - s_min) * k / (n_layers - 1) for k in range(n_layers)]


def make_layer_specs(grids: Sequence[int], aspect_ratios=(1.0, 2.0, 0.5), s_min: float = 0.2,
                     s_max: float = 0.9, extra_box: bool = False) -> list:
    """Square-grid layer specs with linearly spaced scales."""
    scales = linear_scales(len(grids), s_min, s_max)
    specs = []
    for k, g in enumerate(grids):
        extra = None
        if extra_box:
            nxt = scales[k + 1] if k + 1 < len(scales) else 1.0
            extra = math.sqrt(scales[k] * nxt)
        specs.append(LayerSpec(int(g), int(g), scales[k], tuple(float(a) for a in aspect_ratios), extra))
    return specs


def generate_default_boxes(layer_specs: Sequence[LayerSpec]) -> DefaultBoxSet:
    """Boxes ordered layer-major, then row, col, aspect ratio."""
    if not layer_specs:
        raise ValueError("generate_default_boxes needs at least one layer spec")
    boxes, layer, rows, cols, ratios = [], [], [], [], []
    for li, spec in enumerate(layer_specs):
        if spec.grid_h < 1 or spec.grid_w < 1:
            raise ValueError(f"layer {li}: grid size must be >= 1, got {spec.grid_h}x{spec.grid_w}")
        if not 0 < spec.scale <= 1:
            raise ValueError(f"layer {li}: scale must be in (0, 1], got {spec.scale}")
        if any(a <= 0 for a in spec.aspect_ratios):
            raise ValueError(f"layer {li}: aspect ratios must be positive, got {spec.aspect_ratios}")
        shapes = [(spec.scale * math.sqrt(a), spec.scale / math.sqrt(a)) for a in spec.aspect_ratios]
        if spec.extra_scale is not None:
            shapes.append((spec.extra_scale, spec.extra_scale))
        for r in range(spec.grid_h):
            cy = (r + 0.5) / spec.grid_h
            for c in range(spec.grid_w):
                cx = (c + 0.5) / spec.grid_w
                for ai, (w, h) in enumerate(shapes):
                    boxes.append((cx, cy, w, h))
                    layer.append(li)
                    rows.append(r)
                    cols.append(c)
                    ratios.append(ai)
    return DefaultBoxSet(
        np.asarray(boxes, dtype=np.float64),
        np.asarray(layer, dtype=np.intp),
        np.asarray(rows, dtype=np.intp),
        np.asarray(cols, dtype=np.intp),
        np.asarray(ratios, dtype=np.intp),
        tuple(layer_specs),
    )


def center_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def corners_to_center(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def iou(a: BoxGeom, b: BoxGeom) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners too, so iou(a, a) is exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return min(inter / union, 1.0)


def iou_matrix(a_corners: np.ndarray, b_corners: np.ndarray) -> np.ndarray:
    """Pairwise IoU, ``[len(a), len(b)]``."""
    a = np.asarray(a_corners, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_corners, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0), 1.0)


def _center(x) -> np.ndarray:
    return x.as_array() if isinstance(x, BoxGeom) else np.asarray(x, dtype=np.float64)


def encode_offsets(gt, default) -> np.ndarray:
    """Regression target of ``gt`` relative to ``default`` (center form or BoxGeom)."""
    g, d = _center(gt), _center(default)
    if np.any(g[..., 2:] <= 0) or np.any(d[..., 2:] <= 0):
        raise ValueError("encode_offsets needs boxes with positive width and height")
    return np.concatenate([(g[..., :2] - d[..., :2]) / d[..., 2:], np.log(g[..., 2:] / d[..., 2:])], axis=-1)


def decode_offsets(t, default, clamp: bool = True):
    """Inverse of :func:`encode_offsets`; corners are clamped to [0, 1] when
    ``clamp`` is set. Returns a BoxGeom when ``default`` is one."""
    t = np.asarray(t, dtype=np.float64)
    d = _center(default)
    with np.errstate(over="ignore"):
        wh = d[..., 2:] * np.exp(t[..., 2:])
    c = np.concatenate([d[..., :2] + t[..., :2] * d[..., 2:], wh], axis=-1)
    if clamp:
        corners = center_to_corners(c)
        clipped = np.clip(corners, 0.0, 1.0)
        # only rewrite boxes that actually crossed the border, so in-bounds
        # boxes keep their exact center-form values
        moved = np.any(clipped != corners, axis=-1, keepdims=True)
        c = np.where(moved, corners_to_center(clipped), c)
    if isinstance(default, BoxGeom):
        return BoxGeom(*map(float, c))
    return c
