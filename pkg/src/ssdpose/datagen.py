"""Synthetic scenes of rotated sprites with boxes and azimuth labels.

Sprites are polygons without rotational symmetry, so the in-plane rotation
(azimuth, degrees counter-clockwise as seen on screen, 0 = pointing right)
is recoverable from pixels. Ground-truth boxes are the tight axis-aligned
bounds of the pixels each sprite touches.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import kernels
from .anchors import BoxGeom, iou_matrix
from .targets import GroundTruthObject

# canonical outlines in sprite units; longest side is 1, pointing along +x
SPRITES = {
    "arrow": np.array([(-0.5, -0.09), (0.08, -0.09), (0.08, -0.25), (0.5, 0.0),
                       (0.08, 0.25), (0.08, 0.09), (-0.5, 0.09)]),
    "wedge": np.array([(-0.5, -0.4), (0.5, 0.0), (-0.5, 0.4)]),
    "ell": np.array([(-0.5, -0.3), (0.5, -0.3), (0.5, -0.05), (-0.2, -0.05), (-0.2, 0.3), (-0.5, 0.3)]),
}
CLASS_NAMES = tuple(SPRITES)
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    n_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    scale_range: tuple = (0.2, 0.42)   # sprite length as a fraction of the canvas
    max_pair_iou: float = 0.3
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(SPRITES):
            raise ValueError(f"n_classes must be in 1..{len(SPRITES)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


def sprite_polygon(class_id: int, azimuth: float, length_px: float, center=(0.0, 0.0)) -> np.ndarray:
    """Pixel-space outline of a sprite rotated counter-clockwise on screen."""
    pts = SPRITES[CLASS_NAMES[class_id]] * length_px
    t = math.radians(azimuth)
    c, s = math.cos(t), math.sin(t)
    # y grows downward, so a visual CCW turn maps (x, y) -> (x c + y s, -x s + y c)
    x = pts[:, 0] * c + pts[:, 1] * s
    y = -pts[:, 0] * s + pts[:, 1] * c
    return np.stack([x + center[0], y + center[1]], axis=1)


def render_sprite(class_id: int, azimuth: float, length_px: float, center, canvas: int) -> np.ndarray:
    """Anti-aliased coverage map ``[canvas, canvas]`` in [0, 1]."""
    poly = sprite_polygon(class_id, azimuth, length_px, center)
    return kernels.polygon_coverage(poly, canvas, canvas, SUPERSAMPLE)


def tight_box(coverage: np.ndarray):
    """Pixel bounds ``(x0, y0, x1, y1)`` (exclusive ends) of nonzero coverage, or None."""
    rows = np.flatnonzero(coverage.any(axis=1))
    cols = np.flatnonzero(coverage.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def generate_image(spec: SceneSpec, index: int):
    """Render scene ``index``; returns ``(uint8 image [H, W], objects)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.canvas
    base = rng.uniform(0.05, 0.35)
    canvas = np.full((n, n), base)
    objects: list = []
    placed = np.zeros((0, 4))
    for _ in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        cls = int(rng.integers(spec.n_classes))
        az = float(rng.uniform(0.0, 360.0))
        length = float(rng.uniform(*spec.scale_range)) * n
        shade = float(rng.uniform(0.65, 1.0))
        # extent of the rotated sprite around its center decides the legal centers
        local = sprite_polygon(cls, az, length)
        lo, hi = local.min(axis=0), local.max(axis=0)
        if np.any(hi - lo + 2 > n):
            continue  # cannot fit inside the canvas at any position
        for _attempt in range(100):
            cx = rng.uniform(-lo[0] + 1, n - hi[0] - 1)
            cy = rng.uniform(-lo[1] + 1, n - hi[1] - 1)
            cov = render_sprite(cls, az, length, (cx, cy), n)
            bounds = tight_box(cov)
            if bounds is None:
                continue
            corners = np.array(bounds, dtype=np.float64) / n
            if len(placed) and iou_matrix(corners, placed).max() > spec.max_pair_iou:
                continue
            canvas = canvas * (1 - cov) + shade * cov
            placed = np.vstack([placed, corners])
            objects.append(GroundTruthObject(cls, BoxGeom.from_corners(*corners), az))
            break
    canvas = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
    return np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8), objects


def generate_dataset(spec: SceneSpec, count: int, out_dir=None):
    """Generate ``count`` scenes; optionally write them as a dataset directory.

    Returns ``(images uint8 [count, H, W], objects per image)``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    images, objects = [], []
    for i in range(count):
        img, objs = generate_image(spec, i)
        images.append(img)
        objects.append(objs)
    images = np.stack(images)
    if out_dir is not None:
        write_dataset(out_dir, images, objects, spec)
    return images, objects


# --- on-disk layout -------------------------------------------------------

MANIFEST = "manifest.txt"
IMAGE_DIR = "images"


@dataclass
class Dataset:
    root: Path
    names: list
    images: np.ndarray        # uint8 [N, H, W]
    objects: list             # list of list[GroundTruthObject]

    def __len__(self):
        return len(self.names)

    def as_float(self) -> np.ndarray:
        """``[N, 1, H, W]`` float32 in [0, 1]."""
        return (self.images.astype(np.float32) / 255.0)[:, None]

    def ground_truth(self) -> dict:
        return dict(zip(self.names, self.objects))


def format_manifest_line(name: str, objs: Sequence[GroundTruthObject]) -> str:
    fields = [name]
    for o in objs:
        fields += [str(o.class_id), *(repr(float(v)) for v in o.box.corners), repr(float(o.azimuth))]
    return " ".join(fields)


def parse_manifest_line(line: str):
    parts = line.split()
    if not parts or (len(parts) - 1) % 6:
        raise ValueError(f"malformed manifest line: {line!r}")
    objs = []
    for k in range(1, len(parts), 6):
        cls = int(parts[k])
        x0, y0, x1, y1, az = map(float, parts[k + 1:k + 6])
        objs.append(GroundTruthObject(cls, BoxGeom.from_corners(x0, y0, x1, y1), az))
    return parts[0], objs


def write_dataset(out_dir, images: np.ndarray, objects: Sequence[Sequence[GroundTruthObject]], spec=None):
    root = Path(out_dir)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, objs) in enumerate(zip(images, objects)):
        name = f"{IMAGE_DIR}/{i:06d}.png"
        Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(root / name)
        lines.append(format_manifest_line(name, objs))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    if spec is not None:
        (root / "scene.json").write_text(json.dumps(asdict(spec), sort_keys=True) + "\n")


def read_manifest(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            out.append(parse_manifest_line(line))
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    entries = read_manifest(root)
    imgs = [np.asarray(Image.open(root / name).convert("L")) for name, _ in entries]
    return Dataset(root, [n for n, _ in entries], np.stack(imgs), [o for _, o in entries])
