"""Single-shot detector with class, box-offset and pose-bin heads."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .anchors import DefaultBoxSet, LayerSpec, generate_default_boxes
from .targets import SEPARATE, SHARE, BatchTargets, LossBreakdown, total_loss


class NonFiniteError(FloatingPointError):
    """A loss term or gradient became NaN/Inf."""


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int
    n_pose_bins: int
    pose_sharing: str = SHARE
    boxes_per_cell: tuple = (3, 3)

    def __post_init__(self):
        if self.pose_sharing not in (SHARE, SEPARATE):
            raise ValueError(f"pose_sharing must be {SHARE!r} or {SEPARATE!r}, got {self.pose_sharing!r}")
        if self.n_classes < 1 or self.n_pose_bins < 1:
            raise ValueError("n_classes and n_pose_bins must be positive")

    @property
    def pose_outputs(self) -> int:
        return self.n_pose_bins if self.pose_sharing == SHARE else self.n_classes * self.n_pose_bins

    @property
    def channels_per_box(self) -> int:
        return (self.n_classes + 1) + 4 + self.pose_outputs

    def channels_per_cell(self, layer: int) -> int:
        return self.boxes_per_cell[layer] * self.channels_per_box

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "n_pose_bins": self.n_pose_bins,
                "pose_sharing": self.pose_sharing, "boxes_per_cell": list(self.boxes_per_cell)}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(int(d["n_classes"]), int(d["n_pose_bins"]), d["pose_sharing"], tuple(d["boxes_per_cell"]))


@dataclass(frozen=True)
class NetworkSpec:
    """Backbone plan.

    ``channels`` are 3x3 conv stages with a 2x2 max-pool between consecutive
    stages; the last stage feeds the first prediction layer. Each entry of
    ``extra_channels`` adds a prediction layer: 1x1 reduction to half width,
    max-pool, 3x3 conv.
    """
    input_size: int = 64
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 64)
    extra_channels: tuple = (64,)

    def grid_sizes(self) -> list:
        g = self.input_size
        for _ in range(len(self.channels) - 1):
            if g % 2:
                raise ValueError(f"input size {self.input_size} does not halve evenly through the backbone")
            g //= 2
        sizes = [g]
        for _ in self.extra_channels:
            if g % 2:
                raise ValueError(f"feature map of size {g} cannot be pooled for an extra prediction layer")
            g //= 2
            sizes.append(g)
        return sizes

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "in_channels": self.in_channels,
                "channels": list(self.channels), "extra_channels": list(self.extra_channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["input_size"]), int(d["in_channels"]), tuple(d["channels"]), tuple(d["extra_channels"]))


@dataclass
class Predictions:
    cls: nn.Tensor    # [B, A, n_classes+1]
    loc: nn.Tensor    # [B, A, 4]
    pose: nn.Tensor   # [B, A, P]


@dataclass
class Detector:
    spec: NetworkSpec
    head: HeadConfig
    layer_specs: tuple
    params: "OrderedDict[str, nn.Tensor]"
    seed: int = 0
    defaults: DefaultBoxSet = field(init=False, repr=False)

    def __post_init__(self):
        self.defaults = generate_default_boxes(self.layer_specs)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_boxes(self) -> int:
        return len(self.defaults)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, images) -> Predictions:
        x = np.asarray(images.data if isinstance(images, nn.Tensor) else images)
        if x.ndim == 3:
            x = x[None]
        want = (self.spec.in_channels, self.spec.input_size, self.spec.input_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"detector expects images [B, {want[0]}, {want[1]}, {want[2]}], got {x.shape}")
        P = self.params
        h = nn.Tensor(x.astype(self.dtype, copy=False))
        features = []
        for i in range(len(self.spec.channels)):
            if i:
                h = nn.max_pool2(h)
            h = nn.relu(nn.conv2d(h, P[f"backbone.{i}.weight"], P[f"backbone.{i}.bias"], padding=1))
        features.append(h)
        for i in range(len(self.spec.extra_channels)):
            h = nn.relu(nn.conv2d(h, P[f"extra.{i}.reduce.weight"], P[f"extra.{i}.reduce.bias"]))
            h = nn.max_pool2(h)
            h = nn.relu(nn.conv2d(h, P[f"extra.{i}.conv.weight"], P[f"extra.{i}.conv.bias"], padding=1))
            features.append(h)

        B = x.shape[0]
        outs = {"cls": [], "loc": [], "pose": []}
        width = {"cls": self.head.n_classes + 1, "loc": 4, "pose": self.head.pose_outputs}
        for li, f in enumerate(features):
            for kind in ("cls", "loc", "pose"):
                y = nn.conv2d(f, P[f"head.{li}.{kind}.weight"], P[f"head.{li}.{kind}.bias"], padding=1)
                # [B, A*k, H, W] -> [B, H, W, A*k] -> [B, H*W*A, k]: row, col, ratio order
                y = nn.transpose(y, (0, 2, 3, 1))
                outs[kind].append(nn.reshape(y, (B, -1, width[kind])))
        return Predictions(*(nn.concat(outs[k], axis=1) if len(outs[k]) > 1 else outs[k][0]
                             for k in ("cls", "loc", "pose")))

    def loss(self, images, targets: BatchTargets, alpha1=1.0, alpha2=1.5, neg_pos_ratio=3.0,
             negatives=None) -> LossBreakdown:
        pred = self.forward(images)
        return total_loss(pred.cls, pred.loc, pred.pose, targets, self.head.n_classes,
                          self.head.n_pose_bins, self.head.pose_sharing, alpha1, alpha2,
                          neg_pos_ratio, negatives)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _param_shapes(spec: NetworkSpec, head: HeadConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    cin = spec.in_channels
    for i, c in enumerate(spec.channels):
        shapes[f"backbone.{i}.weight"] = (c, cin, 3, 3)
        shapes[f"backbone.{i}.bias"] = (c,)
        cin = c
    feat_channels = [cin]
    for i, c in enumerate(spec.extra_channels):
        r = max(cin // 2, 1)
        shapes[f"extra.{i}.reduce.weight"] = (r, cin, 1, 1)
        shapes[f"extra.{i}.reduce.bias"] = (r,)
        shapes[f"extra.{i}.conv.weight"] = (c, r, 3, 3)
        shapes[f"extra.{i}.conv.bias"] = (c,)
        cin = c
        feat_channels.append(c)
    width = {"cls": head.n_classes + 1, "loc": 4, "pose": head.pose_outputs}
    for li, fc in enumerate(feat_channels):
        a = head.boxes_per_cell[li]
        for kind in ("cls", "loc", "pose"):
            shapes[f"head.{li}.{kind}.weight"] = (a * width[kind], fc, 3, 3)
            shapes[f"head.{li}.{kind}.bias"] = (a * width[kind],)
    return shapes


def build(spec: NetworkSpec, head: HeadConfig, layer_specs: Sequence[LayerSpec], seed: int = 0,
          dtype=np.float32) -> Detector:
    """Create a detector with He (fan-in) initialization.

    Each parameter draws from its own stream keyed by ``(seed, name)``, so
    the class and box heads are identical between share and separate
    models built with the same seed.
    """
    layer_specs = tuple(layer_specs)
    grids = spec.grid_sizes()
    if len(grids) != len(layer_specs):
        raise ValueError(f"network has {len(grids)} prediction layers but {len(layer_specs)} anchor layers are configured")
    for li, (g, ls) in enumerate(zip(grids, layer_specs)):
        if (ls.grid_h, ls.grid_w) != (g, g):
            raise ValueError(f"prediction layer {li} is {g}x{g} but anchor layer expects {ls.grid_h}x{ls.grid_w}")
        if ls.boxes_per_cell != head.boxes_per_cell[li]:
            raise ValueError(f"layer {li}: head has {head.boxes_per_cell[li]} boxes per cell, anchors have {ls.boxes_per_cell}")
    if len(head.boxes_per_cell) != len(layer_specs):
        raise ValueError("head.boxes_per_cell must list one entry per prediction layer")
    params = OrderedDict()
    for name, shape in _param_shapes(spec, head).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = nn.Tensor(data.astype(dtype), requires_grad=True, name=name)
    return Detector(spec, head, layer_specs, params, seed)


@dataclass
class SGD:
    """SGD with momentum and L2 weight decay:
    ``v = m*v + (g + wd*w); w -= lr*v``."""
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def step(self, params: "OrderedDict[str, nn.Tensor]", lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(p.dtype, copy=False)
            p.data = (p.data - np.asarray(lr, dtype=p.dtype) * self.velocity[name]).astype(p.dtype, copy=False)


def train_step(net: Detector, images, targets: BatchTargets, opt: SGD, alpha1=1.0, alpha2=1.5,
               neg_pos_ratio=3.0, lr: Optional[float] = None) -> LossBreakdown:
    """One forward/backward/update. Batches with no matched box are skipped
    (returned breakdown has ``skip=True``; parameters untouched)."""
    net.zero_grad()
    # overflow is reported below as NonFiniteError, not as numpy warnings
    with nn.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
        out = net.loss(images, targets, alpha1, alpha2, neg_pos_ratio)
        if out.skip:
            return out
        for term in ("l_cls", "l_loc", "l_pose", "l_total"):
            if not np.isfinite(getattr(out, term)):
                raise NonFiniteError(f"non-finite loss term {term}={getattr(out, term)} "
                                     f"(l_cls={out.l_cls}, l_loc={out.l_loc}, l_pose={out.l_pose}, N={out.n_matched})")
        tape.backward(out.total)
    for name, p in net.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
    opt.step(net.params, lr)
    return out
