"""Training loop with deterministic data order, logging and checkpoints.

Every source of randomness is derived from ``(seed, step)`` so a run resumed
from a checkpoint replays exactly what the uninterrupted run would do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, TextIO

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .datagen import Dataset
from .model import SGD, Detector, NonFiniteError, build, train_step
from .targets import BatchTargets, encode_targets, sample_patch

log = logging.getLogger(__name__)

_DATA_ORDER = 1
_AUGMENT = 2


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Dataset indices for ``step``: consecutive slices of per-epoch permutations."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs, offsets = np.divmod(pos, n)
    out = np.empty(batch_size, dtype=np.intp)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, _DATA_ORDER, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[offsets[sel]]
    return out


def lr_at(step: int, cfg: RunConfig) -> float:
    lr = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    if step >= int(cfg.lr_decay_at * cfg.steps):
        lr *= cfg.lr_decay
    return lr


def make_batch(images: np.ndarray, objects, idx, rng: np.random.Generator, cfg: RunConfig, defaults):
    """Sample patches for ``idx`` and encode their targets."""
    batch, targets = [], []
    for i in idx:
        img, gts = images[i], objects[i]
        if gts:
            img, gts, _ = sample_patch(img, gts, rng, cfg.sample_overlaps, cfg.crop_scale, cfg.crop_aspect)
        batch.append(img)
        targets.append(encode_targets(defaults, gts, cfg.n_bins, cfg.match_iou, cfg.force_match))
    return np.stack(batch), BatchTargets.stack(targets)


def format_record(step: int, out, lr: float) -> str:
    return (f"step={step} l_cls={out.l_cls!r} l_loc={out.l_loc!r} l_pose={out.l_pose!r} "
            f"l_total={out.l_total!r} n_matched={out.n_matched} lr={lr!r} skipped={int(out.skip)}")


def parse_log(path) -> list:
    """Metrics-log lines -> list of dicts (numbers converted)."""
    recs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rec = {}
        for kv in line.split():
            k, v = kv.split("=", 1)
            try:
                rec[k] = int(v)
            except ValueError:
                try:
                    rec[k] = float(v)
                except ValueError:
                    rec[k] = v
        recs.append(rec)
    return recs


@dataclass
class TrainResult:
    net: Detector
    optimizer: SGD
    step: int
    history: list = field(default_factory=list)


def train(cfg: RunConfig, data: Dataset, out_checkpoint=None, log_file: Optional[TextIO] = None,
          resume=None, stop_at: Optional[int] = None,
          on_step: Optional[Callable[[int, object], None]] = None) -> TrainResult:
    """Train for ``cfg.steps`` steps (or until ``stop_at``).

    ``resume`` is a checkpoint path or :class:`~ssdpose.checkpoint.Checkpoint`
    whose parameters, momentum and step are restored. A checkpoint is
    written every ``cfg.checkpoint_every`` steps and at the end; on a
    non-finite loss the error propagates and the last checkpoint on disk is
    left untouched.
    """
    images = data.as_float()
    if images.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"dataset images {images.shape[1:]} do not match config input "
                         f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    if resume is not None:
        ck = resume if isinstance(resume, ckpt_io.Checkpoint) else ckpt_io.load(resume)
        net = ck.detector()
        opt.velocity = {k: v.copy() for k, v in ck.velocity.items()}
        start = ck.step
    else:
        net = build(cfg.network_spec(), cfg.head_config(), cfg.layer_specs(), cfg.seed)
        start = 0
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    def save(step):
        if out_checkpoint is not None:
            ckpt_io.save(ckpt_io.Checkpoint.from_detector(net, step, opt.velocity, cfg.to_dict()), out_checkpoint)

    history = []
    step = start
    for step in range(start, end):
        rng = np.random.default_rng([cfg.seed, _AUGMENT, step])
        idx = batch_indices(step, cfg.batch_size, len(images), cfg.seed)
        x, t = make_batch(images, data.objects, idx, rng, cfg, net.defaults)
        lr = lr_at(step, cfg)
        try:
            out = train_step(net, x, t, opt, cfg.alpha1, cfg.alpha2, cfg.neg_pos_ratio, lr=lr)
        except NonFiniteError as exc:
            if log_file is not None:
                log_file.write(f"# step={step + 1} aborted: {exc}\n")
                log_file.flush()
            raise
        rec = format_record(step + 1, out, lr)
        history.append(out.as_record())
        if log_file is not None:
            log_file.write(rec + "\n")
        if on_step is not None:
            on_step(step + 1, out)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < end:
            save(step + 1)
    final = end if end > start else start
    save(final)
    if log_file is not None:
        log_file.flush()
    return TrainResult(net, opt, final, history)
