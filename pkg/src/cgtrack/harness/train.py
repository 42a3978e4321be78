"""Smoke training: AdamW on a fixed synthetic batch."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import ndcore as nd
from ..metrics import SequenceRecord
from ..model import CGTrack
from ..ndcore import NDArray
from ..nn import BatchNorm2d
from ..objective import LossWeights, TargetMaps, make_targets, stack_targets, total_loss
from .crop import SEARCH_FACTOR, TEMPLATE_FACTOR, crop_resize, to_network_input

DEFAULT_LR = 4e-5
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_CENTER_JITTER = 0.12  # fraction of the box side, per axis
DEFAULT_SCALE_JITTER = 0.05   # log-scale half-range
HISTORY_FIELDS = ("step", "total", "focal", "giou", "l1")


class NonFiniteLossError(FloatingPointError):
    pass


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: list[NDArray], lr: float = DEFAULT_LR, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = DEFAULT_WEIGHT_DECAY):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainingBatch:
    template: np.ndarray  # [N,3,T,T]
    search: np.ndarray    # [N,3,S,S]
    targets: TargetMaps

    def __len__(self) -> int:
        return len(self.search)


def make_training_batch(record: SequenceRecord, n: int = 8, *, template_size: int = 128, search_size: int = 256,
                        template_factor: float = TEMPLATE_FACTOR, search_factor: float = SEARCH_FACTOR,
                        center_jitter: float = DEFAULT_CENTER_JITTER, scale_jitter: float = DEFAULT_SCALE_JITTER, seed: int = 0,
                        dtype=np.float32) -> TrainingBatch:
    """``n`` template/search pairs drawn evenly over the sequence.

    The first search crop is centered on the true box itself, the way the
    tracker sees an on-target frame. Every other crop is centered on a
    perturbed copy: the center moves by up to ``center_jitter * sqrt(w h)``
    per axis and the side scales by ``exp(U(-scale_jitter, scale_jitter))``.
    """
    if not record.frames:
        raise ValueError(f"sequence {record.name!r} carries no frames")
    rng = np.random.default_rng(seed)
    t_crop, _ = crop_resize(record.frames[0], record.boxes[0], template_factor, template_size)
    template = to_network_input(t_crop, dtype)
    frame_ids = np.round(np.linspace(0, len(record.frames) - 1, n)).astype(int)
    searches, targets = [], []
    for k, f in enumerate(frame_ids):
        x, y, w, h = record.boxes[f]
        side = math.sqrt(w * h)
        dx, dy = rng.uniform(-center_jitter, center_jitter, size=2) * side
        s = math.exp(rng.uniform(-scale_jitter, scale_jitter))
        if k == 0:
            dx = dy = 0.0
            s = 1.0
        ref = (x + w / 2 + dx - w * s / 2, y + h / 2 + dy - h * s / 2, w * s, h * s)
        crop, tf = crop_resize(record.frames[f], ref, search_factor, search_size)
        searches.append(to_network_input(crop, dtype))
        targets.append(make_targets(tf.image_to_normalized(record.boxes[f]), search_size // 16))
    return TrainingBatch(np.repeat(template, n, axis=0), np.concatenate(searches), stack_targets(targets))


def _first_non_finite(model: CGTrack, outputs, parts) -> str:
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return name
    for name in ("score", "offset", "size"):
        if not np.isfinite(getattr(outputs, name).data).all():
            return f"outputs.{name}"
    for name, v in parts.items():
        if not np.isfinite(v.data).all():
            return f"loss.{name}"
    return "loss.total"


def batch_losses(model: CGTrack, batch: TrainingBatch, weights: LossWeights = LossWeights()):
    """Forward the whole batch; returns (outputs, total, parts)."""
    dt = model.backbone.pos.template_table.dtype
    outputs = model(NDArray(batch.template.astype(dt, copy=False)), NDArray(batch.search.astype(dt, copy=False)))
    total, parts = total_loss(outputs, batch.targets, weights)
    return outputs, total, parts


def recalibrate_batch_norm(model: CGTrack, batch: TrainingBatch) -> None:
    """Replace every running mean/variance with the exact statistics of
    ``batch`` under the current weights (one no-grad pass, momentum 1)."""
    layers = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    saved = [m.momentum for m in layers]
    was_training = model.training
    try:
        for m in layers:
            m.momentum = 1.0
        model.train()
        with nd.no_grad():
            batch_losses(model, batch, LossWeights())
    finally:
        for m, mom in zip(layers, saved):
            m.momentum = mom
        model.train(was_training)


def smoke_train(model: CGTrack, batch: TrainingBatch, steps: int, lr: float = DEFAULT_LR,
                weight_decay: float = DEFAULT_WEIGHT_DECAY, weights: LossWeights = LossWeights(),
                on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run ``steps`` updates; history row k is the loss after k updates
    (the last row is a forward-only evaluation).

    Afterwards the normalization statistics are re-estimated on the batch:
    the exponential running averages lag far behind weights that move this
    fast, and inference would otherwise see stale statistics."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    model.train()
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    history = []
    for k in range(steps + 1):
        model.zero_grad()
        last = k == steps
        if last:
            with nd.no_grad():
                outputs, total, parts = batch_losses(model, batch, weights)
        else:
            outputs, total, parts = batch_losses(model, batch, weights)
        if not math.isfinite(total.item()):
            raise NonFiniteLossError(
                f"non-finite loss at step {k}: first non-finite array is {_first_non_finite(model, outputs, parts)}")
        row = {"step": k, "total": total.item(), **{n: v.item() for n, v in parts.items()}}
        history.append(row)
        if on_step is not None:
            on_step(row)
        if not last:
            nd.backward(total)
            opt.step()
    if steps:
        recalibrate_batch_norm(model, batch)
    return history


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["step"], *(repr(float(row[f])) for f in HISTORY_FIELDS[1:])])
