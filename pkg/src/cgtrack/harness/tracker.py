"""One-pass tracking loop over a frame sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ndcore as nd
from ..lgch import HANNING_WEIGHT, decode_box
from ..model import CGTrack
from ..ndcore import NDArray
from .crop import SEARCH_FACTOR, TEMPLATE_FACTOR, check_box, clip_box, crop_resize, to_network_input


@dataclass(frozen=True)
class TrackerConfig:
    search_factor: float = SEARCH_FACTOR
    template_factor: float = TEMPLATE_FACTOR
    hanning_weight: float = HANNING_WEIGHT


@dataclass
class TrackerState:
    template: NDArray                       # patch-embedded template tokens
    box: tuple[float, float, float, float]  # previous box, image pixels
    config: TrackerConfig
    score: float = 1.0


def _input(model: CGTrack, crop: np.ndarray) -> NDArray:
    return NDArray(to_network_input(crop, dtype=model.backbone.pos.template_table.dtype))


def init_tracker(model: CGTrack, frame: np.ndarray, box, cfg: TrackerConfig = TrackerConfig()) -> TrackerState:
    box = check_box(box)
    size = model.cfg.backbone.template_size
    crop, _ = crop_resize(frame, box, cfg.template_factor, size)
    model.eval()
    with nd.no_grad():
        z = model.backbone.embed(_input(model, crop))
    return TrackerState(z, box, cfg)


def track_step(model: CGTrack, state: TrackerState, frame: np.ndarray) -> tuple[float, float, float, float]:
    size = model.cfg.backbone.search_size
    crop, tf = crop_resize(frame, state.box, state.config.search_factor, size)
    with nd.no_grad():
        out = model.forward_embedded(state.template, model.backbone.embed(_input(model, crop)))
    norm, state.score = decode_box(out.score.data[0, 0], out.offset.data[0], out.size.data[0],
                                   state.config.hanning_weight)
    h, w = frame.shape[:2]
    state.box = tuple(float(v) for v in clip_box(tf.normalized_to_image(norm), w, h))
    return state.box


def track_sequence(model: CGTrack, frames, init_box, cfg: TrackerConfig = TrackerConfig()) -> np.ndarray:
    """Boxes (x, y, w, h) per frame; frame 0 reports ``init_box`` itself."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame sequence")
    state = init_tracker(model, frames[0], init_box, cfg)
    out = [tuple(float(v) for v in init_box)]
    for frame in frames[1:]:
        out.append(track_step(model, state, frame))
    return np.array(out, dtype=np.float64)
