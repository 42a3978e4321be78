"""Synthetic tracking sequences: a textured rectangle over a smooth scene.

Frames are written as binary pixel maps: an ASCII header line
``"<width> <height> <channels>\\n"`` followed by row-major uint8 HWC bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..metrics import SequenceRecord, read_attributes, read_boxes, write_attributes, write_boxes

SCALE_PERIOD = 16          # frames per scale oscillation
FAST_MOTION_PX = 8.0       # speed (px/frame) above which a sequence is tagged fast_motion
FRAME_DIR = "frames"
GT_FILE = "groundtruth.txt"
ATTR_FILE = "attributes.txt"
BACKGROUND_MEAN = 110.0
BACKGROUND_STD = 25.0      # contrast of the static scene texture
BACKGROUND_BLUR = 4.0      # spatial correlation length of the scene, px
SENSOR_NOISE = 4.0         # per-frame, per-pixel noise std


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 320
    target_min: int = 28
    target_max: int = 40
    velocity: tuple[float, float] = (0.0, 0.0)
    scale_amplitude: float = 0.0
    occluder: bool = False
    seed: int = 0
    name: str = "synth"

    def attributes(self) -> frozenset[str]:
        tags = set()
        speed = math.hypot(*self.velocity)
        tags.add("static" if speed == 0 else "motion")
        if speed > FAST_MOTION_PX:
            tags.add("fast_motion")
        if self.scale_amplitude > 0:
            tags.add("scale_variation")
        if self.occluder:
            tags.add("occlusion")
        return frozenset(tags)


def _target_patch(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Rendered target texture: saturated fill, bright inset core, dark border.

    Only low spatial frequencies inside the border, so a sub-pixel shift of
    the crop barely changes the patch tokens."""
    base = np.array([220, 70, 40], dtype=np.float64) + rng.uniform(-15, 15, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    patch = np.broadcast_to(base, (h, w, 3)).copy()
    core = (yy >= h // 4) & (yy < h - h // 4) & (xx >= w // 4) & (xx < w - w // 4)
    patch[core] = [250, 220, 60]
    border = (yy < 2) | (xx < 2) | (yy >= h - 2) | (xx >= w - 2)
    patch[border] = [30, 30, 90]
    return patch


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Static background: low-pass filtered noise, rescaled to a fixed contrast."""
    field = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (BACKGROUND_BLUR, BACKGROUND_BLUR, 0))
    field /= field.std(axis=(0, 1))
    return BACKGROUND_MEAN + BACKGROUND_STD * field


def synth_generate(cfg: SynthConfig, n_frames: int) -> SequenceRecord:
    """Render ``n_frames`` frames; the returned record carries the frames."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    if not 0 < cfg.target_min <= cfg.target_max:
        raise ValueError(f"bad target size range [{cfg.target_min}, {cfg.target_max}]")
    if not 0 <= cfg.scale_amplitude < 1:
        raise ValueError(f"scale amplitude must lie in [0, 1), got {cfg.scale_amplitude}")
    largest = math.ceil(cfg.target_max * (1 + cfg.scale_amplitude))
    if largest > cfg.image_size:
        raise ValueError(f"target up to {largest}px does not fit a {cfg.image_size}px image")

    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    base_w, base_h = (int(v) for v in rng.integers(cfg.target_min, cfg.target_max + 1, size=2))
    cx, cy = (float(v) for v in rng.uniform(size * 0.35, size * 0.65, size=2))
    vx, vy = (float(v) for v in cfg.velocity)
    texture_seed = int(rng.integers(2 ** 31))
    background = _scene(rng, size)

    boxes, frames = [], []
    occ_w = max(4, base_w // 3)
    for t in range(n_frames):
        s = 1 + cfg.scale_amplitude * math.sin(2 * math.pi * t / SCALE_PERIOD)
        w, h = max(1, round(base_w * s)), max(1, round(base_h * s))
        # bounce off the borders, keeping the whole box inside the image
        cx, vx = _bounce(cx, vx, w / 2, size - w / 2)
        cy, vy = _bounce(cy, vy, h / 2, size - h / 2)
        x0 = min(max(0, round(cx - w / 2)), size - w)
        y0 = min(max(0, round(cy - h / 2)), size - h)

        img = np.clip(background + rng.normal(0, SENSOR_NOISE, size=(size, size, 3)), 0, 255)
        patch = _target_patch(np.random.default_rng(texture_seed), h, w)
        img[y0:y0 + h, x0:x0 + w] = patch
        if cfg.occluder:
            # a dark bar sweeping left to right across the target, centered on it mid-sequence
            ox = round(x0 + w / 2 + (t / (n_frames - 1) - 0.5) * 4 * base_w - occ_w / 2)
            img[:, max(0, ox):max(0, ox + occ_w)] = 40
        frames.append(np.round(img).astype(np.uint8))
        boxes.append((x0, y0, w, h))
        cx, cy = cx + vx, cy + vy
    return SequenceRecord(cfg.name, np.array(boxes, dtype=np.float64), cfg.attributes(), frames)


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return 2 * lo - pos if hi > lo else lo, abs(vel)
    if pos > hi:
        return 2 * hi - pos if hi > lo else hi, -abs(vel)
    return pos, vel


# ---------------------------------------------------------------------------
# pixel maps and sequence directories


def write_pixmap(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ValueError(f"pixel maps hold uint8 HWC images, got {img.dtype} {img.shape}")
    h, w, c = img.shape
    Path(path).write_bytes(f"{w} {h} {c}\n".encode() + np.ascontiguousarray(img).tobytes())


def read_pixmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    try:
        w, h, c = (int(v) for v in raw[:end].split())
    except ValueError:
        raise ValueError(f"{path}: bad pixel map header") from None
    body = raw[end + 1:]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def save_sequence(directory, record: SequenceRecord) -> Path:
    d = Path(directory)
    (d / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(record.frames):
        write_pixmap(d / FRAME_DIR / f"{t:06d}.pxm", frame)
    write_boxes(d / GT_FILE, record.boxes)
    write_attributes(d / ATTR_FILE, {record.name: record.attributes})
    return d


def load_sequence(directory, with_frames: bool = True) -> SequenceRecord:
    d = Path(directory)
    boxes = read_boxes(d / GT_FILE)
    attrs = read_attributes(d / ATTR_FILE) if (d / ATTR_FILE).exists() else {}
    name = next(iter(attrs), d.name)
    frames = [read_pixmap(p) for p in sorted((d / FRAME_DIR).glob("*.pxm"))] if with_frames else []
    if with_frames and len(frames) != len(boxes):
        raise ValueError(f"{d}: {len(frames)} frames but {len(boxes)} ground-truth boxes")
    return SequenceRecord(name, boxes, attrs.get(name, frozenset()), frames)
