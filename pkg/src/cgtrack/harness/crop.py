"""Square context crops and the affine record that undoes them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
TEMPLATE_SIZE = 128
SEARCH_SIZE = 256
PIXEL_MEAN = np.array([0.485, 0.456, 0.406]) * 255
PIXEL_STD = np.array([0.229, 0.224, 0.225]) * 255


@dataclass(frozen=True)
class CropTransform:
    """crop = (image - origin) * scale, per axis; ``size`` is the crop side."""

    x0: float
    y0: float
    scale: float
    size: int

    def box_to_image(self, box):
        """Crop-pixel (x, y, w, h) -> image-pixel (x, y, w, h)."""
        x, y, w, h = box
        s = self.scale
        return (self.x0 + x / s, self.y0 + y / s, w / s, h / s)

    def box_to_crop(self, box):
        x, y, w, h = box
        s = self.scale
        return ((x - self.x0) * s, (y - self.y0) * s, w * s, h * s)

    def normalized_to_image(self, cxcywh):
        """Normalized crop (cx, cy, w, h) -> image-pixel (x, y, w, h)."""
        cx, cy, w, h = (v * self.size for v in cxcywh)
        return self.box_to_image((cx - w / 2, cy - h / 2, w, h))

    def image_to_normalized(self, box):
        x, y, w, h = self.box_to_crop(box)
        n = self.size
        return ((x + w / 2) / n, (y + h / 2) / n, w / n, h / n)


def check_box(box) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(box)}")
    return x, y, w, h


def crop_transform(box, context_factor: float, out_size: int) -> CropTransform:
    x, y, w, h = check_box(box)
    side = context_factor * math.sqrt(w * h)
    cx, cy = x + w / 2, y + h / 2
    return CropTransform(cx - side / 2, cy - side / 2, out_size / side, out_size)


def crop_resize(image: np.ndarray, box, context_factor: float, out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Bilinear crop of ``image`` (HWC); outside pixels take the channel mean."""
    tf = crop_transform(box, context_factor, out_size)
    img = np.asarray(image, dtype=np.float32)
    # crop pixel u has its center at u + 0.5; image pixel p has its center at p + 0.5
    u = np.arange(out_size) + 0.5
    xs = tf.x0 + u / tf.scale - 0.5
    ys = tf.y0 + u / tf.scale - 0.5
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    mean = img.reshape(-1, img.shape[2]).mean(axis=0)
    out = np.empty((out_size, out_size, img.shape[2]), dtype=np.float32)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.map_coordinates(img[..., ch], coords, order=1, mode="constant", cval=float(mean[ch]))
    return out, tf


def to_network_input(crop: np.ndarray, dtype=np.float32) -> np.ndarray:
    """HWC 0..255 crop -> normalized [1,3,S,S]."""
    x = (crop - PIXEL_MEAN) / PIXEL_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=dtype)


def clip_box(box, width: int, height: int):
    """Clip (x, y, w, h) to the image; keeps at least a 1-pixel box."""
    x, y, w, h = box
    x1, y1 = min(max(x, 0.0), width - 1.0), min(max(y, 0.0), height - 1.0)
    x2, y2 = min(max(x + w, x1 + 1.0), float(width)), min(max(y + h, y1 + 1.0), float(height))
    return (x1, y1, x2 - x1, y2 - y1)
