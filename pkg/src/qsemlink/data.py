"""Synthetic semantic-map/image pairs.

Maps are a background class plus a few random axis-aligned rectangles;
images render deterministically from the map through a fixed per-class
palette, a per-class sinusoidal texture, and seeded Gaussian jitter.
Because the renderer is deterministic and the palette well separated,
nearest-palette classification of an image recovers its map, which is
what the segmentation-consistency metric measures on generated images.
"""

from __future__ import annotations

import numpy as np

from .channel import SemanticMap
from .rng import RngStream

__all__ = [
    "class_palette",
    "synth_map",
    "render_image",
    "synth_dataset",
    "classify_image",
    "mean_iou",
    "TEXTURE_AMP",
    "JITTER_SIGMA",
]

TEXTURE_AMP = 0.10
JITTER_SIGMA = 0.05

_CUBE = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, 1, -1],
        [1, -1, 1],
        [-1, 1, 1],
        [1, 1, 1],
    ],
    dtype=np.float32,
)


def class_palette(num_classes: int) -> np.ndarray:
    """(C,3) base colors in [-1,1], pairwise well separated."""
    if num_classes <= 8:
        return 0.8 * _CUBE[:num_classes]
    # beyond 8 classes: golden-angle hue wheel
    hues = (np.arange(num_classes) * 0.61803398875) % 1.0
    angles = 2 * np.pi * hues
    colors = np.stack(
        [np.cos(angles), np.cos(angles + 2 * np.pi / 3), np.cos(angles + 4 * np.pi / 3)], axis=1
    )
    return (0.8 * colors).astype(np.float32)


def synth_map(stream: RngStream, height: int, width: int, num_classes: int) -> SemanticMap:
    """Background class plus 2-4 random rectangles."""
    if height < 4 or width < 4:
        raise ValueError(f"map dims too small: {height}x{width}")
    ids = np.full((height, width), int(stream.integers(0, num_classes, ())), dtype=np.int64)
    n_rect = int(stream.integers(2, 5, ()))
    for _ in range(n_rect):
        cls = int(stream.integers(0, num_classes, ()))
        h0 = int(stream.integers(0, height - 2, ()))
        h1 = int(stream.integers(h0 + 1, height, ())) + 1
        w0 = int(stream.integers(0, width - 2, ()))
        w1 = int(stream.integers(w0 + 1, width, ())) + 1
        ids[h0:h1, w0:w1] = cls
    return SemanticMap(ids, num_classes)


def _class_texture(cls: int, height: int, width: int) -> np.ndarray:
    fy = 1.0 + (cls % 3)
    fx = 1.0 + ((2 * cls) % 5)
    phase = 0.7 * cls
    yy = np.arange(height)[:, None] / height
    xx = np.arange(width)[None, :] / width
    return (np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)).astype(np.float32)


def render_image(sem: SemanticMap, stream: RngStream) -> np.ndarray:
    """(3,H,W) image in [-1,1], deterministic given (map, stream seed)."""
    palette = class_palette(sem.num_classes)
    img = palette[sem.class_ids].transpose(2, 0, 1).astype(np.float32)
    tex = np.zeros((sem.height, sem.width), dtype=np.float32)
    for cls in np.unique(sem.class_ids):
        mask = sem.class_ids == cls
        tex[mask] = _class_texture(int(cls), sem.height, sem.width)[mask]
    img = img + TEXTURE_AMP * tex[None]
    img = img + JITTER_SIGMA * stream.normal(img.shape)
    return np.clip(img, -1.0, 1.0)


def synth_dataset(n: int, height: int, width: int, num_classes: int, seed: int) -> list[tuple[SemanticMap, np.ndarray]]:
    """n deterministic (map, image) pairs."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    out = []
    for i in range(n):
        sem = synth_map(RngStream(seed, f"synth/map/{i}"), height, width, num_classes)
        img = render_image(sem, RngStream(seed, f"synth/render/{i}"))
        out.append((sem, img))
    return out


def classify_image(img: np.ndarray, num_classes: int) -> SemanticMap:
    """Nearest-palette-color classification of a rendered or generated image."""
    palette = class_palette(num_classes)  # (C,3)
    pixels = np.asarray(img, dtype=np.float32).reshape(3, -1).T  # (HW,3)
    d2 = ((pixels[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    ids = np.argmin(d2, axis=1).reshape(img.shape[1], img.shape[2])
    return SemanticMap(ids, num_classes)


def mean_iou(a: SemanticMap, b: SemanticMap) -> float:
    """Mean IoU over classes present in either map (empty classes skipped)."""
    if a.class_ids.shape != b.class_ids.shape:
        raise ValueError(f"map shapes differ: {a.class_ids.shape} vs {b.class_ids.shape}")
    classes = max(a.num_classes, b.num_classes)
    ious = []
    for c in range(classes):
        in_a = a.class_ids == c
        in_b = b.class_ids == c
        union = np.count_nonzero(in_a | in_b)
        if union == 0:
            continue
        inter = np.count_nonzero(in_a & in_b)
        ious.append(inter / union)
    return float(np.mean(ious)) if ious else 1.0
