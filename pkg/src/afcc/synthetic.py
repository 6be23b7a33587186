"""Procedural 10-class colour-image set written in CIFAR binary layout.

Each class is one of five shapes drawn in one of two colour families, so
classes share features pairwise (same shape) and in groups of five (same
colour family). Position, size, colours, background texture, distractor
strokes and pixel noise are randomised per image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import encode_cifar_records

SHAPES = ("disc", "square", "triangle", "ring", "cross")
NUM_CLASSES = 2 * len(SHAPES)


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d = np.sqrt(dx * dx + dy * dy)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "triangle":
        # equilateral triangle centred on (cy, cx)
        return (v <= 0.5 * r) & (v >= -r + 1.732 * np.abs(u))
    raise ValueError(kind)


def _family_colour(rng, family: int):
    """Warm (family 0) or cool (family 1) colour with overlap between families."""
    hue = rng.normal(0.0 if family == 0 else 0.5, 0.10) % 1.0
    sat, val = rng.uniform(0.35, 1.0), rng.uniform(0.45, 1.0)
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
    rgb = val - val * sat * np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb


def render_image(rng: np.random.Generator, label: int, size: int = 32, noise: float = 0.08, clutter: int = 1) -> np.ndarray:
    """One (3, size, size) uint8 image of class ``label``."""
    shape, family = SHAPES[label % len(SHAPES)], label // len(SHAPES)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # smooth random background
    coarse = rng.uniform(0.15, 0.6, size=(3, 4, 4))
    bg = np.kron(coarse, np.ones((size // 4, size // 4)))[:, :size, :size]
    img = bg + rng.normal(0, 0.05, size=(3, size, size))
    # distractor strokes in arbitrary colours
    for _ in range(int(rng.integers(0, clutter + 1))):
        y0, x0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, np.pi)
        d = np.abs((yy - y0) * np.cos(ang) - (xx - x0) * np.sin(ang))
        along = np.abs((yy - y0) * np.sin(ang) + (xx - x0) * np.cos(ang))
        stroke = (d <= rng.uniform(0.5, 1.5)) & (along <= rng.uniform(3, 9))
        img[:, stroke] = rng.uniform(0, 1, size=(3, 1))
    r = rng.uniform(0.16, 0.32) * size
    cy, cx = rng.uniform(r * 0.8, size - r * 0.8, 2)
    mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi))
    colour = _family_colour(rng, family)
    img[:, mask] = colour[:, None] * rng.uniform(0.85, 1.15, size=(1, int(mask.sum())))
    img += rng.normal(0, noise, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_split(n: int, seed: int, size: int = 32, noise: float = 0.08, clutter: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Balanced split: labels cycle 0..9 then are shuffled."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.stack([render_image(rng, int(y), size, noise, clutter) for y in labels]) if n else np.zeros((0, 3, size, size), np.uint8)
    return images, labels.astype(np.int64)


def write_dataset(out_dir, n_train: int = 10000, n_test: int = 2000, seed: int = 0, size: int = 32, noise: float = 0.08, clutter: int = 1) -> Path:
    """Write ``data_batch_1.bin`` and ``test_batch.bin`` (1 label byte per record)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, n, s in (("data_batch_1.bin", n_train, seed), ("test_batch.bin", n_test, seed + 1)):
        images, labels = make_split(n, s, size, noise, clutter)
        (out / name).write_bytes(encode_cifar_records(images, labels))
    return out
