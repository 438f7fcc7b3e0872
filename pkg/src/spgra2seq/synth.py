"""Procedural four-category sketch corpus (circles, squares, zigzags, stars).

Each category varies per instance in shape parameters that survive the
rasterizer's bounding-box normalization (aspect, rotation, point and tooth
counts), so instances are distinguishable and not just rescaled copies.
Coordinates follow the QuickDraw convention: integers in [0, 255].
"""

from __future__ import annotations

import math

import numpy as np

CATEGORIES = ("circle", "square", "zigzag", "star")


def _rotate(pts, angle):
    c, s = math.cos(angle), math.sin(angle)
    return pts @ np.array([[c, s], [-s, c]])


def _place(pts, rng, jitter=1.0):
    pts = pts + rng.normal(0, jitter, pts.shape)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = (hi - lo).max()
    pts = (pts - (lo + hi) / 2) * (230.0 / span) + 127.5
    return np.clip(np.round(pts), 0, 255).astype(int)


def circle(rng) -> list[np.ndarray]:
    n = int(rng.integers(14, 25))
    aspect = rng.uniform(0.45, 1.0)
    start = rng.uniform(0, 2 * math.pi)
    sign = rng.choice([-1.0, 1.0])
    t = start + sign * np.linspace(0, 2 * math.pi, n + 1)
    pts = np.stack([100 * np.cos(t), 100 * aspect * np.sin(t)], axis=1)
    return [_place(_rotate(pts, rng.uniform(0, math.pi)), rng)]


def square(rng) -> list[np.ndarray]:
    aspect = rng.uniform(0.45, 1.0)
    corners = np.array([[-1, -aspect], [1, -aspect], [1, aspect], [-1, aspect], [-1, -aspect]]) * 100
    corners = np.roll(corners[:-1], int(rng.integers(4)), axis=0)
    corners = np.concatenate([corners, corners[:1]])
    sub = int(rng.integers(1, 4))
    pts = [corners[0]]
    for a, b in zip(corners[:-1], corners[1:]):
        for k in range(1, sub + 1):
            pts.append(a + (b - a) * k / sub)
    return [_place(_rotate(np.array(pts), rng.uniform(0, math.pi / 2)), rng)]


def zigzag(rng) -> list[np.ndarray]:
    teeth = int(rng.integers(3, 8))
    amp = rng.uniform(0.2, 0.8)
    xs = np.linspace(-100, 100, 2 * teeth + 1)
    ys = np.where(np.arange(2 * teeth + 1) % 2 == 0, -1.0, 1.0) * 100 * amp / 2
    pts = np.stack([xs, ys], axis=1)
    return [_place(_rotate(pts, rng.uniform(-math.pi / 6, math.pi / 6)), rng)]


def star(rng) -> list[np.ndarray]:
    p = int(rng.integers(5, 9))
    inner = rng.uniform(0.3, 0.6)
    t = rng.uniform(0, 2 * math.pi) + np.arange(2 * p + 1) * math.pi / p
    r = np.where(np.arange(2 * p + 1) % 2 == 0, 100.0, 100.0 * inner)
    pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    return [_place(pts, rng)]


GENERATORS = {"circle": circle, "square": square, "zigzag": zigzag, "star": star}


def make_sketch(category: str, rng) -> list[np.ndarray]:
    return GENERATORS[category](rng)


def quickdraw_record(polylines, word: str, key: int) -> dict:
    return {"word": word, "key_id": str(key),
            "drawing": [[p[:, 0].tolist(), p[:, 1].tolist()] for p in polylines]}


def generate(per_category: int, seed: int = 0, categories=CATEGORIES) -> list[dict]:
    """QuickDraw-style records, categories interleaved."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(per_category):
        for cat in categories:
            out.append(quickdraw_record(make_sketch(cat, rng), cat, len(out)))
    return out


def twin_circles(points: int = 15, canvas: int = 128, pixel_shift: int = 90) -> list[np.ndarray]:
    """Two identical circles side by side (graph-dump fixture).

    The horizontal gap is solved so that, after the rasterizer's fit-to-90%
    scaling, the second circle lands exactly ``pixel_shift`` pixels right of
    the first; their patches are then pixel-identical.
    """
    t = np.linspace(0, 2 * math.pi, points + 1)
    r = 12.1
    base = np.stack([r * np.cos(t) + 0.3, r * np.sin(t) + 0.2], axis=1)
    width = base[:, 0].max() - base[:, 0].min()
    fit = 0.9 * (canvas - 1)
    gap = pixel_shift * width / (fit - pixel_shift)
    return [base, base + np.array([gap, 0.0])]
