"""Stroke-5 sequences, rasterization, patch cropping and patch masking."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from skimage.draw import line as bresenham

PEN_DOWN, PEN_UP, PEN_END = 2, 3, 4


class SketchFormatError(ValueError):
    pass


@dataclass
class StrokeSeq:
    """A sketch as stroke-5 actions ``(dx, dy, p_down, p_up, p_end)``.

    Offsets are stored divided by ``scale``; ``origin`` is the absolute
    position of the first drawn point (kept only for exact round trips).
    """

    actions: np.ndarray
    scale: float = 1.0
    origin: tuple = (0.0, 0.0)
    truncated: bool = False

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float32).reshape(-1, 5)
        pens = self.actions[:, 2:]
        if len(self.actions) and not np.all(pens.sum(axis=1) == 1):
            raise SketchFormatError("each action needs exactly one pen flag set")
        ends = np.flatnonzero(pens[:, 2] == 1)
        if len(ends) > 1 or (len(ends) == 1 and ends[0] != len(self.actions) - 1):
            raise SketchFormatError("end action must appear at most once, as the last action")

    def __len__(self):
        return len(self.actions)

    def padded(self, max_len: int) -> np.ndarray:
        """[max_len, 5] array, right-padded with end actions."""
        if len(self) > max_len:
            raise SketchFormatError(f"sequence of {len(self)} actions exceeds max_len {max_len}")
        out = np.zeros((max_len, 5), dtype=np.float32)
        out[:, PEN_END] = 1
        out[:len(self)] = self.actions
        return out

    def polylines(self) -> list[np.ndarray]:
        return stroke5_to_polylines(self)


def polylines_to_stroke5(polylines, max_len: int = 250) -> StrokeSeq:
    """Absolute polylines to stroke-5 (unnormalized).

    The cursor starts on the first point.  Every move onto a stroke point is
    a pen-down action; each stroke is closed by a zero pen-up action and the
    sketch by one end action.
    """
    polylines = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polylines]
    polylines = [p for p in polylines if len(p)]
    if not polylines:
        raise SketchFormatError("empty drawing")
    origin = polylines[0][0]
    pos = origin.copy()
    rows = []
    for k, pts in enumerate(polylines):
        start = 0 if k > 0 else 1
        for pt in pts[start:]:
            d = pt - pos
            rows.append((d[0], d[1], 1, 0, 0))
            pos = pt
        rows.append((0, 0, 0, 1, 0))
    truncated = len(rows) + 1 > max_len
    if truncated:
        rows = rows[:max_len - 1]
    rows.append((0, 0, 0, 0, 1))
    return StrokeSeq(np.array(rows, dtype=np.float32), 1.0, (float(origin[0]), float(origin[1])), truncated)


def stroke5_to_polylines(seq: StrokeSeq) -> list[np.ndarray]:
    """Inverse of :func:`polylines_to_stroke5`, in absolute (unnormalized) units.

    A move is drawn when the previous action left the pen down (the initial
    state is pen-down).  Zero-length pen-up moves only lift the pen.
    """
    pos = np.array(seq.origin, dtype=np.float64)
    lines = [[pos.copy()]]
    down = True
    for dx, dy, p1, p2, p3 in seq.actions.astype(np.float64):
        if p3 == 1:
            break
        delta = np.array([dx, dy]) * seq.scale
        pos = pos + delta
        if down:
            if p1 == 1 or delta.any():
                lines[-1].append(pos.copy())
        else:
            lines.append([pos.copy()])
        down = p1 == 1
    return [np.array(line) for line in lines]


def parse_ndjson(line: str, scale: float = 1.0, max_len: int = 250) -> StrokeSeq:
    """Parse one NDJSON record.

    Accepts the QuickDraw schema (``{"drawing": [[xs, ys], ...]}``) or a
    native stroke-5 record (a bare list of 5-tuples, or ``{"stroke5": ...}``).
    Offsets are divided by ``scale``.
    """
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise SketchFormatError(f"malformed JSON: {e}") from None
    if isinstance(rec, dict) and "drawing" in rec:
        drawing = rec["drawing"]
        if not isinstance(drawing, list) or not drawing:
            raise SketchFormatError("empty drawing")
        try:
            polys = [np.stack([np.asarray(s[0], float), np.asarray(s[1], float)], axis=1) for s in drawing]
        except (TypeError, IndexError, ValueError) as e:
            raise SketchFormatError(f"bad stroke layout: {e}") from None
        seq = polylines_to_stroke5(polys, max_len)
    else:
        raw = rec.get("stroke5") if isinstance(rec, dict) else rec
        if not raw:
            raise SketchFormatError("empty stroke-5 record")
        arr = np.asarray(raw, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise SketchFormatError(f"stroke-5 record has shape {arr.shape}")
        truncated = len(arr) > max_len
        if truncated:
            arr = np.concatenate([arr[:max_len - 1], [[0, 0, 0, 0, 1]]]).astype(np.float32)
        elif arr[-1, PEN_END] != 1:
            arr = np.concatenate([arr, [[0, 0, 0, 0, 1]]]).astype(np.float32)
        seq = StrokeSeq(arr, 1.0, tuple(rec.get("origin", (0.0, 0.0))) if isinstance(rec, dict) else (0.0, 0.0),
                        truncated)
        if isinstance(rec, dict) and "scale" in rec:
            # native records are already normalized
            seq.scale = float(rec["scale"])
            return seq
    return normalize(seq, scale)


def normalize(seq: StrokeSeq, scale: float) -> StrokeSeq:
    acts = seq.actions.copy()
    acts[:, :2] /= scale
    return replace(seq, actions=acts, scale=seq.scale * scale)


def offset_std(seqs) -> float:
    """Standard deviation of all raw (unnormalized) offsets."""
    deltas = np.concatenate([(s.actions[:, :2] * s.scale).reshape(-1) for s in seqs])
    std = float(np.std(deltas))
    return std if std > 0 else 1.0


# ---------------------------------------------------------------- raster

@dataclass
class Canvas:
    pixels: np.ndarray
    polylines: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def points(self) -> np.ndarray:
        """Pen-down points in drawing order as integer (x, y) pixel coordinates."""
        if not self.polylines:
            return np.zeros((0, 2), dtype=np.int64)
        pts = np.concatenate(self.polylines)
        return np.floor(pts + 0.5).astype(np.int64)


def rasterize(seq: StrokeSeq, size: int = 128) -> Canvas:
    """Binary 1px rendering with the bounding box centred and scaled to 90% of the canvas."""
    canvas = np.zeros((size, size), dtype=np.float32)
    if not (seq.actions[:, PEN_END] == 0).any():
        return Canvas(canvas, [])
    lines = stroke5_to_polylines(seq)
    allpts = np.concatenate(lines)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float((hi - lo).max())
    s = 0.9 * (size - 1) / span if span > 0 else 0.0
    centre = (lo + hi) / 2
    mid = (size - 1) / 2
    placed = [(ln - centre) * s + mid for ln in lines]
    for ln in placed:
        px = np.clip(np.floor(ln + 0.5).astype(np.int64), 0, size - 1)
        if len(px) == 1:
            canvas[px[0, 1], px[0, 0]] = 1
        for (x0, y0), (x1, y1) in zip(px[:-1], px[1:]):
            rr, cc = bresenham(y0, x0, y1, x1)
            canvas[rr, cc] = 1
    return Canvas(canvas, placed)


def select_patch_centers(canvas: Canvas, M: int) -> tuple[np.ndarray, bool]:
    """Every ceil(L/M)-th pen-down point, starting at the first.

    Returns ``(centers [M, 2] as (x, y), repeated)``; ``repeated`` flags that
    the stride ran out of points and the last center was repeated.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    pts = canvas.points()
    if len(pts) == 0:
        mid = canvas.size // 2
        return np.full((M, 2), mid, dtype=np.int64), True
    stride = math.ceil(len(pts) / M)
    chosen = pts[::stride][:M]
    repeated = len(chosen) < M
    if repeated:
        chosen = np.concatenate([chosen, np.repeat(chosen[-1:], M - len(chosen), axis=0)])
    return np.clip(chosen, 0, canvas.size - 1), repeated


def resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (triangle-filter) resize via PIL; float32 in, float32 out."""
    out = Image.fromarray(np.ascontiguousarray(img, dtype=np.float32), mode="F").resize(
        (size, size), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


@dataclass
class PatchSet:
    centers: np.ndarray
    patches: np.ndarray
    full_view: np.ndarray
    masked: np.ndarray

    @property
    def M(self) -> int:
        return len(self.centers)

    def images(self) -> np.ndarray:
        """[M+1, P, P] with the full view first."""
        return np.concatenate([self.full_view[None], self.patches])

    def to_bytes(self) -> bytes:
        m, p = self.patches.shape[0], self.patches.shape[1]
        return b"".join([
            struct.pack("<II", m, p),
            np.ascontiguousarray(self.centers, dtype="<i8").tobytes(),
            np.ascontiguousarray(self.masked, dtype="u1").tobytes(),
            np.ascontiguousarray(self.patches, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.full_view, dtype="<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PatchSet":
        m, p = struct.unpack_from("<II", blob, 0)
        off = 8
        centers = np.frombuffer(blob, "<i8", 2 * m, off).reshape(m, 2).astype(np.int64)
        off += 16 * m
        masked = np.frombuffer(blob, "u1", m, off).astype(bool)
        off += m
        patches = np.frombuffer(blob, "<f4", m * p * p, off).reshape(m, p, p).astype(np.float32)
        off += 4 * m * p * p
        full = np.frombuffer(blob, "<f4", p * p, off).reshape(p, p).astype(np.float32)
        return cls(centers, patches, full, masked)


def _window(pixels: np.ndarray, cx: int, cy: int, patch: int) -> np.ndarray:
    half = patch // 2
    padded = np.pad(pixels, patch)
    y0, x0 = cy - half + patch, cx - half + patch
    return padded[y0:y0 + patch, x0:x0 + patch]


def crop_patches(canvas: Canvas, centers: np.ndarray, patch_size: int = 48) -> PatchSet:
    """Square windows ``[c - P//2, c - P//2 + P)`` around each center, zero padded."""
    patches = np.stack([_window(canvas.pixels, int(x), int(y), patch_size) for x, y in centers])
    return PatchSet(np.asarray(centers, dtype=np.int64), patches.astype(np.float32),
                    resize(canvas.pixels, patch_size), np.zeros(len(centers), dtype=bool))


@dataclass
class MaskPlan:
    probability: float
    seed: int
    selected: np.ndarray = None

    @classmethod
    def draw(cls, M: int, probability: float, seed) -> "MaskPlan":
        if not 0.0 <= probability <= 1.0:
            raise ValueError("mask probability must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        sel = np.flatnonzero(rng.random(M) < probability)
        return cls(probability, seed, sel)


def erase_regions(canvas: Canvas, centers: np.ndarray, selected, patch_size: int) -> Canvas:
    """Paint each selected patch window to background; polylines are kept."""
    px = canvas.pixels.copy()
    half = patch_size // 2
    n = canvas.size
    for i in selected:
        x, y = int(centers[i][0]), int(centers[i][1])
        px[max(0, y - half):max(0, min(n, y - half + patch_size)),
           max(0, x - half):max(0, min(n, x - half + patch_size))] = 0
    return Canvas(px, canvas.polylines)


def apply_mask(pset: PatchSet, plan: MaskPlan, canvas: Canvas) -> PatchSet:
    """Erase every selected window first, then re-crop all patches from the corrupted canvas."""
    if plan.selected is None or len(plan.selected) == 0:
        return pset
    patch = pset.patches.shape[1]
    corrupted = erase_regions(canvas, pset.centers, plan.selected, patch)
    out = crop_patches(corrupted, pset.centers, patch)
    out.masked[plan.selected] = True
    return out


def make_patchset(seq: StrokeSeq, canvas_size: int = 128, patch_size: int = 48, M: int = 8,
                  mask_prob: float = 0.0, mask_seed=0) -> tuple[PatchSet, Canvas]:
    """rasterize -> select centers -> crop -> (optionally) mask."""
    canvas = rasterize(seq, canvas_size)
    centers, _ = select_patch_centers(canvas, M)
    pset = crop_patches(canvas, centers, patch_size)
    if mask_prob > 0:
        plan = MaskPlan.draw(M, mask_prob, mask_seed)
        if len(plan.selected):
            pset = apply_mask(pset, plan, canvas)
            canvas = erase_regions(canvas, centers, plan.selected, patch_size)
    return pset, canvas


def to_png(img: np.ndarray) -> bytes:
    """Grayscale PNG with ink drawn black on white."""
    arr = (255 * (1 - np.clip(img, 0, 1))).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()
