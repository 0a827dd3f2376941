"""Synthetic face masks drawn from the five alignment landmarks.

The mask is a flat-colored hexagon with hard edges.  Its vertices are
anchored on the landmarks (see :func:`anchor_polygon`), optionally jittered,
and rasterized against pixel centers: pixel ``(row, col)`` sits at
``(x=col, y=row)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IMAGE_SIZE, FaceImage, GeometryError

RANDOM_UNIFORM = "random"
TRAIN_JITTER_PX = 2.0
MIN_AREA_FRACTION = 0.10
FACE_WIDTH_FACTOR = 2.2

# continuous crop bounds: outer edges of the border pixels
LO, HI = -0.5, IMAGE_SIZE - 0.5

_ROWS, _COLS = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


@dataclass(frozen=True)
class MaskTemplate:
    """How a mask is placed and colored.

    ``color_mode`` is ``"random"`` (each channel uniform in [-1, 1]) or a fixed
    ``(r, g, b)`` triple of 0-255 values.
    """

    color_mode: str | tuple[int, int, int] = RANDOM_UNIFORM
    jitter_px: float = TRAIN_JITTER_PX
    anchor_scheme: str = "hexagon"

    def __post_init__(self):
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")
        if self.color_mode != RANDOM_UNIFORM:
            rgb = tuple(int(v) for v in self.color_mode)
            if len(rgb) != 3 or min(rgb) < 0 or max(rgb) > 255:
                raise ValueError(f"fixed color must be three values in [0, 255], got {rgb}")
            object.__setattr__(self, "color_mode", rgb)
        if self.anchor_scheme != "hexagon":
            raise ValueError(f"unknown anchor scheme {self.anchor_scheme!r}")


BENCHMARK_TEMPLATE = MaskTemplate(RANDOM_UNIFORM, jitter_px=0.0)


@dataclass(frozen=True)
class MaskPolicy:
    p_mask: float = 0.5
    template: MaskTemplate = field(default_factory=MaskTemplate)

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError(f"p_mask must lie in [0, 1], got {self.p_mask}")


@dataclass(frozen=True, eq=False)
class MaskRender:
    image: FaceImage
    polygon: np.ndarray  # (6, 2) as (x, y)
    coverage: np.ndarray  # bool (H, W)
    color: np.ndarray  # (3,) in [-1, 1]


def anchor_polygon(landmarks: np.ndarray) -> np.ndarray:
    """Six mask vertices (x, y) in drawing order.

    Top edge halfway between the lower eye and the nose tip, spanning an
    estimated face width of 2.2x the mouth-corner distance; side vertices at
    the left/right crop border at mouth height; bottom edge on the crop's lower
    border.
    """
    lm = np.asarray(landmarks, dtype=np.float64)
    eyes, nose, mouth = lm[:2], lm[2], lm[3:5]
    cx = mouth[:, 0].mean()
    half_w = 0.5 * FACE_WIDTH_FACTOR * np.linalg.norm(mouth[0] - mouth[1])
    left, right = max(cx - half_w, LO), min(cx + half_w, HI)
    y_top = 0.5 * (eyes[:, 1].max() + nose[1])
    y_mouth = mouth[:, 1].mean()
    return np.array([
        [left, y_top],
        [right, y_top],
        [HI, y_mouth],
        [right, HI],
        [left, HI],
        [LO, y_mouth],
    ])


def jitter_polygon(polygon: np.ndarray, jitter_px: float, rng: np.random.Generator) -> np.ndarray:
    if jitter_px == 0:
        return polygon.copy()
    moved = polygon + rng.uniform(-jitter_px, jitter_px, size=polygon.shape)
    return np.clip(moved, LO, HI)


def polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize(polygon: np.ndarray) -> np.ndarray:
    """Even-odd fill over pixel centers; returns a bool (112, 112) array."""
    inside = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    x0s, y0s = polygon[:, 0], polygon[:, 1]
    x1s, y1s = np.roll(x0s, -1), np.roll(y0s, -1)
    for x0, y0, x1, y1 in zip(x0s, y0s, x1s, y1s):
        if y0 == y1:
            continue
        crosses = (y0 > _ROWS) != (y1 > _ROWS)
        x_at = x0 + (_ROWS - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (_COLS < x_at)
    return inside


def landmark_pixels(landmarks: np.ndarray) -> np.ndarray:
    """(row, col) of the pixel holding each landmark."""
    lm = np.asarray(landmarks, dtype=np.float64)
    cols = np.clip(np.floor(lm[:, 0] + 0.5), 0, IMAGE_SIZE - 1).astype(int)
    rows = np.clip(np.floor(lm[:, 1] + 0.5), 0, IMAGE_SIZE - 1).astype(int)
    return np.stack([rows, cols], axis=1)


def mask_color(template: MaskTemplate, rng: np.random.Generator) -> np.ndarray:
    if template.color_mode == RANDOM_UNIFORM:
        return rng.uniform(-1.0, 1.0, size=3)
    return np.asarray(template.color_mode, dtype=np.float64) / 127.5 - 1.0


def render_mask_details(image: FaceImage, template: MaskTemplate,
                        rng: np.random.Generator) -> MaskRender:
    polygon = jitter_polygon(anchor_polygon(image.landmarks), template.jitter_px, rng)
    area = polygon_area(polygon)
    if area < MIN_AREA_FRACTION * IMAGE_SIZE**2:
        raise GeometryError(f"{image.source_id}: mask polygon area {area:.1f} px^2 "
                            f"below {MIN_AREA_FRACTION:.0%} of the image")
    coverage = rasterize(polygon)
    px = landmark_pixels(image.landmarks)
    hit = coverage[px[:, 0], px[:, 1]]
    if hit[0] or hit[1] or not hit[2:].all():
        raise GeometryError(f"{image.source_id}: landmark layout incompatible with the mask "
                            "anchor (eyes must stay clear, nose and mouth covered)")
    color = mask_color(template, rng)
    pixels = np.array(image.pixels, copy=True)
    pixels[coverage] = color.astype(np.float32)
    return MaskRender(image.with_pixels(pixels), polygon, coverage, color)


def render_mask(image: FaceImage, template: MaskTemplate, rng: np.random.Generator) -> FaceImage:
    """Paint a synthetic mask over the lower face; pixels outside stay untouched."""
    return render_mask_details(image, template, rng).image


def maybe_mask(image: FaceImage, policy: MaskPolicy,
               rng: np.random.Generator) -> tuple[FaceImage, bool]:
    if rng.random() < policy.p_mask:
        return render_mask(image, policy.template, rng), True
    return image, False


def mask_for_benchmark(image: FaceImage, rng: np.random.Generator) -> FaceImage:
    """Evaluation mask: no vertex jitter, random color."""
    return render_mask(image, BENCHMARK_TEMPLATE, rng)


__all__ = [
    "BENCHMARK_TEMPLATE", "MaskPolicy", "MaskRender", "MaskTemplate", "RANDOM_UNIFORM",
    "anchor_polygon", "jitter_polygon", "landmark_pixels", "mask_color", "mask_for_benchmark",
    "maybe_mask", "polygon_area", "rasterize", "render_mask", "render_mask_details",
]
