#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
import math

import attr
import numpy as np
from PIL import Image

from fargan.errors import ConfigurationError
from fargan.errors import LandmarkParseError

logger = logging.getLogger(__name__)

"""
Parse 68-point facial landmarks and rasterize them into landmark masks.

Two mask representations are supported: a color-coded contour mask where each
facial part is drawn as a one pixel polyline in its own color, and a binary
mask filling the convex hull of all points.

A normalized coordinate c maps to pixel floor(c * size), clipped to the image.
"""

LANDMARK_COUNT = 68

# name: (first index, last index inclusive, closed polyline)
LANDMARK_GROUPS = {
    "jaw": (0, 16, False),
    "right_eyebrow": (17, 21, False),
    "left_eyebrow": (22, 26, False),
    "nose": (27, 35, False),
    "right_eye": (36, 41, True),
    "left_eye": (42, 47, True),
    "mouth_outer": (48, 59, True),
    "mouth_inner": (60, 67, True),
}

# palette key of each landmark group
GROUP_PARTS = {
    "jaw": "face_contour",
    "right_eyebrow": "eyebrows",
    "left_eyebrow": "eyebrows",
    "nose": "nose",
    "right_eye": "eyes",
    "left_eye": "eyes",
    "mouth_outer": "mouth_outer",
    "mouth_inner": "mouth_inner",
}

MASK_MODES = ("contour", "binary")


@attr.s(frozen=True, eq=False)
class LandmarkSet:
    """
    Exactly 68 ordered (x, y) points in normalized [0, 1] coordinates.
    """

    points = attr.ib(repr=False)

    def __attrs_post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.shape != (LANDMARK_COUNT, 2):
            raise LandmarkParseError(
                f"expected {LANDMARK_COUNT} (x, y) points, got an array of shape {points.shape}"
            )
        if not np.all(np.isfinite(points)):
            raise LandmarkParseError("landmark coordinates must be finite")
        if points.min() < 0 or points.max() > 1:
            raise LandmarkParseError("landmark coordinates must lie in [0, 1]")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def group(self, name):
        first, last, _ = LANDMARK_GROUPS[name]
        return self.points[first : last + 1]

    def to_pixels(self, size):
        """
        Return the integer pixel (column, row) of every point for a ``size``
        x ``size`` image.
        """
        return np.clip(np.floor(self.points * size).astype(np.int64), 0, size - 1)

    def to_string(self):
        return "".join(f"{x:.9f} {y:.9f}\n" for x, y in self.points)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_string())

    @classmethod
    def read(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            line_number = data.count(b"\n", 0, e.start) + 1
            raise LandmarkParseError("landmark file is not valid UTF-8", line_number) from e
        return parse_landmarks(text)


def parse_landmarks(text):
    """
    Return a LandmarkSet parsed from ``text``: 68 lines of "x y" decimal
    floats in [0, 1]. Errors name the offending line.

    >>> lms = parse_landmarks("0.5 0.5\\n" * 68)
    >>> assert lms.points.shape == (68, 2)
    """
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != LANDMARK_COUNT:
        raise LandmarkParseError(f"expected {LANDMARK_COUNT} lines, got {len(lines)}")

    points = []
    for line_number, line in enumerate(lines, start=1):
        fields = line.split()
        if len(fields) != 2:
            raise LandmarkParseError(f"expected 'x y', got {line!r}", line_number)
        try:
            x, y = float(fields[0]), float(fields[1])
        except ValueError as e:
            raise LandmarkParseError(f"unparsable number in {line!r}", line_number) from e
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LandmarkParseError(f"non-finite coordinate in {line!r}", line_number)
        if not (0 <= x <= 1 and 0 <= y <= 1):
            raise LandmarkParseError(f"coordinate out of [0, 1] in {line!r}", line_number)
        points.append((x, y))
    return LandmarkSet(points)


@attr.s(frozen=True)
class ContourPalette:
    """
    RGB colors of the six facial parts of a contour mask.
    """

    face_contour = attr.ib(default=(255, 0, 0))
    eyebrows = attr.ib(default=(0, 255, 0))
    nose = attr.ib(default=(255, 255, 0))
    eyes = attr.ib(default=(0, 0, 255))
    mouth_outer = attr.ib(default=(255, 0, 255))
    mouth_inner = attr.ib(default=(0, 255, 255))

    def __attrs_post_init__(self):
        colors = [tuple(c) for c in attr.astuple(self, recurse=False)]
        if len(set(colors)) != len(colors):
            raise ConfigurationError(f"palette colors must be pairwise distinct: {colors!r}")
        if (0, 0, 0) in colors:
            raise ConfigurationError("palette colors must differ from the black background")

    def colors(self):
        return [tuple(c) for c in attr.astuple(self, recurse=False)]


@attr.s(frozen=True, eq=False)
class MaskImage:
    """
    A rasterized landmark mask: ``pixels`` is an (H, W, 3) uint8 array in
    contour mode or an (H, W, 1) array of {0, 1} in binary mode.
    """

    pixels = attr.ib(repr=False)
    mode = attr.ib(type=str)

    def __attrs_post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigurationError(f"Unknown mask mode: {self.mode!r}")
        expected = 3 if self.mode == "contour" else 1
        if self.pixels.ndim != 3 or self.pixels.shape[2] != expected:
            raise ConfigurationError(
                f"{self.mode} masks need (H, W, {expected}) pixels, got {self.pixels.shape}"
            )

    @property
    def size(self):
        return self.pixels.shape[0]

    def to_array(self):
        """
        Return the mask as a (C, H, W) float32 array in [-1, 1].
        """
        pixels = self.pixels.astype(np.float32)
        if self.mode == "contour":
            scaled = pixels / 127.5 - 1
        else:
            scaled = pixels * 2 - 1
        return scaled.transpose(2, 0, 1)

    def save(self, path):
        if self.mode == "contour":
            Image.fromarray(self.pixels).save(path)
        else:
            gray = (self.pixels[:, :, 0] * 255).astype(np.uint8)
            Image.fromarray(gray).save(path)

    @classmethod
    def load(cls, path, mode):
        with Image.open(path) as image:
            if mode == "contour":
                pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
            else:
                gray = np.asarray(image.convert("L"), dtype=np.uint8)
                pixels = (gray > 127).astype(np.uint8)[:, :, None]
        return cls(pixels=pixels, mode=mode)


def line_pixels(x0, y0, x1, y1):
    """
    Return the integer (x, y) pixels of the segment from (x0, y0) to (x1, y1)
    using the integer midpoint (Bresenham) algorithm, endpoints included.

    >>> line_pixels(0, 0, 3, 1)
    [(0, 0), (1, 0), (2, 1), (3, 1)]
    """
    pixels = []
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    step_x = 1 if x0 < x1 else -1
    step_y = 1 if y0 < y1 else -1
    error = dx + dy
    x, y = x0, y0
    while True:
        pixels.append((x, y))
        if x == x1 and y == y1:
            return pixels
        doubled = 2 * error
        if doubled >= dy:
            error += dy
            x += step_x
        if doubled <= dx:
            error += dx
            y += step_y


def draw_polyline(canvas, points, color, closed=False):
    """
    Draw the polyline through integer pixel ``points`` onto ``canvas`` (H, W, C)
    in place. A single point draws a single pixel.
    """
    points = [tuple(int(v) for v in p) for p in points]
    segments = list(zip(points, points[1:]))
    if closed and len(points) > 2:
        segments.append((points[-1], points[0]))
    if not segments:
        segments = [(points[0], points[0])]
    for (x0, y0), (x1, y1) in segments:
        for x, y in line_pixels(x0, y0, x1, y1):
            canvas[y, x] = color


def rasterize_contour(landmarks, size, palette=None):
    """
    Return a contour MaskImage of ``landmarks`` at ``size`` x ``size``: every
    landmark group drawn as a one pixel polyline in its part color over black,
    eyes and mouth closed, jaw, eyebrows and nose open.
    """
    if size < 16:
        raise ConfigurationError(f"mask size must be at least 16, got {size}")
    palette = palette or ContourPalette()
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    pixels = landmarks.to_pixels(size)
    for name, (first, last, closed) in LANDMARK_GROUPS.items():
        color = getattr(palette, GROUP_PARTS[name])
        draw_polyline(canvas, pixels[first : last + 1], color, closed=closed)
    return MaskImage(pixels=canvas, mode="contour")


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points):
    """
    Return the convex hull vertices of integer ``points`` in counter-clockwise
    order (monotone chain), without collinear vertices.

    >>> convex_hull([(0, 0), (2, 0), (1, 1), (2, 2), (0, 2)])
    [(0, 0), (2, 0), (2, 2), (0, 2)]
    """
    unique = sorted(set((int(x), int(y)) for x, y in points))
    if len(unique) <= 2:
        return unique
    lower = []
    for p in unique:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(unique):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def rasterize_binary(landmarks, size):
    """
    Return a binary MaskImage with 1 on every pixel inside or on the convex
    hull of the landmark pixels. Degenerate hulls (a point or a segment) are
    drawn as a line.
    """
    if size < 16:
        raise ConfigurationError(f"mask size must be at least 16, got {size}")
    canvas = np.zeros((size, size, 1), dtype=np.uint8)
    hull = convex_hull(landmarks.to_pixels(size))
    if len(hull) <= 2:
        draw_polyline(canvas, hull, 1)
        return MaskImage(pixels=canvas, mode="binary")

    rows, cols = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    for (x0, y0), (x1, y1) in zip(hull, hull[1:] + hull[:1]):
        inside &= (x1 - x0) * (rows - y0) - (y1 - y0) * (cols - x0) >= 0
    canvas[inside, 0] = 1
    return MaskImage(pixels=canvas, mode="binary")


def rasterize(landmarks, size, mode="contour", palette=None):
    if mode == "contour":
        return rasterize_contour(landmarks, size, palette)
    if mode == "binary":
        return rasterize_binary(landmarks, size)
    raise ConfigurationError(f"Unknown mask mode: {mode!r}")
