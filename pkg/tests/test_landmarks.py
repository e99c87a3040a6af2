#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

from unittest import TestCase

import numpy as np
import pytest
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st

from fargan.errors import ConfigurationError
from fargan.errors import LandmarkParseError
from fargan.landmarks import LANDMARK_GROUPS
from fargan.landmarks import ContourPalette
from fargan.landmarks import LandmarkSet
from fargan.landmarks import MaskImage
from fargan.landmarks import convex_hull
from fargan.landmarks import line_pixels
from fargan.landmarks import parse_landmarks
from fargan.landmarks import rasterize
from fargan.landmarks import rasterize_binary
from fargan.landmarks import rasterize_contour


def grid_landmarks(pixels, size=64):
    """
    Return a LandmarkSet from integer pixel positions on a ``size`` grid,
    cycling through ``pixels`` to fill all 68 points.
    """
    points = [pixels[i % len(pixels)] for i in range(68)]
    return LandmarkSet(np.array(points, dtype=np.float64) / size)


def face_like(seed=0):
    rng = np.random.default_rng(seed)
    return LandmarkSet(rng.integers(16, 48, (68, 2)) / 64)


class TestParsing(TestCase):
    def test_parse_68_lines(self):
        text = "".join(f"{i / 100:.2f} 0.5\n" for i in range(68))
        lms = parse_landmarks(text)
        assert lms.points.shape == (68, 2)
        assert lms.points[10, 0] == 0.1

    def test_trailing_blank_lines_are_ignored(self):
        assert parse_landmarks("0.5 0.5\n" * 68 + "\n\n").points.shape == (68, 2)

    def test_wrong_line_count(self):
        with pytest.raises(LandmarkParseError, match="67"):
            parse_landmarks("0.5 0.5\n" * 67)
        with pytest.raises(LandmarkParseError):
            parse_landmarks("0.5 0.5\n" * 69)

    def test_errors_name_the_line(self):
        lines = ["0.5 0.5"] * 68
        lines[4] = "0.5"
        with pytest.raises(LandmarkParseError) as info:
            parse_landmarks("\n".join(lines))
        assert info.value.line_number == 5

        lines[4] = "0.5 abc"
        with pytest.raises(LandmarkParseError) as info:
            parse_landmarks("\n".join(lines))
        assert info.value.line_number == 5

    def test_out_of_range_and_non_finite(self):
        for bad in ("1.5 0.5", "-0.1 0.5", "nan 0.5", "0.5 inf"):
            lines = ["0.5 0.5"] * 68
            lines[0] = bad
            with pytest.raises(LandmarkParseError) as info:
                parse_landmarks("\n".join(lines))
            assert info.value.line_number == 1

    def test_points_are_read_only(self):
        lms = face_like()
        with pytest.raises(ValueError):
            lms.points[0, 0] = 0.5

    def test_to_pixels_floors_and_clips(self):
        lms = grid_landmarks([(0, 0)])
        assert np.array_equal(lms.to_pixels(64), np.zeros((68, 2)))
        edge = LandmarkSet(np.ones((68, 2)))
        assert np.array_equal(edge.to_pixels(64), np.full((68, 2), 63))
        half = LandmarkSet(np.full((68, 2), 0.499))
        assert np.array_equal(half.to_pixels(10), np.full((68, 2), 4))

    def test_groups_cover_all_points(self):
        lms = face_like()
        total = sum(len(lms.group(name)) for name in LANDMARK_GROUPS)
        assert total == 68


class TestLines(TestCase):
    def test_horizontal_segment(self):
        pixels = line_pixels(2, 5, 9, 5)
        assert pixels == [(x, 5) for x in range(2, 10)]

    def test_vertical_and_reverse(self):
        assert line_pixels(3, 7, 3, 4) == [(3, 7), (3, 6), (3, 5), (3, 4)]

    def test_diagonal(self):
        assert line_pixels(0, 0, 3, 3) == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_single_point(self):
        assert line_pixels(4, 4, 4, 4) == [(4, 4)]

    def test_pixels_are_connected(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x0, y0, x1, y1 = (int(v) for v in rng.integers(0, 64, 4))
            pixels = line_pixels(x0, y0, x1, y1)
            assert pixels[0] == (x0, y0) and pixels[-1] == (x1, y1)
            assert len(pixels) == max(abs(x1 - x0), abs(y1 - y0)) + 1
            for (ax, ay), (bx, by) in zip(pixels, pixels[1:]):
                assert max(abs(ax - bx), abs(ay - by)) == 1


class TestContourMask(TestCase):
    def test_only_palette_colors_and_background(self):
        palette = ContourPalette()
        mask = rasterize_contour(face_like(), 64)
        colors = {tuple(c) for c in mask.pixels.reshape(-1, 3)}
        assert colors <= set(palette.colors()) | {(0, 0, 0)}
        assert (0, 0, 0) in colors

    def test_each_part_is_drawn(self):
        # spread the groups over separate rows so that no part hides another
        points = []
        for row, (name, (first, last, _)) in enumerate(LANDMARK_GROUPS.items()):
            for offset in range(last - first + 1):
                points.append((4 + 2 * offset, 4 + 6 * row))
        mask = rasterize_contour(LandmarkSet(np.array(points) / 64), 64)
        colors = {tuple(c) for c in mask.pixels.reshape(-1, 3)}
        assert set(ContourPalette().colors()) <= colors

    def test_degenerate_landmarks_draw_a_single_pixel(self):
        mask = rasterize_contour(grid_landmarks([(10, 20)], size=32), 32)
        lit = np.argwhere(mask.pixels.any(axis=2))
        assert lit.tolist() == [[20, 10]]
        assert tuple(mask.pixels[20, 10]) == ContourPalette().mouth_inner

    def test_custom_palette(self):
        palette = ContourPalette(face_contour=(10, 10, 10))
        mask = rasterize_contour(face_like(), 64, palette)
        colors = {tuple(c) for c in mask.pixels.reshape(-1, 3)}
        assert (255, 0, 0) not in colors

    def test_invalid_palettes(self):
        with pytest.raises(ConfigurationError):
            ContourPalette(nose=(255, 0, 0))
        with pytest.raises(ConfigurationError):
            ContourPalette(eyes=(0, 0, 0))

    def test_to_array_range(self):
        values = rasterize_contour(face_like(), 32).to_array()
        assert values.shape == (3, 32, 32)
        assert values.min() == -1 and values.max() == 1


class TestBinaryMask(TestCase):
    def test_square(self):
        mask = rasterize_binary(grid_landmarks([(16, 16), (48, 16), (48, 48), (16, 48)]), 64)
        assert mask.pixels.sum() == 33 * 33
        assert mask.pixels[32, 32, 0] == 1
        assert mask.pixels[0, 0, 0] == 0

    def test_points_inside_the_hull_are_set(self):
        lms = face_like(1)
        mask = rasterize_binary(lms, 64)
        for x, y in lms.to_pixels(64):
            assert mask.pixels[y, x, 0] == 1

    def test_degenerate_hulls(self):
        point = rasterize_binary(grid_landmarks([(5, 6)], size=32), 32)
        assert point.pixels.sum() == 1 and point.pixels[6, 5, 0] == 1
        segment = rasterize_binary(grid_landmarks([(2, 3), (9, 3)], size=32), 32)
        assert segment.pixels.sum() == 8

    def test_translation_shifts_the_mask(self):
        corners = [(16, 20), (40, 18), (44, 40), (20, 44), (30, 30)]
        moved = [(x + 4, y + 3) for x, y in corners]
        mask = rasterize_binary(grid_landmarks(corners), 64).pixels[:, :, 0]
        shifted = rasterize_binary(grid_landmarks(moved), 64).pixels[:, :, 0]
        assert np.array_equal(np.roll(np.roll(mask, 3, axis=0), 4, axis=1), shifted)

    def test_dilation_grows_the_mask(self):
        rng = np.random.default_rng(2)
        corners = [(24, 24), (40, 24), (40, 40), (24, 40)]
        pixels = corners + [tuple(p) for p in rng.integers(20, 45, (20, 2))]
        dilated = [(2 * x - 32, 2 * y - 32) for x, y in pixels]
        mask = rasterize_binary(grid_landmarks(pixels), 64).pixels
        bigger = rasterize_binary(grid_landmarks(dilated), 64).pixels
        assert np.all(bigger >= mask)
        assert bigger.sum() > mask.sum()

    def test_to_array_range(self):
        values = rasterize_binary(face_like(), 32).to_array()
        assert values.shape == (1, 32, 32)
        assert set(np.unique(values)) == {-1.0, 1.0}


def test_file_round_trip(tmp_path):
    original = LandmarkSet(np.random.default_rng(0).integers(0, 1001, (68, 2)) / 1000)
    path = str(tmp_path / "frame.lms")
    original.write(path)
    assert LandmarkSet.read(path) == original
    with open(path) as f:
        assert len(f.read().splitlines()) == 68


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=10**6), min_size=136, max_size=136))
def test_text_round_trip_on_a_micro_grid(coordinates):
    original = LandmarkSet(np.array(coordinates).reshape(68, 2) / 10**6)
    assert parse_landmarks(original.to_string()) == original


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1), min_size=136, max_size=136))
def test_text_round_trip_keeps_nine_decimals(coordinates):
    original = LandmarkSet(np.array(coordinates).reshape(68, 2))
    parsed = parse_landmarks(original.to_string())
    assert np.max(np.abs(parsed.points - original.points)) < 6e-10

def test_read_rejects_invalid_utf8(tmp_path):
    path = tmp_path / "frame.lms"
    path.write_bytes(b"0.5 0.5\n" * 3 + b"\xff\xfe 0.5\n" * 65)
    with pytest.raises(LandmarkParseError) as info:
        LandmarkSet.read(str(path))
    assert info.value.line_number == 4
    assert isinstance(info.value.__cause__, UnicodeDecodeError)


def test_convex_hull_is_counter_clockwise():
    hull = convex_hull([(0, 0), (2, 0), (1, 1), (2, 2), (0, 2)])
    assert hull == [(0, 0), (2, 0), (2, 2), (0, 2)]
    assert convex_hull([(1, 1), (1, 1)]) == [(1, 1)]


@pytest.mark.parametrize("mode", ["contour", "binary"])
def test_mask_png_round_trip(tmp_path, mode):
    mask = rasterize(face_like(3), 32, mode)
    path = str(tmp_path / f"{mode}.png")
    mask.save(path)
    loaded = MaskImage.load(path, mode)
    assert np.array_equal(loaded.pixels, mask.pixels)


def test_rasterize_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        rasterize(face_like(), 64, "dots")
    with pytest.raises(ConfigurationError):
        rasterize(face_like(), 8)
    with pytest.raises(ConfigurationError):
        MaskImage(pixels=np.zeros((4, 4, 3), dtype=np.uint8), mode="binary")
