"""Heatmap post-processing, colormaps, pixmap and PNG codecs."""

import numpy as np
import pytest

from nnviz import render as R
from nnviz.render import ColorMap, Heatmap, RgbImage


def hm(grid, **kw):
    kw.setdefault("resolution", "feature")
    kw.setdefault("method", "test")
    kw.setdefault("target_class", 0)
    return Heatmap(grid=np.asarray(grid, np.float32), **kw)


class TestNormalize:
    def test_max_becomes_one(self):
        out = R.normalize(hm([[0.0, 2.5], [1.0, 0.5]]))
        assert out.normalized and not out.degenerate
        assert float(out.grid.max()) == 1.0
        np.testing.assert_allclose(out.grid, [[0, 1], [0.4, 0.2]])

    def test_degenerate_rule(self):
        out = R.normalize(hm(np.zeros((3, 3))))
        assert out.degenerate
        assert np.all(out.grid == 0)

    def test_idempotent(self):
        once = R.normalize(hm([[0.5, 3.0]]))
        twice = R.normalize(once)
        np.testing.assert_array_equal(once.grid, twice.grid)
        assert twice.normalized and not twice.degenerate

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            hm([[-1.0, 1.0]])


class TestUpsample:
    def test_constant_stays_constant(self):
        out = R.upsample_bilinear(hm(np.full((3, 3), 0.7)), (9, 13))
        np.testing.assert_allclose(out.grid, 0.7, atol=1e-6)
        assert out.resolution == "input"

    def test_one_by_one(self):
        out = R.upsample_bilinear(hm([[0.4]]), (5, 5))
        np.testing.assert_allclose(out.grid, 0.4, atol=1e-7)

    def test_checkerboard_hand_evaluated(self):
        # hand evaluation of the align-corners-false sampling formula:
        # src = (i+0.5)/2 - 0.5 -> {-0.25, 0.25, 0.75, 1.25} clamped to [0,1];
        # inner samples interpolate at fractions 0.25/0.75
        out = R.upsample_bilinear(hm([[0.0, 1.0], [1.0, 0.0]]), (4, 4))
        want = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(out.grid, want, atol=1e-6)

    def test_plateau_preserves_max(self):
        g = np.zeros((4, 4), np.float32)
        g[1:3, 1:3] = 0.9
        out = R.upsample_bilinear(hm(g), (11, 17))
        assert abs(float(out.grid.max()) - 0.9) <= 1e-6

    def test_downscale_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            R.upsample_bilinear(hm(np.zeros((4, 4))), (2, 8))


class TestColorize:
    def test_breakpoints_exact(self):
        m = R.normalize(hm([[0.0, 0.25, 0.5, 0.75, 1.0]]))
        # normalize leaves these values intact (max is already 1)
        img = R.colorize(m, R.THERMAL)
        want = [(0, 0, 128), (0, 255, 255), (0, 255, 0), (255, 255, 0),
                (128, 0, 0)]
        for i, rgb in enumerate(want):
            assert tuple(img.pixels[0, i]) == rgb

    def test_midpoint_between_custom_stops(self):
        cm = ColorMap(stops=((0.0, (64, 0, 0)), (1.0, (0, 64, 0))))
        m = hm([[0.5]], normalized=True)
        img = R.colorize(m, cm)
        assert tuple(img.pixels[0, 0]) == (32, 32, 0)

    def test_degenerate_renders_cold(self):
        m = R.normalize(hm(np.zeros((2, 2))))
        img = R.colorize(m, R.THERMAL)
        assert np.all(img.pixels == np.array([0, 0, 128], np.uint8))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="unit-range"):
            R.colorize(hm([[0.5]]))

    def test_bad_colormaps_rejected(self):
        with pytest.raises(ValueError):
            ColorMap(stops=((0.1, (0, 0, 0)), (1.0, (1, 1, 1))))
        with pytest.raises(ValueError):
            ColorMap(stops=((0.0, (0, 0, 0)), (0.5, (1, 1, 1)),
                            (0.5, (2, 2, 2)), (1.0, (3, 3, 3))))


class TestOverlay:
    def _img(self, value):
        return RgbImage(width=2, height=2,
                        pixels=np.full((2, 2, 3), value, np.uint8))

    def test_alpha_zero_is_base(self):
        out = R.overlay(self._img(100), self._img(200), 0.0)
        assert np.all(out.pixels == 100)

    def test_alpha_one_is_heat(self):
        out = R.overlay(self._img(100), self._img(200), 1.0)
        assert np.all(out.pixels == 200)

    def test_midpoint(self):
        out = R.overlay(self._img(100), self._img(200), 0.5)
        assert np.all(out.pixels == 150)

    def test_dim_mismatch(self):
        other = RgbImage(width=3, height=2, pixels=np.zeros((2, 3, 3), np.uint8))
        with pytest.raises(ValueError, match="dims"):
            R.overlay(self._img(0), other, 0.5)

    def test_bounded_by_inputs(self):
        rng = np.random.default_rng(0)
        a = RgbImage(width=4, height=4,
                     pixels=rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
        b = RgbImage(width=4, height=4,
                     pixels=rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
        out = R.overlay(a, b, 0.3)
        lo = np.minimum(a.pixels, b.pixels)
        hi = np.maximum(a.pixels, b.pixels)
        assert np.all(out.pixels >= lo) and np.all(out.pixels <= hi)


class TestPixmaps:
    def test_p6_header_is_bit_exact(self):
        img = RgbImage(width=1, height=1,
                       pixels=np.full((1, 1, 3), 255, np.uint8))
        blob = R.encode_ppm(img)
        assert blob == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_round_trip_random(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            img = RgbImage(width=w, height=h,
                           pixels=rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
            back = R.decode_ppm(R.encode_ppm(img))
            assert back.pixels.tobytes() == img.pixels.tobytes()

    def test_pgm_round_trip(self):
        g = np.arange(12, dtype=np.uint8).reshape(3, 4)
        np.testing.assert_array_equal(R.decode_pgm(R.encode_pgm(g)), g)

    def test_truncated_payload(self):
        img = RgbImage(width=2, height=2, pixels=np.zeros((2, 2, 3), np.uint8))
        with pytest.raises(R.PnmTruncatedError):
            R.decode_ppm(R.encode_ppm(img)[:-5])

    def test_malformed_header(self):
        with pytest.raises(R.PnmError):
            R.decode_ppm(b"P6\nxx yy\n255\n")
        with pytest.raises(R.PnmError):
            R.decode_ppm(b"P5\n1 1\n255\n\x00")

    def test_comments_tolerated(self):
        blob = b"P6\n# comment line\n2 1\n255\n" + bytes(6)
        img = R.decode_ppm(blob)
        assert (img.width, img.height) == (2, 1)


class TestPng:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        img = RgbImage(width=7, height=5,
                       pixels=rng.integers(0, 256, (5, 7, 3), dtype=np.uint8))
        back = R.decode_png(R.encode_png(img))
        assert back.pixels.tobytes() == img.pixels.tobytes()

    def test_garbage_rejected(self):
        with pytest.raises(R.ImageDecodeError):
            R.decode_png(b"\x89PNG\r\n\x1a\n not actually a png")

    def test_sniffing(self):
        img = RgbImage(width=2, height=2, pixels=np.zeros((2, 2, 3), np.uint8))
        assert R.decode_image(R.encode_png(img)).pixels.shape == (2, 2, 3)
        assert R.decode_image(R.encode_ppm(img)).pixels.shape == (2, 2, 3)
        gray = R.decode_image(R.encode_pgm(np.zeros((2, 2), np.uint8)))
        assert gray.pixels.shape == (2, 2, 3)
        with pytest.raises(R.ImageDecodeError):
            R.decode_image(b"GIF89a whatever")
