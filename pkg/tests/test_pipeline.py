import sys

import numpy as np
import pytest

from glyphsr import geometry, pipeline
from glyphsr.errors import InvalidRange
from glyphsr.guidance import GuidanceConfig

from test_diffusion import tiny_model
from test_guidance import StubOcr


class TestBicubic:
    def test_factor_one_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, (10, 14, 1))
        np.testing.assert_array_equal(pipeline.bicubic_upscale(img, 1), img)

    def test_constant_preserved(self):
        img = np.full((6, 8, 3), 0.3)
        for f in (2, 4):
            out = pipeline.bicubic_upscale(img, f)
            assert out.shape == (6 * f, 8 * f, 3)
            np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_linear_ramp_reproduced(self):
        # closed-form oracle: cubic interpolation is exact on degree-1 data
        n = 32
        ramp = (np.arange(n) / (n - 1) * 2 - 1)[None, :, None] * np.ones((4, 1, 1))
        out = pipeline.bicubic_upscale(ramp, 2)
        xs = (np.arange(2 * n) + 0.5) / 2 - 0.5
        expected = xs / (n - 1) * 2 - 1
        interior = slice(4, 2 * n - 4)
        np.testing.assert_allclose(out[2, interior, 0], expected[interior], atol=1e-3)

    def test_bad_factor(self):
        with pytest.raises(InvalidRange):
            pipeline.bicubic_upscale(np.zeros((4, 4, 1)), 3)


class IdentityUpscaler:
    def upscale(self, image, factor):
        return pipeline.bicubic_upscale(image, factor)


def page_with_regions(rng, h=40, w=96):
    img = geometry.lowpass(rng.uniform(-1, 1, (h, w, 1)), 1.5) * 0.5
    return img


class TestRestoreFullImage:
    def setup_method(self):
        self.model = tiny_model(seed=30)  # line shape 8x16, 1 channel
        self.cfg = GuidanceConfig(omega=0.0, iterations=0, ddim_steps=2, seed=0)

    def region(self, rid, x, y, width, text=None):
        # axis-aligned region of line height 8
        tri = [(x, y), (x, y + 8), (x + width, y + 8)]
        return geometry.make_region(rid, tri, 8, text=text)

    def test_empty_regions_equal_background(self):
        rng = np.random.default_rng(1)
        img = page_with_regions(rng)
        out, report = pipeline.restore_full_image(
            img, [], pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr(), factor=2
        )
        np.testing.assert_array_equal(out, pipeline.bicubic_upscale(img, 2))
        assert report.to_dict()["per_region"] == []

    def test_identity_restoration_cancels(self, monkeypatch):
        # a restorer that reproduces its input exactly makes the whole
        # pipeline a no-op inside the region too (blend of g == f)
        monkeypatch.setattr(
            pipeline, "iterative_restore", lambda tile, cfg, ocr, model: (tile.copy(), ["x"])
        )
        rng = np.random.default_rng(2)
        img = page_with_regions(rng)
        regions = [self.region("r0", 8, 10, 40)]
        out, report = pipeline.restore_full_image(
            img, regions, IdentityUpscaler(), self.model, self.cfg, StubOcr(), factor=1, overlap=4
        )
        assert report.regions_processed == 1
        np.testing.assert_allclose(out, img, atol=1e-5)

    def test_disjoint_regions_compose_sequentially(self, monkeypatch):
        monkeypatch.setattr(
            pipeline,
            "iterative_restore",
            lambda tile, cfg, ocr, model: (np.full_like(tile, 0.5), ["x"]),
        )
        rng = np.random.default_rng(3)
        img = page_with_regions(rng)
        r1 = self.region("r1", 4, 4, 32)
        r2 = self.region("r2", 44, 24, 40)
        both, _ = pipeline.restore_full_image(
            img, [r1, r2], IdentityUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        step1, _ = pipeline.restore_full_image(
            img, [r1], IdentityUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        step2, _ = pipeline.restore_full_image(
            step1, [r2], IdentityUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        np.testing.assert_array_equal(both, step2)

    def test_outside_pixels_exact_and_shape_scales(self):
        rng = np.random.default_rng(4)
        img = page_with_regions(rng)
        region = self.region("r0", 10, 12, 24)
        factor = 2
        out, report = pipeline.restore_full_image(
            img, [region], pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr(),
            factor=factor, overlap=4,
        )
        assert out.shape == (img.shape[0] * factor, img.shape[1] * factor, 1)
        background = pipeline.bicubic_upscale(img, factor)
        scaled = geometry.scale_affine_source(region.theta, factor)
        yy, xx = np.mgrid[0 : out.shape[0], 0 : out.shape[1]].astype(np.float64)
        h, w = region.dst_size
        cx = scaled[0, 0] * xx + scaled[0, 1] * yy + scaled[0, 2]
        cy = scaled[1, 0] * xx + scaled[1, 1] * yy + scaled[1, 2]
        support = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
        np.testing.assert_array_equal(out[~support], background[~support])
        assert report.regions_processed == 1

    def test_rotated_region_supported(self):
        rng = np.random.default_rng(5)
        img = page_with_regions(rng, h=64, w=96)
        ang = np.radians(25)
        p0 = np.array([20.0, 18.0])
        down = np.array([-np.sin(ang), np.cos(ang)]) * 8
        right = np.array([np.cos(ang), np.sin(ang)]) * 36
        tri = [p0, p0 + down, p0 + down + right]
        region = geometry.make_region("rot", tri, 8)
        out, report = pipeline.restore_full_image(
            img, [region], pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        assert report.regions_failed == 0
        assert out.shape == img.shape

    def test_failed_region_isolated(self):
        rng = np.random.default_rng(6)
        img = page_with_regions(rng)
        bad = geometry.make_region("bad", [(2, 2), (2, 14), (50, 14)], 12)  # wrong line height
        good = self.region("good", 8, 20, 24)
        out, report = pipeline.restore_full_image(
            img, [bad, good], pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        assert report.regions_failed == 1
        assert report.regions_processed + report.regions_clipped == 1
        assert "error" in report.per_region[0]
        d = report.to_dict()
        assert d["regions_failed"] + d["regions_processed"] + d["regions_clipped"] == 2

    def test_clipped_region_reported(self):
        rng = np.random.default_rng(7)
        img = page_with_regions(rng)
        region = self.region("edge", 80, 10, 32)  # extends past the right edge
        out, report = pipeline.restore_full_image(
            img, [region], pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr(), overlap=4
        )
        assert report.regions_clipped == 1

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        img = page_with_regions(rng)
        regions = [self.region("r0", 8, 10, 40)]
        args = (img, regions, pipeline.BicubicUpscaler(), self.model, self.cfg, StubOcr())
        a, _ = pipeline.restore_full_image(*args, overlap=4)
        b, _ = pipeline.restore_full_image(*args, overlap=4)
        np.testing.assert_array_equal(a, b)


class TestCommandUpscaler:
    def test_subprocess_protocol(self, tmp_path):
        script = tmp_path / "up.py"
        script.write_text(
            "import sys\n"
            "from PIL import Image\n"
            "for line in sys.stdin:\n"
            "    parts = line.strip().split('\\t')\n"
            "    if len(parts) != 2:\n"
            "        continue\n"
            "    path, factor = parts[0], int(parts[1])\n"
            "    with Image.open(path) as im:\n"
            "        big = im.resize((im.width * factor, im.height * factor), Image.NEAREST)\n"
            "    out = path + f'.x{factor}.png'\n"
            "    big.save(out)\n"
            "    print(out, flush=True)\n"
        )
        up = pipeline.CommandUpscaler(f"{sys.executable} {script}")
        try:
            img = np.zeros((6, 8, 1))
            out = up.upscale(img, 2)
            assert out.shape == (12, 16, 1)
            np.testing.assert_allclose(out, 0.0, atol=1 / 127.5)
        finally:
            up.close()
