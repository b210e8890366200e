"""Full-image restoration: upscale the background, restore each text
region at line resolution, blend, and paste back.

The background upscaler is a pluggable contract (upscale(image, factor)
with factor in {1, 2, 4}); the default is bicubic interpolation, and an
external model can be attached over a line-oriented subprocess protocol
mirroring the OCR plug-in.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .diffusion import DiffusionModel
from .errors import GlyphSrError, InvalidRange, ShapeMismatch
from .geometry import TextRegion
from .guidance import GuidanceConfig, iterative_restore
from .image import assert_image, load_image, save_image


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.zeros_like(at)
    inner = at <= 1.0
    outer = (at > 1.0) & (at < 2.0)
    w[inner] = (a + 2.0) * at[inner] ** 3 - (a + 3.0) * at[inner] ** 2 + 1.0
    w[outer] = a * at[outer] ** 3 - 5.0 * a * at[outer] ** 2 + 8.0 * a * at[outer] - 4.0 * a
    return w


def _bicubic_axis_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, n_in - 1)
        w = _cubic_weights(src - (base + k))
        np.add.at(mat, (np.arange(n_out), idx), w)
    return mat


def bicubic_upscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Separable bicubic (a = -0.5) upscale with replicate edges."""
    assert_image(image)
    if factor not in (1, 2, 4):
        raise InvalidRange(f"factor must be 1, 2, or 4, got {factor}")
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    my = _bicubic_axis_matrix(h, factor)
    mx = _bicubic_axis_matrix(w, factor)
    tmp = np.einsum("oh,hwc->owc", my, image.astype(np.float64))
    return np.einsum("pw,owc->opc", mx, tmp)


class BicubicUpscaler:
    """Default background upscaler: plain bicubic interpolation."""

    def upscale(self, image: np.ndarray, factor: int) -> np.ndarray:
        return bicubic_upscale(image, factor)


class CommandUpscaler:
    """Background upscaler backed by an external process.

    Protocol: one request per line on stdin, "<input png path>\\t<factor>";
    the child answers with the path of the upscaled PNG on one stdout line.
    """

    def __init__(self, command: str):
        self.command = command
        self._proc: subprocess.Popen | None = None
        self._scratch = tempfile.TemporaryDirectory(prefix="glyphsr-upscale-")
        self._count = 0

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                shell=True,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def upscale(self, image: np.ndarray, factor: int) -> np.ndarray:
        proc = self._ensure()
        path = Path(self._scratch.name) / f"in_{self._count:06d}.png"
        self._count += 1
        save_image(image, path)
        assert proc.stdin and proc.stdout
        proc.stdin.write(f"{path}\t{factor}\n")
        proc.stdin.flush()
        out_path = proc.stdout.readline().strip()
        result = load_image(out_path)
        expect = (image.shape[0] * factor, image.shape[1] * factor)
        if result.shape[:2] != expect:
            raise ShapeMismatch(f"upscaler returned {result.shape[:2]}, expected {expect}")
        return result

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._scratch.cleanup()


@dataclass
class RestorationReport:
    """Bookkeeping for one full-image run."""

    regions_processed: int = 0
    regions_clipped: int = 0
    regions_failed: int = 0
    per_region: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "regions_processed": self.regions_processed,
            "regions_clipped": self.regions_clipped,
            "regions_failed": self.regions_failed,
            "per_region": self.per_region,
        }


def restore_full_image(
    image: np.ndarray,
    regions: list[TextRegion],
    upscaler,
    model: DiffusionModel,
    cfg: GuidanceConfig,
    ocr,
    factor: int = 1,
    overlap: int = 16,
) -> tuple[np.ndarray, RestorationReport]:
    """Compose background upscaling with per-region text restoration.

    Every region is cropped from the original image at line resolution,
    restored tile by tile with iterative OCR conditioning, blended against
    the matching crop of the upscaled background, and pasted back with the
    factor-scaled inverse transform. Regions are processed in manifest
    order; a failing region is skipped and reported, never fatal. Pixels
    outside all region supports are exactly the background upscale.
    """
    assert_image(image)
    out = upscaler.upscale(image, factor)
    report = RestorationReport()
    dcfg = model.denoiser_config
    for region in regions:
        entry: dict = {"region_id": region.region_id}
        start = time.monotonic()
        try:
            h, w = region.dst_size
            if h != dcfg.height:
                raise ShapeMismatch(
                    f"region height {h} != model line height {dcfg.height}"
                )
            crop = geometry.warp(image, region.theta, (h, w))
            if crop.shape[2] != dcfg.image_channels:
                raise ShapeMismatch(
                    f"image has {crop.shape[2]} channels, model expects {dcfg.image_channels}"
                )
            sliced = geometry.slice_line(crop, tile_w=dcfg.width, overlap=overlap)
            restored_tiles = []
            transcripts = []
            for tile in sliced.tiles:
                rest, history = iterative_restore(tile, cfg, ocr, model)
                restored_tiles.append(rest)
                transcripts.append(history)
            if sliced.padded:
                restored = restored_tiles[0][:, : sliced.content_width]
            else:
                restored = geometry.stitch_tiles(
                    restored_tiles, sliced.starts, w, overlap=overlap
                )
            scaled_theta = geometry.scale_affine_source(region.theta, factor)
            f_crop = geometry.warp(out, scaled_theta, (h, w))
            blended = geometry.blend_crop(restored, f_crop)
            out, coverage = geometry.paste_regions(out, [(blended, scaled_theta)])
            clipped = coverage[0]["clipped"]
            entry.update(
                {
                    "transcripts": transcripts,
                    "clipped": clipped,
                    "written_px": coverage[0]["written_px"],
                    "wall_ms": round(1000 * (time.monotonic() - start), 3),
                }
            )
            if clipped:
                report.regions_clipped += 1
            else:
                report.regions_processed += 1
        except GlyphSrError as e:
            entry.update({"error": str(e), "wall_ms": round(1000 * (time.monotonic() - start), 3)})
            report.regions_failed += 1
        report.per_region.append(entry)
    return out, report


def write_report(report: RestorationReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
