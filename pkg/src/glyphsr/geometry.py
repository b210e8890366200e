"""Affine region extraction and insertion, low-pass blending, and line tiling.

An affine transform is a 2x3 float64 matrix ``m`` that maps source pixel
coordinates to target coordinates: (xt, yt) = m . (xs, ys, 1). Coordinates
use x = column, y = row, with the origin at the top-left pixel center.

All functions are pure; none mutate their inputs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTriangle, GapBetweenTiles, ShapeMismatch, SingularTransform
from .image import assert_image

DET_EPS = 1e-9


def _triangle_det(pts: np.ndarray) -> float:
    """Signed parallelogram area spanned by the triangle edges."""
    a, b, c = pts
    return float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def affine_from_boxes(src_triangle, dst_triangle) -> np.ndarray:
    """Solve the 2x3 affine transform mapping three source points onto three
    destination points.

    The six unknowns are determined from the linear system given by the
    three point correspondences. Raises DegenerateTriangle if either
    triangle is (numerically) collinear.
    """
    src = np.asarray(src_triangle, dtype=np.float64).reshape(3, 2)
    dst = np.asarray(dst_triangle, dtype=np.float64).reshape(3, 2)
    if abs(_triangle_det(src)) < DET_EPS or abs(_triangle_det(dst)) < DET_EPS:
        raise DegenerateTriangle(f"collinear triangle: src={src.tolist()} dst={dst.tolist()}")
    # rows [xs, ys, 1] . [a, b, c]^T = xd (and likewise for yd)
    lhs = np.concatenate([src, np.ones((3, 1))], axis=1)
    coeff_x = np.linalg.solve(lhs, dst[:, 0])
    coeff_y = np.linalg.solve(lhs, dst[:, 1])
    return np.stack([coeff_x, coeff_y])


def invert_affine(theta: np.ndarray) -> np.ndarray:
    """Invert a 2x3 affine transform; raises SingularTransform."""
    m = np.asarray(theta, dtype=np.float64).reshape(2, 3)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < DET_EPS:
        raise SingularTransform(f"linear part is singular: {m.tolist()}")
    inv_lin = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
    inv_t = -inv_lin @ m[:, 2]
    return np.concatenate([inv_lin, inv_t[:, None]], axis=1)


def apply_affine(theta: np.ndarray, points) -> np.ndarray:
    """Apply the transform to an (N, 2) array of (x, y) points."""
    m = np.asarray(theta, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ m[:, :2].T + m[:, 2]


def scale_affine_source(theta: np.ndarray, factor: float) -> np.ndarray:
    """Rescale a transform so it accepts source coordinates multiplied by
    ``factor`` (used to crop from an upscaled image with the original
    region parameters)."""
    m = np.asarray(theta, dtype=np.float64).copy()
    m[:, :2] /= factor
    return m


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample image at float coordinates with replicate-edge behavior.

    xs/ys share a common shape; the result is (shape..., C).
    """
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def warp(image: np.ndarray, theta: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resample ``image`` under the transform.

    Output pixel (xt, yt) takes the bilinear sample of the source at
    theta^-1 . (xt, yt, 1); samples outside the source replicate the
    nearest edge pixel.

    Args:
        image: source raster (H, W, C).
        theta: 2x3 transform mapping source coords to output coords.
        out_size: (height, width) of the result.
    """
    assert_image(image)
    out_h, out_w = int(out_size[0]), int(out_size[1])
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatch(f"out_size must be positive, got {out_size}")
    inv = invert_affine(theta)
    yt, xt = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs = inv[0, 0] * xt + inv[0, 1] * yt + inv[0, 2]
    ys = inv[1, 0] * xt + inv[1, 1] * yt + inv[1, 2]
    return _bilinear_sample(image, xs, ys)


def resize_bilinear(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and replicate edges."""
    assert_image(image)
    h, w = image.shape[:2]
    out_h, out_w = int(out_size[0]), int(out_size[1])
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return _bilinear_sample(image, grid_x, grid_y)


def resize_area(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Area (box-integration) resize; exact average of covered source area.

    Intended for downscaling; identity when the size is unchanged.
    """
    assert_image(image)
    h, w = image.shape[:2]
    out_h, out_w = int(out_size[0]), int(out_size[1])
    if (out_h, out_w) == (h, w):
        return image.copy()

    def axis_weights(n_in: int, n_out: int) -> np.ndarray:
        ratio = n_in / n_out
        mat = np.zeros((n_out, n_in))
        for j in range(n_out):
            lo, hi = j * ratio, (j + 1) * ratio
            i0, i1 = int(math.floor(lo)), int(math.ceil(hi))
            for i in range(i0, min(i1, n_in)):
                mat[j, i] = min(hi, i + 1) - max(lo, i)
        return mat / ratio

    wy = axis_weights(h, out_h)
    wx = axis_weights(w, out_w)
    tmp = np.einsum("oh,hwc->owc", wy, image.astype(np.float64))
    return np.einsum("pw,owc->opc", wx, tmp)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled, unit-sum Gaussian with truncation radius ceil(3 sigma)."""
    if sigma < 0:
        raise ShapeMismatch(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(k ** 2) / (2.0 * sigma ** 2))
    return kern / kern.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    if radius == 0:
        return img.copy()
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    n = img.shape[axis]
    sl = [slice(None)] * img.ndim
    for i, w in enumerate(kernel):
        sl[axis] = slice(i, i + n)
        out += w * padded[tuple(sl)]
    return out


def lowpass(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate-edge padding; sigma 0 is the
    identity."""
    assert_image(image)
    kern = gaussian_kernel(sigma)
    out = _convolve_axis(image.astype(np.float64), kern, axis=0)
    return _convolve_axis(out, kern, axis=1)


def blend_crop(g_crop: np.ndarray, f_crop: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Replace the low-frequency content of a restored crop with that of the
    background upscaler's crop.

    Returns LPF(f_crop) + (g_crop - LPF(g_crop)), clamped to [-1, 1]: the
    background crop supplies color and coarse structure, the restored crop
    supplies the fine detail.
    """
    if g_crop.shape != f_crop.shape:
        raise ShapeMismatch(f"{g_crop.shape} vs {f_crop.shape}")
    out = lowpass(f_crop, sigma) + g_crop - lowpass(g_crop, sigma)
    return np.clip(out, -1.0, 1.0)


def paste_regions(
    base: np.ndarray, crops: list[tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, list[dict]]:
    """Warp crops back into the base image.

    Each (crop, theta) pair is written over ``base`` on the pixel set whose
    theta-image falls inside the crop; overlaps resolve last-writer-wins in
    list order, and pixels outside every region are untouched. Parts of a
    region falling outside the base are silently clipped and noted in the
    returned coverage report.
    """
    assert_image(base)
    out = base.copy()
    h, w = base.shape[:2]
    yt, xt = np.mgrid[0:h, 0:w].astype(np.float64)
    coverage = []
    for idx, (crop, theta) in enumerate(crops):
        assert_image(crop)
        ch, cw = crop.shape[:2]
        m = np.asarray(theta, dtype=np.float64)
        cx = m[0, 0] * xt + m[0, 1] * yt + m[0, 2]
        cy = m[1, 0] * xt + m[1, 1] * yt + m[1, 2]
        mask = (cx >= 0.0) & (cx <= cw - 1.0) & (cy >= 0.0) & (cy <= ch - 1.0)
        if mask.any():
            out[mask] = _bilinear_sample(crop, cx[mask], cy[mask])
        # region corners mapped back into base coords tell whether any part
        # of the crop fell outside the canvas
        corners = np.array([[0, 0], [cw - 1, 0], [0, ch - 1], [cw - 1, ch - 1]], dtype=np.float64)
        back = apply_affine(invert_affine(m), corners)
        clipped = bool(
            (back[:, 0] < 0).any() or (back[:, 0] > w - 1).any()
            or (back[:, 1] < 0).any() or (back[:, 1] > h - 1).any()
        )
        coverage.append({"index": idx, "written_px": int(mask.sum()), "clipped": clipped})
    return out, coverage


@dataclass
class LineTiles:
    """Result of slicing a text line into fixed-width tiles."""

    tiles: list[np.ndarray]
    starts: list[int]
    padded: bool
    content_width: int


def slice_line(line: np.ndarray, tile_w: int = 480, overlap: int = 16) -> LineTiles:
    """Cut a text line into tiles of width ``tile_w`` with the given overlap.

    Tiles advance by tile_w - overlap and the final tile is right-aligned
    to the line end. Lines narrower than tile_w are replicate-edge padded
    up to tile_w and flagged, recording the original width so callers can
    crop back after restoration.
    """
    assert_image(line)
    if tile_w <= 2 * overlap:
        raise ShapeMismatch(f"tile_w {tile_w} must exceed twice the overlap {overlap}")
    width = line.shape[1]
    if width < tile_w:
        padded = np.pad(line, ((0, 0), (0, tile_w - width), (0, 0)), mode="edge")
        return LineTiles([padded], [0], True, width)
    stride = tile_w - overlap
    starts = list(range(0, width - tile_w, stride))
    starts.append(width - tile_w)
    tiles = [line[:, s : s + tile_w].copy() for s in starts]
    return LineTiles(tiles, starts, False, width)


def stitch_tiles(
    tiles: list[np.ndarray], starts: list[int], line_w: int, overlap: int = 16
) -> np.ndarray:
    """Reassemble tiles into a line, cross-fading linearly inside overlaps.

    In each overlap zone the incoming tile's weight ramps 0 -> 1 left to
    right; outside overlaps tiles are copied verbatim. Raises
    GapBetweenTiles if any column of [0, line_w) is uncovered.
    """
    if not tiles:
        raise GapBetweenTiles("no tiles")
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ShapeMismatch(f"starts must be strictly increasing: {starts}")
    h, _, c = tiles[0].shape
    prev_end = 0
    for s, t in zip(starts, tiles):
        if s > prev_end:
            raise GapBetweenTiles(f"columns [{prev_end}, {s}) uncovered")
        prev_end = max(prev_end, s + t.shape[1])
    if prev_end < line_w:
        raise GapBetweenTiles(f"columns [{prev_end}, {line_w}) uncovered")
    out = np.zeros((h, line_w, c), dtype=np.float64)
    covered = 0
    for s, t in zip(starts, tiles):
        t_w = t.shape[1]
        end = min(s + t_w, line_w)
        if s >= covered:
            out[:, s:end] = t[:, : end - s]
        else:
            ov = covered - s  # actual overlap with what is already placed
            ramp = (np.arange(ov, dtype=np.float64) + 1.0) / (ov + 1.0)
            zone_end = min(covered, line_w)
            n = zone_end - s
            out[:, s:zone_end] = (
                out[:, s:zone_end] * (1.0 - ramp[:n, None]) + t[:, :n] * ramp[:n, None]
            )
            if end > covered:
                out[:, covered:end] = t[:, ov : ov + end - covered]
        covered = max(covered, end)
    return out


@dataclass
class TextRegion:
    """A detected text region: three source points mapped onto an upright
    crop box of size dst_size = (height, width)."""

    region_id: str
    src_triangle: np.ndarray  # (3, 2) points, order: top-left, bottom-left, bottom-right
    dst_size: tuple[int, int]
    theta: np.ndarray = field(repr=False)
    text: str | None = None
    image_id: str | None = None

    def dst_triangle(self) -> np.ndarray:
        h, w = self.dst_size
        return np.array([[0.0, 0.0], [0.0, float(h)], [float(w), float(h)]])


def make_region(
    region_id: str,
    src_triangle,
    height: int,
    text: str | None = None,
    image_id: str | None = None,
) -> TextRegion:
    """Build a TextRegion whose crop height is fixed and whose width keeps
    the source aspect ratio."""
    src = np.asarray(src_triangle, dtype=np.float64).reshape(3, 2)
    span_h = float(np.linalg.norm(src[1] - src[0]))
    span_w = float(np.linalg.norm(src[2] - src[1]))
    if span_h <= 0:
        raise DegenerateTriangle(f"zero-height region {region_id}")
    width = max(1, int(round(height * span_w / span_h)))
    dst = [[0.0, 0.0], [0.0, float(height)], [float(width), float(height)]]
    theta = affine_from_boxes(src, dst)
    return TextRegion(region_id, src, (height, width), theta, text, image_id)


def load_region_manifest(path: str | os.PathLike, height: int) -> list[TextRegion]:
    """Read a JSONL region manifest; one record per region."""
    regions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            regions.append(
                make_region(
                    str(rec["region_id"]),
                    rec["src_triangle"],
                    height,
                    rec.get("text"),
                    rec.get("image_id"),
                )
            )
    return regions


def save_region_manifest(regions: list[TextRegion], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in regions:
            rec = {
                "region_id": r.region_id,
                "image_id": r.image_id,
                "src_triangle": np.asarray(r.src_triangle).tolist(),
                "text": r.text,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
