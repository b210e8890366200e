"""Glyph rendering, degradation, and dataset synthesis.

Glyph bitmaps are generated procedurally (random stroke patterns keyed by
codepoint), which keeps the renderer font-free and deterministic while
still giving every character a distinctive, template-matchable shape.
Characters are laid out on a fixed-pitch grid so the template recognizer
can segment by column arithmetic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import InvalidRange, IOFailure, UnknownGlyph
from .image import from_uint8, ncc, save_image
from .seeding import mix_seed

DEFAULT_CELL_H = 48
DEFAULT_CELL_W = 24

# codepoint blocks rendered with denser stroke patterns
_CJK_RANGES = ((0x2E80, 0xA4CF), (0xF900, 0xFAFF), (0x20000, 0x2FA1F))


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def language_tag(text: str) -> str:
    """Coarse script label for manifest records."""
    if not text:
        return "empty"
    has_latin = any(c.isascii() for c in text)
    has_cjk = any(is_cjk(c) for c in text)
    if has_latin and has_cjk:
        return "mixed"
    if has_cjk:
        return "cjk"
    if has_latin:
        return "latin"
    return "other"


@dataclass
class GlyphAtlas:
    """Ordered charset with one uint8 bitmap per character (0 = ink)."""

    charset: str
    cells: np.ndarray  # (n_chars, cell_h, cell_w) uint8
    cell_h: int
    cell_w: int
    index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.charset) != self.cells.shape[0]:
            raise InvalidRange("charset and bitmap count disagree")
        self.index = {c: i for i, c in enumerate(self.charset)}

    def bitmap(self, ch: str) -> np.ndarray:
        """Float image (cell_h, cell_w, 1) in [-1, 1] for one character."""
        if ch not in self.index:
            raise UnknownGlyph(ch)
        return from_uint8(self.cells[self.index[ch]])


def _draw_glyph(rng: np.random.Generator, cell_h: int, cell_w: int, n_strokes: int) -> np.ndarray:
    """Rasterize a random stroke pattern as a uint8 cell, 255 = background."""
    yy, xx = np.mgrid[0:cell_h, 0:cell_w].astype(np.float64)
    ink = np.zeros((cell_h, cell_w))
    margin = 0.12
    lo = np.array([cell_w * margin, cell_h * margin])
    hi = np.array([cell_w * (1 - margin), cell_h * (1 - margin)])
    half_w = max(1.2, cell_w / 14.0)
    for _ in range(n_strokes):
        p = rng.uniform(lo, hi)
        q = rng.uniform(lo, hi)
        # reject very short strokes for visibility
        for _ in range(8):
            if np.linalg.norm(q - p) >= 0.35 * cell_h:
                break
            q = rng.uniform(lo, hi)
        d = q - p
        len2 = max(float(d @ d), 1e-9)
        t = ((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / len2
        t = np.clip(t, 0.0, 1.0)
        px = p[0] + t * d[0]
        py = p[1] + t * d[1]
        dist = np.sqrt((xx - px) ** 2 + (yy - py) ** 2)
        ink = np.maximum(ink, np.clip(half_w + 0.5 - dist, 0.0, 1.0))
    return np.round(255.0 * (1.0 - ink)).astype(np.uint8)


def make_atlas(
    charset,
    cell_h: int = DEFAULT_CELL_H,
    cell_w: int = DEFAULT_CELL_W,
    seed: int = 0,
) -> GlyphAtlas:
    """Build an atlas over the (sorted, de-duplicated) charset.

    Glyphs are re-rolled until every pair stays below 0.95 normalized
    cross-correlation, so template matching cannot confuse two clean cells.
    """
    chars = sorted(set(charset))
    if not chars:
        raise InvalidRange("charset is empty")
    cells = np.zeros((len(chars), cell_h, cell_w), dtype=np.uint8)
    floats: list[np.ndarray] = []
    for i, ch in enumerate(chars):
        strokes = 6 if is_cjk(ch) else 3
        for retry in range(32):
            rng = np.random.default_rng(mix_seed("glyph", ord(ch), seed, retry))
            cell = _draw_glyph(rng, cell_h, cell_w, strokes)
            cf = from_uint8(cell)
            if all(ncc(cf, other) < 0.95 for other in floats):
                break
        else:
            raise InvalidRange(f"could not draw a distinct glyph for {ch!r}")
        cells[i] = cell
        floats.append(cf)
    return GlyphAtlas("".join(chars), cells, cell_h, cell_w)


def save_atlas(atlas: GlyphAtlas, path: str | os.PathLike) -> None:
    """Write the atlas: one JSON header line, then the raw bitmap block
    (row-major, one byte per pixel)."""
    header = {
        "charset": atlas.charset,
        "cell_h": atlas.cell_h,
        "cell_w": atlas.cell_w,
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(atlas.cells.tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write atlas {path}: {e}") from e


def load_atlas(path: str | os.PathLike) -> GlyphAtlas:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            raw = fh.read()
    except OSError as e:
        raise IOFailure(f"cannot read atlas {path}: {e}") from e
    n = len(header["charset"])
    h, w = int(header["cell_h"]), int(header["cell_w"])
    if len(raw) != n * h * w:
        raise IOFailure(f"atlas bitmap block has {len(raw)} bytes, expected {n * h * w}")
    cells = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).copy()
    return GlyphAtlas(header["charset"], cells, h, w)


def render_text(text: str, atlas: GlyphAtlas, height: int = 48) -> np.ndarray:
    """Render text on a fixed-pitch grid, dark glyphs on light background.

    Cells are scaled so their height equals ``height``; output width is
    n_chars times the scaled cell width. The empty string renders as one
    blank cell.
    """
    scale = height / atlas.cell_h
    pitch = max(1, int(round(atlas.cell_w * scale)))
    n = max(1, len(text))
    out = np.ones((height, n * pitch, 1), dtype=np.float64)
    for i, ch in enumerate(text):
        cell = atlas.bitmap(ch)
        if (height, pitch) != (atlas.cell_h, atlas.cell_w):
            cell = geometry.resize_bilinear(cell, (height, pitch))
        out[:, i * pitch : (i + 1) * pitch] = cell
    return out


@dataclass
class DegradationConfig:
    """Parameter ranges for the synthetic degradation chain.

    Stages always run in the order blur -> noise -> downsample -> quantize;
    ``second_order`` repeats the chain once with freshly sampled values.
    Quantization to >= 256 levels is a no-op (inputs are 8-bit-derived).
    """

    blur_sigma_range: tuple[float, float] = (0.5, 2.5)
    noise_std_range: tuple[float, float] = (0.0, 0.06)
    downsample_range: tuple[float, float] = (1.0, 4.0)
    quantize_levels_range: tuple[int, int] = (32, 256)
    second_order: bool = False

    def __post_init__(self):
        for name in ("blur_sigma_range", "noise_std_range", "downsample_range", "quantize_levels_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidRange(f"{name}: lo {lo} > hi {hi}")
        if self.blur_sigma_range[0] < 0 or self.noise_std_range[0] < 0:
            raise InvalidRange("blur sigma and noise std must be >= 0")
        if self.downsample_range[0] < 1.0:
            raise InvalidRange("downsample factors must be >= 1")
        if self.quantize_levels_range[0] < 2:
            raise InvalidRange("need at least 2 quantization levels")

    def to_dict(self) -> dict:
        return {
            "blur_sigma_range": list(self.blur_sigma_range),
            "noise_std_range": list(self.noise_std_range),
            "downsample_range": list(self.downsample_range),
            "quantize_levels_range": list(self.quantize_levels_range),
            "second_order": self.second_order,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        return cls(
            tuple(d["blur_sigma_range"]),
            tuple(d["noise_std_range"]),
            tuple(d["downsample_range"]),
            tuple(d["quantize_levels_range"]),
            bool(d.get("second_order", False)),
        )


def _quantize(img: np.ndarray, levels: int) -> np.ndarray:
    if levels >= 256:
        return img
    v = np.clip(img, -1.0, 1.0)
    step = (levels - 1) / 2.0
    return np.round((v + 1.0) * step) / step - 1.0


def degrade_with_params(
    hr: np.ndarray, config: DegradationConfig, seed: int
) -> tuple[np.ndarray, dict]:
    """Apply the degradation chain; returns the LR image (re-upsampled to
    the HR size) and the sampled per-stage parameters.

    Deterministic in (config, seed): every stage draws from its own
    keyed generator, so results do not depend on evaluation order.
    """
    h, w = hr.shape[:2]
    img = hr.astype(np.float64)
    params: dict = {}
    passes = 2 if config.second_order else 1
    for p in range(passes):
        tag = "" if p == 0 else "_2"
        rng_blur = np.random.default_rng([seed, p, 0])
        rng_noise = np.random.default_rng([seed, p, 1])
        rng_down = np.random.default_rng([seed, p, 2])
        rng_quant = np.random.default_rng([seed, p, 3])

        sigma = float(rng_blur.uniform(*config.blur_sigma_range))
        if sigma > 0:
            img = geometry.lowpass(img, sigma)

        std = float(rng_noise.uniform(*config.noise_std_range))
        if std > 0:
            img = img + std * rng_noise.standard_normal(img.shape)

        factor = float(rng_down.uniform(*config.downsample_range))
        small_h = max(1, int(round(h / factor)))
        small_w = max(1, int(round(w / factor)))
        if (small_h, small_w) != (h, w):
            img = geometry.resize_area(img, (small_h, small_w))
            img = geometry.resize_bilinear(img, (h, w))

        lo, hi = config.quantize_levels_range
        levels = int(rng_quant.integers(lo, hi + 1))
        img = _quantize(img, levels)

        params.update(
            {f"blur_sigma{tag}": sigma, f"noise_std{tag}": std,
             f"downsample{tag}": factor, f"quantize_levels{tag}": levels}
        )
    return np.clip(img, -1.0, 1.0), params


def degrade(hr: np.ndarray, config: DegradationConfig, seed: int) -> np.ndarray:
    return degrade_with_params(hr, config, seed)[0]


def height_in_range(height_px: int, lo: int = 16, hi: int = 512) -> bool:
    """The crop-height filter applied to every dataset record."""
    return lo <= height_px <= hi


def _sample_height(rng: np.random.Generator) -> int:
    # log-uniform over a band wider than the filter, then reject, so the
    # filter is actually exercised and all three eval buckets are populated
    while True:
        h = int(round(float(np.exp(rng.uniform(np.log(8.0), np.log(768.0))))))
        if height_in_range(h):
            return h


def build_dataset(
    charset,
    n: int,
    config: DegradationConfig,
    seed: int,
    out_dir: str | os.PathLike,
    dup: int = 20,
    render_height: int = DEFAULT_CELL_H,
    max_chars: int = 10,
    atlas: GlyphAtlas | None = None,
) -> Path:
    """Render ``n`` random texts, emit ``dup`` degraded variants of each,
    and write PNGs plus a JSONL manifest (returned path).

    The whole build is a pure function of its arguments: identical inputs
    produce byte-identical manifests and images.
    """
    out = Path(out_dir)
    try:
        (out / "hr").mkdir(parents=True, exist_ok=True)
        (out / "lr").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create {out}: {e}") from e
    if atlas is None:
        atlas = make_atlas(charset)
    save_atlas(atlas, out / "atlas.bin")
    chars = atlas.charset
    records = []
    for i in range(n):
        rng = np.random.default_rng(mix_seed("sample", seed, i))
        length = int(rng.integers(1, max_chars + 1))
        text = "".join(chars[int(k)] for k in rng.integers(0, len(chars), size=length))
        height_px = _sample_height(rng)
        hr = render_text(text, atlas, render_height)
        hr_rel = f"hr/{i:06d}.png"
        save_image(hr, out / hr_rel)
        for k in range(dup):
            rec_seed = mix_seed("degrade", seed, i, k)
            lr, dparams = degrade_with_params(hr, config, rec_seed)
            lr_rel = f"lr/{i:06d}_{k:02d}.png"
            save_image(lr, out / lr_rel)
            records.append(
                {
                    "id": f"{i:06d}_{k:02d}",
                    "hr_path": hr_rel,
                    "lr_path": lr_rel,
                    "text": text,
                    "height_px": height_px,
                    "language_tag": language_tag(text),
                    "seed": rec_seed,
                    "degrade_params": dparams,
                }
            )
    manifest = out / "manifest.jsonl"
    header = {
        "kind": "dataset_header",
        "charset": chars,
        "n": n,
        "dup": dup,
        "render_height": render_height,
        "max_chars": max_chars,
        "seed": seed,
        "degrade": config.to_dict(),
    }
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return manifest


def load_manifest(path: str | os.PathLike) -> tuple[dict | None, list[dict]]:
    """Read a dataset manifest; returns (header, records)."""
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("kind") == "dataset_header":
                header = obj
            else:
                records.append(obj)
    return header, records
