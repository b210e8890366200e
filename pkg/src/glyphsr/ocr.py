"""Recognizer implementations and the plug-in contract.

A recognizer is any callable taking a crop (H, W, C float in [-1, 1]) and
returning an OcrResult. Two built-ins live here: a template matcher over
the glyph atlas, and a noisy oracle that corrupts ground-truth text at a
controlled character error rate. External recognizers attach through a
line-oriented subprocess protocol: the PNG path of each crop is written to
the child's stdin, the UTF-8 transcript is read back from its stdout.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .errors import InvalidRange
from .image import save_image
from .seeding import mix_seed
from .synth import GlyphAtlas

# cells whose best template correlation falls below this are background
BACKGROUND_NCC = 0.2


@dataclass
class OcrResult:
    text: str
    per_char_confidence: list[float]

    def __post_init__(self):
        if len(self.per_char_confidence) != len(self.text):
            raise InvalidRange("confidence list length must equal character count")


def template_recognize(crop: np.ndarray, atlas: GlyphAtlas) -> OcrResult:
    """Fixed-pitch template matching against the atlas.

    The crop is segmented into cells one scaled atlas-cell wide; each cell
    is scored against every glyph bitmap by normalized cross-correlation
    and the argmax character is emitted with its correlation as the
    confidence. Ties resolve to the earliest charset entry; cells scoring
    below the background threshold are skipped.
    """
    h = crop.shape[0]
    scale = h / atlas.cell_h
    pitch = max(1, int(round(atlas.cell_w * scale)))
    n_cells = crop.shape[1] // pitch
    if n_cells == 0:
        return OcrResult("", [])
    # flatten templates once, already rescaled to the crop's cell size
    templates = []
    for i in range(len(atlas.charset)):
        cell = atlas.cells[i].astype(np.float64) / 127.5 - 1.0
        if (h, pitch) != (atlas.cell_h, atlas.cell_w):
            cell = geometry.resize_bilinear(cell[:, :, None], (h, pitch))[:, :, 0]
        flat = cell.ravel() - cell.mean()
        norm = np.linalg.norm(flat)
        templates.append(flat / norm if norm > 0 else flat)
    tmat = np.stack(templates)  # (n_chars, h*pitch)
    chars, confs = [], []
    gray = crop.mean(axis=2)
    for c in range(n_cells):
        cell = gray[:, c * pitch : (c + 1) * pitch].ravel()
        cell = cell - cell.mean()
        norm = np.linalg.norm(cell)
        if norm == 0:
            continue
        scores = tmat @ (cell / norm)
        best = int(np.argmax(scores))
        if scores[best] < BACKGROUND_NCC:
            continue
        chars.append(atlas.charset[best])
        confs.append(float(scores[best]))
    return OcrResult("".join(chars), confs)


def noisy_oracle(gt_text: str, error_rate: float, charset, seed: int) -> OcrResult:
    """Corrupt ground-truth text character-by-character.

    Each character is independently replaced, with probability
    ``error_rate``, by a uniformly random different charset character.
    Length is always preserved; deterministic in the seed.
    """
    if not 0.0 <= error_rate <= 1.0:
        raise InvalidRange(f"error_rate {error_rate} outside [0, 1]")
    chars = sorted(set(charset))
    rng = np.random.default_rng(mix_seed("noisy-ocr", seed))
    out = []
    for ch in gt_text:
        if rng.uniform() < error_rate and len(chars) >= 2:
            alternatives = [c for c in chars if c != ch]
            out.append(alternatives[int(rng.integers(len(alternatives)))])
        else:
            out.append(ch)
    text = "".join(out)
    return OcrResult(text, [1.0 - error_rate] * len(text))


class ToyOcrFactory:
    """Binds the template recognizer for every record."""

    def __init__(self, atlas: GlyphAtlas):
        self.atlas = atlas

    def for_record(self, record) -> callable:
        return lambda crop: template_recognize(crop, self.atlas)

    def close(self):
        pass


class OracleOcrFactory:
    """Per-record noisy oracle.

    The corruption realization is keyed by the record alone, not by the
    image handed to the recognizer, so one record sees one transcript no
    matter which restoration stage asks. That keeps iterated runs
    comparable at a fixed error rate.
    """

    def __init__(self, error_rate: float, charset):
        self.error_rate = error_rate
        self.charset = charset

    def for_record(self, record) -> callable:
        gt = record["text"]
        seed = mix_seed("loop-ocr", record.get("seed", 0), record.get("id", ""))
        return lambda crop: noisy_oracle(gt, self.error_rate, self.charset, seed)

    def close(self):
        pass


class CommandOcrFactory:
    def __init__(self, command: str):
        self.runner = CommandOcr(command)

    def for_record(self, record) -> callable:
        return self.runner

    def close(self):
        self.runner.close()


class NullOcrFactory:
    """No recognizer: transcripts are empty, restorations run image-only."""

    def for_record(self, record) -> callable:
        return lambda crop: OcrResult("", [])

    def close(self):
        pass


def make_ocr_factory(spec: str, atlas: GlyphAtlas | None = None, charset=None):
    """Parse an --ocr style spec: toy | oracle:<rate> | cmd:<command> | none."""
    if spec == "toy":
        if atlas is None:
            raise InvalidRange("toy recognizer needs a glyph atlas")
        return ToyOcrFactory(atlas)
    if spec.startswith("oracle:"):
        rate = float(spec.split(":", 1)[1])
        if charset is None:
            raise InvalidRange("oracle recognizer needs the charset")
        return OracleOcrFactory(rate, charset)
    if spec.startswith("cmd:"):
        return CommandOcrFactory(spec.split(":", 1)[1])
    if spec == "none":
        return NullOcrFactory()
    raise InvalidRange(f"unknown recognizer spec {spec!r}")


class CommandOcr:
    """Recognizer backed by an external process.

    The child is spawned once; for every crop we write a PNG to a scratch
    directory, send its path on one stdin line, and read the transcript
    from one stdout line.
    """

    def __init__(self, command: str):
        self.command = command
        self._proc: subprocess.Popen | None = None
        self._scratch = tempfile.TemporaryDirectory(prefix="glyphsr-ocr-")
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

    def __call__(self, crop: np.ndarray) -> OcrResult:
        proc = self._ensure()
        path = Path(self._scratch.name) / f"crop_{self._count:06d}.png"
        self._count += 1
        save_image(crop, path)
        assert proc.stdin and proc.stdout
        proc.stdin.write(str(path) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        text = line.rstrip("\n")
        return OcrResult(text, [1.0] * len(text))

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._scratch.cleanup()
