import sys

import numpy as np
import pytest

from glyphsr import ocr, synth
from glyphsr.errors import InvalidRange

CHARSET = "A7BXY中文"


@pytest.fixture(scope="module")
def atlas():
    return synth.make_atlas(CHARSET, seed=2)


class TestTemplateRecognize:
    def test_clean_self_match(self, atlas):
        crop = synth.render_text("A7", atlas)
        res = ocr.template_recognize(crop, atlas)
        assert res.text == "A7"
        assert all(c > 0.99 for c in res.per_char_confidence)

    def test_blank_crop_empty(self, atlas):
        crop = np.ones((48, 96, 1))
        res = ocr.template_recognize(crop, atlas)
        assert res.text == "" and res.per_char_confidence == []

    def test_degenerate_crop_empty(self, atlas):
        res = ocr.template_recognize(np.ones((48, 4, 1)), atlas)
        assert res.text == ""

    def test_clean_fixed_point_random_strings(self, atlas):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            s = "".join(CHARSET[int(k)] for k in rng.integers(0, len(CHARSET), n))
            crop = synth.render_text(s, atlas)
            assert ocr.template_recognize(crop, atlas).text == s

    def test_fixed_point_at_other_heights(self, atlas):
        crop = synth.render_text("7YX", atlas, height=96)
        assert ocr.template_recognize(crop, atlas).text == "7YX"

    def test_noise_degrades_accuracy(self, atlas):
        # noise_std 0.3 plus a strong downsample; template matching over
        # full-size cells is otherwise immune to i.i.d. noise alone
        cfg = synth.DegradationConfig((0, 0), (0.3, 0.3), (6, 8), (256, 256))
        clean = synth.render_text("A7", atlas)
        hits = 0
        n = 500
        for seed in range(n):
            noisy = synth.degrade(clean, cfg, seed=seed)
            if ocr.template_recognize(noisy, atlas).text == "A7":
                hits += 1
        assert hits / n < 1.0  # strictly below the clean case, which is exact

    def test_deterministic(self, atlas):
        cfg = synth.DegradationConfig((0.5, 0.5), (0.2, 0.2), (2, 2), (64, 64))
        noisy = synth.degrade(synth.render_text("BXY", atlas), cfg, seed=11)
        a = ocr.template_recognize(noisy, atlas)
        b = ocr.template_recognize(noisy, atlas)
        assert a.text == b.text and a.per_char_confidence == b.per_char_confidence


class TestNoisyOracle:
    def test_zero_rate_identity(self):
        res = ocr.noisy_oracle("A7BXY", 0.0, CHARSET, seed=0)
        assert res.text == "A7BXY"
        assert res.per_char_confidence == [1.0] * 5

    def test_full_rate_substitutes_everything(self):
        for seed in range(20):
            res = ocr.noisy_oracle("A7BXY", 1.0, CHARSET, seed=seed)
            assert all(a != b for a, b in zip(res.text, "A7BXY"))

    def test_rate_concentration(self):
        gt = "A7BXY" * 2000  # 10k characters
        res = ocr.noisy_oracle(gt, 0.3, CHARSET, seed=42)
        frac = sum(a != b for a, b in zip(res.text, gt)) / len(gt)
        assert abs(frac - 0.3) < 0.02

    def test_length_preserved_and_deterministic(self):
        a = ocr.noisy_oracle("中文AB", 0.5, CHARSET, seed=7)
        b = ocr.noisy_oracle("中文AB", 0.5, CHARSET, seed=7)
        assert a.text == b.text and len(a.text) == 4

    def test_bad_rate_rejected(self):
        with pytest.raises(InvalidRange):
            ocr.noisy_oracle("A", 1.5, CHARSET, seed=0)


class TestCommandOcr:
    def test_subprocess_protocol(self, tmp_path, atlas):
        # stub recognizer: answers with the width of the PNG it was given
        script = tmp_path / "stub.py"
        script.write_text(
            "import sys\n"
            "from PIL import Image\n"
            "for line in sys.stdin:\n"
            "    path = line.strip()\n"
            "    if not path:\n"
            "        continue\n"
            "    with Image.open(path) as im:\n"
            "        print(f'w{im.width}', flush=True)\n"
        )
        runner = ocr.CommandOcr(f"{sys.executable} {script}")
        try:
            crop = synth.render_text("A7", atlas)
            res = runner(crop)
            assert res.text == f"w{crop.shape[1]}"
            res2 = runner(np.ones((48, 24, 1)))
            assert res2.text == "w24"
        finally:
            runner.close()
