"""Dual-condition classifier-free guidance and iterative OCR conditioning.

A restoration combines two noise estimates per sampler step: one from the
image-only branch and one from the image+text branch, mixed as
(1 - omega) * uncond + omega * cond. Iterative restoration alternates
recognition and restoration so cleaner images yield better transcripts.

Seed policy: a direct restore() uses the config seed as-is. Inside the
iterative loop every restore derives its noise seed from the config seed
and the transcript it conditions on, so runs with different transcripts
are decorrelated while repeated conditioning on the same transcript is a
fixed point (re-restoring with an unchanged transcript reproduces the
previous image bit for bit).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffusion
from .diffusion import DiffusionModel, image_to_tensor, tensor_to_image
from .errors import InvalidRange, ShapeMismatch
from .seeding import mix_seed


@dataclass
class GuidanceConfig:
    """Inference-time control surface."""

    omega: float = 1.0
    iterations: int = 0  # the loop count R
    ddim_steps: int = 5
    null_image: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise InvalidRange(f"ddim_steps must be >= 1, got {self.ddim_steps}")
        if self.iterations < 0:
            raise InvalidRange(f"iterations must be >= 0, got {self.iterations}")
        if not np.isfinite(self.omega):
            raise InvalidRange(f"omega must be finite, got {self.omega}")


def cfg_combine(eps_uncond, eps_cond, omega: float):
    """Classifier-free mix: (1 - omega) * uncond + omega * cond."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeMismatch(f"{tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    return (1.0 - omega) * eps_uncond + omega * eps_cond


def _branch_seed(base_seed: int, text: str | None) -> int:
    marker = "\x00null" if not text else text
    return mix_seed("iter-restore", base_seed, marker)


def _effective_text(text: str | None, cfg: GuidanceConfig) -> str | None:
    """The conditioning a restore call actually uses: empty transcripts and
    omega = 0 both collapse to the unconditional branch."""
    if not text or cfg.omega == 0.0:
        return None
    return text


def _restore_batch(
    conds: list[np.ndarray],
    texts: list[str | None],
    cfg: GuidanceConfig,
    model: DiffusionModel,
    seeds: list[int],
) -> list[np.ndarray]:
    """Core batched restoration; single-image restore() wraps this."""
    if not (len(conds) == len(texts) == len(seeds)):
        raise ShapeMismatch("conds, texts, and seeds must align")
    model.eval_mode()
    dcfg = model.denoiser_config
    stack = torch.stack([image_to_tensor(c, model.dtype) for c in conds])
    if stack.shape[1:] != (dcfg.image_channels, dcfg.height, dcfg.width):
        raise ShapeMismatch(
            f"crops are {tuple(stack.shape[1:])}, model expects "
            f"({dcfg.image_channels}, {dcfg.height}, {dcfg.width})"
        )
    # empty transcripts carry no shape prior; treat them as no text at all
    texts = [t if t else None for t in texts]
    any_text = any(t is not None for t in texts)
    cond_input = None if cfg.null_image else stack
    omega = cfg.omega

    if any_text and omega != 0.0:
        feats, mask = model.encode_texts([t or "" for t in texts])
        feats = feats.to(model.dtype)
        drop_text = torch.tensor([t is None for t in texts])
    else:
        feats = mask = drop_text = None

    def eps_fn(x, t):
        with torch.no_grad():
            if feats is None:
                return model.denoiser(x, t, cond_input)
            cond_eps = model.denoiser(x, t, cond_input, feats, mask, drop_text=drop_text)
            if omega == 1.0:
                return cond_eps
            uncond_eps = model.denoiser(x, t, cond_input)
            return cfg_combine(uncond_eps, cond_eps, omega)

    out = diffusion.ddim_sample(stack, eps_fn, model.schedule, cfg.ddim_steps, seeds)
    return [tensor_to_image(out[i]) for i in range(out.shape[0])]


def restore(
    c_img: np.ndarray, text: str | None, cfg: GuidanceConfig, model: DiffusionModel
) -> np.ndarray:
    """Restore one line crop, optionally guided by a transcript.

    text None (or empty) runs the image-only branch alone, equivalent to
    omega = 0; null_image in the config replaces the image condition with
    the learned null encoding in both branches while the crop still serves
    as the base the predicted residual is added onto.
    """
    return _restore_batch([c_img], [text], cfg, model, [cfg.seed])[0]


def _ocr_text(result) -> str:
    return result if isinstance(result, str) else result.text


def iterative_restore(
    c_img: np.ndarray, cfg: GuidanceConfig, ocr, model: DiffusionModel
) -> tuple[np.ndarray, list[str]]:
    """Alternate recognition and restoration for cfg.iterations rounds.

    R = 0 recognizes the input crop once and restores with that text.
    R >= 1 first restores image-only, then loops: recognize the current
    image, restore the original crop with the new transcript. Returns the
    final image and every transcript used, in order.
    """
    r = cfg.iterations
    if r == 0:
        text = _ocr_text(ocr(c_img))
        eff = _effective_text(text, cfg)
        out = _restore_batch([c_img], [eff], cfg, model, [_branch_seed(cfg.seed, eff)])[0]
        return out, [text]
    x = _restore_batch([c_img], [None], cfg, model, [_branch_seed(cfg.seed, None)])[0]
    history = []
    for _ in range(r):
        text = _ocr_text(ocr(x))
        history.append(text)
        eff = _effective_text(text, cfg)
        x = _restore_batch([c_img], [eff], cfg, model, [_branch_seed(cfg.seed, eff)])[0]
    return x, history


def iterative_restore_batch(
    conds: list[np.ndarray],
    cfg: GuidanceConfig,
    ocr_fns: list,
    model: DiffusionModel,
    seeds: list[int],
    chunk: int = 32,
) -> tuple[list[np.ndarray], list[list[str]]]:
    """Vectorized Algorithm-1 loop over many crops.

    ocr_fns and seeds are per-crop; restoration steps run chunked through
    the batched sampler while transcripts are tracked per crop. The call
    structure per crop is identical to iterative_restore.
    """

    def run(batch_conds, batch_texts, batch_seeds):
        outs = []
        for lo in range(0, len(batch_conds), chunk):
            hi = lo + chunk
            outs.extend(
                _restore_batch(batch_conds[lo:hi], batch_texts[lo:hi], cfg, model, batch_seeds[lo:hi])
            )
        return outs

    n = len(conds)
    histories: list[list[str]] = [[] for _ in range(n)]
    if cfg.iterations == 0:
        texts = [_ocr_text(ocr_fns[i](conds[i])) for i in range(n)]
        for i, t in enumerate(texts):
            histories[i].append(t)
        effs = [_effective_text(t, cfg) for t in texts]
        outs = run(conds, effs, [_branch_seed(seeds[i], effs[i]) for i in range(n)])
        return outs, histories
    xs = run(conds, [None] * n, [_branch_seed(seeds[i], None) for i in range(n)])
    for _ in range(cfg.iterations):
        texts = [_ocr_text(ocr_fns[i](xs[i])) for i in range(n)]
        for i, t in enumerate(texts):
            histories[i].append(t)
        effs = [_effective_text(t, cfg) for t in texts]
        xs = run(conds, effs, [_branch_seed(seeds[i], effs[i]) for i in range(n)])
    return xs, histories
