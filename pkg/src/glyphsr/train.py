"""Training loop: Adam over the diffusion objective with JSONL loss
logging, periodic atomic checkpoints, and resume.

Batches are derived from per-step seeds, so a resumed run consumes exactly
the same sample/noise stream an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ck
from .config import build_model
from .diffusion import DiffusionBatch, DiffusionModel, training_step
from .errors import IOFailure, NonFiniteActivation, NonFiniteLoss
from .seeding import mix_seed
from .synth import load_manifest
from .textcodec import tokenize


def _load_png_u8(path: Path, channels: int) -> np.ndarray:
    with Image.open(path) as pil:
        if channels == 1 and pil.mode != "L":
            pil = pil.convert("L")
        if channels == 3 and pil.mode != "RGB":
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


class TrainingData:
    """Manifest records decoded once into memory as uint8 planes."""

    def __init__(self, manifest_path, model: DiffusionModel):
        self.root = Path(manifest_path).parent
        header, records = load_manifest(manifest_path)
        if not records:
            raise IOFailure(f"manifest {manifest_path} has no records")
        self.header = header
        self.records = records
        cfg = model.denoiser_config
        h, w, c = cfg.height, cfg.width, cfg.image_channels
        n = len(records)
        self.lr = np.zeros((n, h, w, c), dtype=np.uint8)
        self.hr = np.zeros((n, h, w, c), dtype=np.uint8)
        m = model.text_config.max_tokens
        self.token_ids = np.zeros((n, m), dtype=np.int64)
        self.token_mask = np.zeros((n, m), dtype=bool)
        hr_cache: dict[str, np.ndarray] = {}
        for i, rec in enumerate(records):
            lr = _load_png_u8(self.root / rec["lr_path"], c)
            if rec["hr_path"] not in hr_cache:
                hr_cache[rec["hr_path"]] = _load_png_u8(self.root / rec["hr_path"], c)
            hr = hr_cache[rec["hr_path"]]
            self.lr[i] = _fit_line(lr, h, w)
            self.hr[i] = _fit_line(hr, h, w)
            seq = tokenize(rec["text"], m)
            self.token_ids[i] = seq.ids
            self.token_mask[i] = seq.mask

    def __len__(self) -> int:
        return len(self.records)


def _fit_line(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pad (replicate last column) or center-crop a line to width w."""
    if arr.shape[0] != h:
        raise IOFailure(f"line height {arr.shape[0]} != expected {h}")
    if arr.shape[1] < w:
        pad = w - arr.shape[1]
        return np.concatenate([arr, np.repeat(arr[:, -1:], pad, axis=1)], axis=1)
    return arr[:, :w]


def make_training_batch(
    data: TrainingData, model: DiffusionModel, step: int, seed: int, batch_size: int,
    drop_text: float, drop_image: float,
) -> DiffusionBatch:
    """Deterministic batch for a given global step."""
    rng = np.random.default_rng(mix_seed("train-batch", seed, step))
    idx = rng.integers(0, len(data), size=batch_size)
    lr = torch.from_numpy(data.lr[idx]).to(model.dtype).permute(0, 3, 1, 2) / 127.5 - 1.0
    hr = torch.from_numpy(data.hr[idx]).to(model.dtype).permute(0, 3, 1, 2) / 127.5 - 1.0
    g = torch.Generator().manual_seed(mix_seed("train-noise", seed, step))
    t = torch.randint(0, model.schedule.T, (batch_size,), generator=g)
    eps = torch.randn(lr.shape, generator=g, dtype=torch.float32).to(model.dtype)
    gates = torch.rand(2, batch_size, generator=g)
    return DiffusionBatch(
        x0=(hr - lr) / 2.0,
        cond=lr,
        token_ids=torch.from_numpy(data.token_ids[idx]),
        token_mask=torch.from_numpy(data.token_mask[idx]),
        drop_text=gates[0] < drop_text,
        drop_image=gates[1] < drop_image,
        t=t,
        eps=eps,
    )


def run_training(
    doc: dict,
    manifest_path,
    steps: int,
    out_ckpt,
    resume=None,
    log_path=None,
    progress_every: int = 200,
) -> dict:
    """Train (or resume) a model for `steps` total optimizer steps.

    Loss is appended per step to the JSONL log. A non-finite loss rolls
    back to the last checkpoint and retries once; a second failure
    propagates. Returns summary info (final loss stats, paths).
    """
    train_cfg = doc["training"]
    seed = doc["seed"]
    if resume:
        model, opt_tensors, _ = ck.load_checkpoint(resume)
    else:
        model, opt_tensors = build_model(doc), {}
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg["lr"])
    ck.restore_optimizer(model, optimizer, opt_tensors)

    data = TrainingData(manifest_path, model)
    out_ckpt = Path(out_ckpt)
    log_path = Path(log_path) if log_path else out_ckpt.with_suffix(".loss.jsonl")
    log_mode = "a" if (resume and log_path.exists()) else "w"
    ckpt_every = train_cfg.get("ckpt_every", 500)

    losses = []
    last_good = resume
    retried_step = -1
    start_step = model.step_count
    with open(log_path, log_mode, encoding="utf-8") as log:
        step = start_step
        while step < steps:
            t0 = time.monotonic()
            batch = make_training_batch(
                data, model, step, seed, train_cfg["batch_size"],
                train_cfg["drop_text"], train_cfg["drop_image"],
            )
            try:
                loss, _ = training_step(model, batch)
            except (NonFiniteLoss, NonFiniteActivation):
                if last_good is None or retried_step == step:
                    raise
                model, opt_tensors, _ = ck.load_checkpoint(last_good)
                optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg["lr"])
                ck.restore_optimizer(model, optimizer, opt_tensors)
                retried_step = step
                step = model.step_count
                continue
            optimizer.step()
            model.step_count = step + 1
            losses.append(loss)
            log.write(json.dumps({"step": step + 1, "loss": loss,
                                  "wall_ms": round(1000 * (time.monotonic() - t0), 2)}) + "\n")
            step += 1
            if step % ckpt_every == 0 or step == steps:
                ck.save_checkpoint(model, out_ckpt, optimizer=optimizer)
                last_good = out_ckpt
            if progress_every and step % progress_every == 0:
                recent = losses[-100:]
                print(f"step {step}/{steps} loss {np.mean(recent):.4f}", flush=True)
    if model.step_count == 0:
        # steps == 0: still materialize an initialized checkpoint
        ck.save_checkpoint(model, out_ckpt, optimizer=optimizer)
    return {
        "ckpt": str(out_ckpt),
        "log": str(log_path),
        "steps": model.step_count,
        "final_loss": float(np.mean(losses[-100:])) if losses else None,
    }


def smoothed_losses(log_path, window: int = 100) -> dict[int, float]:
    """Trailing-window mean of the loss log, keyed by step."""
    steps, losses = [], []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                steps.append(rec["step"])
                losses.append(rec["loss"])
    out = {}
    for i, s in enumerate(steps):
        lo = max(0, i + 1 - window)
        out[s] = float(np.mean(losses[lo : i + 1]))
    return out
