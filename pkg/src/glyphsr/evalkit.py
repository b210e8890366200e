"""Recognition metrics, height bucketing, and omega/R sweep tables.

Word accuracy follows the community convention for Latin text: lowercase
and strip non-alphanumerics before comparing. Non-ASCII strings are
compared as-is. Character error rate is the Levenshtein distance per
ground-truth character; it moves earlier than word accuracy on small
models, so both are always reported together.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyEvalSet
from .guidance import GuidanceConfig, iterative_restore_batch
from .image import load_image
from .seeding import mix_seed


def normalize(text: str) -> str:
    """Lowercase and keep only alphanumerics for ASCII text; identity
    otherwise."""
    if text.isascii():
        return "".join(c for c in text.lower() if c.isalnum())
    return text


def levenshtein(a: str, b: str) -> int:
    """Edit distance with the usual two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def word_accuracy(pairs: list[tuple[str, str]]) -> float:
    """Fraction of (prediction, ground truth) pairs matching exactly after
    normalization."""
    if not pairs:
        raise EmptyEvalSet("word_accuracy of zero pairs")
    hits = sum(normalize(p) == normalize(g) for p, g in pairs)
    return hits / len(pairs)


def char_error_rate(pairs: list[tuple[str, str]]) -> float:
    """Mean normalized edit distance per ground-truth character."""
    if not pairs:
        raise EmptyEvalSet("char_error_rate of zero pairs")
    total = 0.0
    for p, g in pairs:
        pn, gn = normalize(p), normalize(g)
        total += levenshtein(pn, gn) / max(1, len(gn))
    return total / len(pairs)


@dataclass
class EvalRecord:
    id: str
    gt_text: str
    pred_text: str
    height_px: int
    word_correct: bool
    cer: float


def make_eval_record(rec_id: str, gt: str, pred: str, height_px: int) -> EvalRecord:
    gn, pn = normalize(gt), normalize(pred)
    return EvalRecord(
        id=rec_id,
        gt_text=gt,
        pred_text=pred,
        height_px=height_px,
        word_correct=pn == gn,
        cer=levenshtein(pn, gn) / max(1, len(gn)),
    )


def _height_of(record) -> int:
    if isinstance(record, dict):
        return int(record["height_px"])
    return int(record.height_px)


def bucket_by_height(records) -> dict:
    """Partition records into small (< 32 px), medium (32-63 px), and
    large (>= 64 px) text-height buckets."""
    out = {"small": [], "medium": [], "large": []}
    for r in records:
        h = _height_of(r)
        if h < 32:
            out["small"].append(r)
        elif h < 64:
            out["medium"].append(r)
        else:
            out["large"].append(r)
    return out


def sweep(
    records: list[dict],
    data_root,
    model,
    ocr_factory,
    omega_list: list[float],
    r_list: list[int],
    evaluator_ocr,
    ddim_steps: int = 5,
    seed: int = 0,
    chunk: int = 32,
) -> dict:
    """Evaluate every (omega, R) cell over the dataset.

    For each cell, every record is restored with iterative OCR
    conditioning (loop recognizer built per record by ocr_factory), the
    result is read by the designated evaluator recognizer, and word
    accuracy plus character error rate are aggregated. Returns the table
    as a plain dict; see write_sweep_outputs for serialization.
    """
    if not omega_list or not r_list:
        raise EmptyEvalSet("omega_list and r_list must be non-empty")
    if not records:
        raise EmptyEvalSet("no evaluation records")
    root = Path(data_root)
    conds = [load_image(root / r["lr_path"]) for r in records]
    gts = [r["text"] for r in records]
    seeds = [mix_seed("sweep", seed, r["id"]) for r in records]
    ocr_fns = [ocr_factory.for_record(r) for r in records]
    rows = []
    for omega in omega_list:
        for r_iters in r_list:
            cfg = GuidanceConfig(omega=omega, iterations=r_iters, ddim_steps=ddim_steps)
            start = time.monotonic()
            outs, _ = iterative_restore_batch(conds, cfg, ocr_fns, model, seeds, chunk=chunk)
            preds = [evaluator_ocr(out).text for out in outs]
            pairs = list(zip(preds, gts))
            rows.append(
                {
                    "omega": omega,
                    "R": r_iters,
                    "word_acc": word_accuracy(pairs),
                    "cer": char_error_rate(pairs),
                    "n": len(records),
                    "wall_ms": round(1000 * (time.monotonic() - start), 1),
                }
            )
    digest = hashlib.sha256(
        json.dumps(
            {
                "omegas": omega_list,
                "rs": r_list,
                "steps": ddim_steps,
                "seed": seed,
                "n": len(records),
                "ids": [r["id"] for r in records[:32]],
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()
    return {"rows": rows, "config_hash": digest, "seeds": {"base": seed}}


def format_sweep_table(table: dict) -> str:
    """Aligned, human-readable rendering of a sweep table."""
    lines = [f"{'omega':>8} {'R':>3} {'word_acc':>9} {'cer':>8} {'n':>6} {'wall_ms':>10}"]
    for row in table["rows"]:
        lines.append(
            f"{row['omega']:>8.3g} {row['R']:>3d} {row['word_acc']:>9.4f} "
            f"{row['cer']:>8.4f} {row['n']:>6d} {row['wall_ms']:>10.1f}"
        )
    lines.append(f"config_hash: {table['config_hash']}")
    return "\n".join(lines)


def write_sweep_outputs(table: dict, out_dir, stem: str = "sweep") -> dict:
    """Write the machine-readable JSON, aligned text, and CSV renditions.

    Returns the paths written, keyed by kind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{stem}.json",
        "txt": out / f"{stem}.txt",
        "csv": out / f"{stem}.csv",
    }
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["txt"].write_text(format_sweep_table(table) + "\n", encoding="utf-8")
    with open(paths["csv"], "w", encoding="utf-8") as fh:
        fh.write("omega,R,word_acc,cer,n,wall_ms\n")
        for row in table["rows"]:
            fh.write(
                f"{row['omega']},{row['R']},{row['word_acc']},{row['cer']},{row['n']},{row['wall_ms']}\n"
            )
    return paths
