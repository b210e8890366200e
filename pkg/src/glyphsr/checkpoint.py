"""Binary checkpoint format.

Layout: magic "TSR1", a uint32 length-prefixed JSON header (schema version,
full model configs, schedule parameters, step count, tensor count), then
one record per tensor: uint16 name length + UTF-8 name, uint8 dtype tag,
uint8 rank, rank uint64 dims, and the little-endian row-major payload.

Writes are atomic (temp file + rename); loads validate every declared
shape against the config rebuilt from the header and refuse anything
truncated or inconsistent.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .diffusion import DenoiserConfig, DiffusionModel, make_schedule
from .errors import ArtifactMismatch, IOFailure
from .textcodec import TextEncoderConfig

MAGIC = b"TSR1"
SCHEMA_VERSION = 1

_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array)
    if data.dtype == np.float32:
        tag = 0
    elif data.dtype == np.float64:
        tag = 1
    elif data.dtype == np.int64:
        tag = 2
    else:
        data, tag = data.astype(np.float32), 0
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", tag, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
    fh.write(data.astype(_TAG_DTYPES[tag]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ArtifactMismatch(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in _TAG_DTYPES:
        raise ArtifactMismatch(f"unknown dtype tag {tag} for tensor {name}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dtype = _TAG_DTYPES[tag]
    count = 1
    for d in dims:
        count *= d
    raw = _read_exact(fh, count * dtype.itemsize)
    return name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def _model_tensors(model: DiffusionModel) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        out[name] = p.detach().cpu().numpy()
    return out


def _optimizer_tensors(model: DiffusionModel, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    by_id = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_id.get(id(p))
            if name is None:
                continue
            out[f"opt.exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy()
            out[f"opt.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
            step = state["step"]
            step_val = float(step.item()) if torch.is_tensor(step) else float(step)
            out[f"opt.step.{name}"] = np.array(step_val, dtype=np.float64)
    return out


def save_checkpoint(
    model: DiffusionModel,
    path: str | os.PathLike,
    optimizer: torch.optim.Optimizer | None = None,
    extra_header: dict | None = None,
) -> None:
    """Serialize the model (and optional Adam state) atomically."""
    tensors = _model_tensors(model)
    if optimizer is not None:
        tensors.update(_optimizer_tensors(model, optimizer))
    header = {
        "schema_version": SCHEMA_VERSION,
        "denoiser_config": model.denoiser_config.to_dict(),
        "text_config": model.text_config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "step_count": model.step_count,
        "tensor_count": len(tensors),
    }
    if extra_header:
        header["extra"] = extra_header
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            for name in sorted(tensors):
                _write_tensor(fh, name, tensors[name])
        os.replace(tmp, path)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e


def read_header(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            if _read_exact(fh, 4) != MAGIC:
                raise ArtifactMismatch(f"{path} is not a checkpoint (bad magic)")
            (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
            return json.loads(_read_exact(fh, hlen).decode("utf-8"))
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e


def load_checkpoint(
    path: str | os.PathLike, dtype=torch.float32
) -> tuple[DiffusionModel, dict[str, np.ndarray], dict]:
    """Rebuild the model from a checkpoint.

    Returns (model, optimizer tensors, header). Every tensor's shape is
    validated against the configuration declared in the header; any
    mismatch, unknown name, or missing parameter raises ArtifactMismatch.
    """
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    with fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ArtifactMismatch(f"{path} is not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ArtifactMismatch(f"unsupported schema version {header.get('schema_version')}")
        tensors = {}
        for _ in range(header["tensor_count"]):
            name, arr = _read_tensor(fh)
            tensors[name] = arr

    sched = header["schedule"]
    model = DiffusionModel(
        DenoiserConfig.from_dict(header["denoiser_config"]),
        TextEncoderConfig.from_dict(header["text_config"]),
        make_schedule(sched["T"], sched["beta_lo"], sched["beta_hi"]),
        dtype=dtype,
    )
    model.step_count = int(header.get("step_count", 0))

    params = dict(model.named_parameters())
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    weight_tensors = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    unknown = set(weight_tensors) - set(params)
    missing = set(params) - set(weight_tensors)
    if unknown or missing:
        raise ArtifactMismatch(
            f"tensor names disagree with config: unknown={sorted(unknown)[:3]} missing={sorted(missing)[:3]}"
        )
    with torch.no_grad():
        for name, p in params.items():
            arr = weight_tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ArtifactMismatch(
                    f"shape of {name} is {arr.shape}, config expects {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model, opt_tensors, header


def restore_optimizer(
    model: DiffusionModel, optimizer: torch.optim.Optimizer, opt_tensors: dict[str, np.ndarray]
) -> None:
    """Load Adam moments saved by save_checkpoint into a fresh optimizer."""
    if not opt_tensors:
        return
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"opt.exp_avg.{name}"
        if key not in opt_tensors:
            continue
        state = optimizer.state.setdefault(p, {})
        state["exp_avg"] = torch.from_numpy(opt_tensors[key]).to(p.dtype)
        state["exp_avg_sq"] = torch.from_numpy(opt_tensors[f"opt.exp_avg_sq.{name}"]).to(p.dtype)
        state["step"] = torch.tensor(float(np.asarray(opt_tensors[f"opt.step.{name}"]).ravel()[0]))
