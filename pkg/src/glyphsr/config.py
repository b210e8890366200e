"""Run configuration: one JSON document holding every module's knobs.

Documents validate against a published schema; unknown keys are rejected
so experiment provenance stays trustworthy. Two named presets exist:
"desk" (small, trainable on a workstation CPU) and "paper" (the full-size
reference configuration, kept for structural parity; training it is out of
desk scope).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

import jsonschema
import torch

from .diffusion import DenoiserConfig, DiffusionModel, make_schedule
from .errors import ConfigError
from .guidance import GuidanceConfig
from .synth import DegradationConfig
from .textcodec import TextEncoderConfig

SCHEMA_VERSION = 1

_RANGE2 = {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "denoiser", "text_encoder", "schedule", "training", "guidance", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "preset": {"type": "string"},
        "denoiser": {
            "type": "object",
            "additionalProperties": False,
            "required": ["base_channels", "channel_multipliers", "down_factors",
                         "cross_attn_levels", "time_embed_dim", "image_channels",
                         "height", "width", "text_dim"],
            "properties": {
                "base_channels": {"type": "integer", "minimum": 1},
                "channel_multipliers": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "down_factors": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "cross_attn_levels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "time_embed_dim": {"type": "integer", "minimum": 2},
                "image_channels": {"enum": [1, 3]},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "text_dim": {"type": "integer", "minimum": 1},
            },
        },
        "text_encoder": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d_model", "d_ff", "n_heads", "n_layers", "max_tokens", "trainable"],
            "properties": {
                "d_model": {"type": "integer", "minimum": 2},
                "d_ff": {"type": "integer", "minimum": 2},
                "n_heads": {"type": "integer", "minimum": 1},
                "n_layers": {"const": 2},
                "max_tokens": {"type": "integer", "minimum": 2},
                "trainable": {"type": "boolean"},
                "projection_dim": {"type": ["integer", "null"]},
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T", "beta_lo", "beta_hi"],
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "beta_lo": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_hi": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "required": ["batch_size", "lr", "drop_text", "drop_image"],
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "drop_text": {"type": "number", "minimum": 0, "maximum": 1},
                "drop_image": {"type": "number", "minimum": 0, "maximum": 1},
                "ckpt_every": {"type": "integer", "minimum": 1},
            },
        },
        "guidance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "omega": {"type": "number"},
                "iterations": {"type": "integer", "minimum": 0},
                "ddim_steps": {"type": "integer", "minimum": 1},
            },
        },
        "degrade": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "blur_sigma_range": _RANGE2,
                "noise_std_range": _RANGE2,
                "downsample_range": _RANGE2,
                "quantize_levels_range": {"type": "array", "minItems": 2, "maxItems": 2,
                                          "items": {"type": "integer", "minimum": 2}},
                "second_order": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer"},
    },
}

_DESK = {
    "schema_version": SCHEMA_VERSION,
    "preset": "desk",
    "denoiser": {
        "base_channels": 16,
        "channel_multipliers": [1, 2, 4, 4],
        "down_factors": [2, 2, 2, 2],
        "cross_attn_levels": [3, 4],
        "time_embed_dim": 64,
        "image_channels": 1,
        "height": 48,
        "width": 240,
        "text_dim": 128,
    },
    "text_encoder": {
        "d_model": 128, "d_ff": 256, "n_heads": 4, "n_layers": 2,
        "max_tokens": 64, "trainable": True, "projection_dim": None,
    },
    "schedule": {"T": 1000, "beta_lo": 1e-4, "beta_hi": 0.02},
    "training": {"batch_size": 8, "lr": 3e-4, "drop_text": 0.3, "drop_image": 0.1, "ckpt_every": 500},
    "guidance": {"omega": 1.0, "iterations": 0, "ddim_steps": 5},
    "degrade": {
        "blur_sigma_range": [2.0, 3.5],
        "noise_std_range": [0.1, 0.35],
        "downsample_range": [3.0, 7.0],
        "quantize_levels_range": [16, 64],
        "second_order": False,
    },
    "seed": 0,
}

_PAPER = {
    "schema_version": SCHEMA_VERSION,
    "preset": "paper",
    "denoiser": {
        "base_channels": 32,
        "channel_multipliers": [1, 2, 4, 8, 8],
        "down_factors": [2, 2, 2, 2, 3],
        "cross_attn_levels": [4, 5],
        "time_embed_dim": 128,
        "image_channels": 3,
        "height": 48,
        "width": 480,
        "text_dim": 1536,
    },
    "text_encoder": {
        "d_model": 1536, "d_ff": 3968, "n_heads": 12, "n_layers": 2,
        "max_tokens": 64, "trainable": False, "projection_dim": None,
    },
    "schedule": {"T": 1000, "beta_lo": 1e-4, "beta_hi": 0.02},
    "training": {"batch_size": 1024, "lr": 3e-4, "drop_text": 0.3, "drop_image": 0.1, "ckpt_every": 1000},
    "guidance": {"omega": 1.0, "iterations": 1, "ddim_steps": 5},
    "degrade": {
        "blur_sigma_range": [2.0, 3.5],
        "noise_std_range": [0.1, 0.35],
        "downsample_range": [3.0, 7.0],
        "quantize_levels_range": [16, 64],
        "second_order": True,
    },
    "seed": 0,
}

PRESETS = {"desk": _DESK, "paper": _PAPER}


def default_config(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[preset])


def validate_config(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config invalid at {'/'.join(str(p) for p in e.absolute_path)}: {e.message}") from e
    return doc


def load_config(path: str | os.PathLike | None, preset: str = "desk") -> dict:
    """Read and validate a config file, or return the preset defaults."""
    if path is None:
        return validate_config(default_config(preset))
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_config(doc)


def config_hash(doc: dict) -> str:
    """Stable content hash of the resolved configuration."""
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def build_model(doc: dict, dtype=torch.float32) -> DiffusionModel:
    sched = doc["schedule"]
    return DiffusionModel(
        DenoiserConfig.from_dict(doc["denoiser"]),
        TextEncoderConfig.from_dict(doc["text_encoder"]),
        make_schedule(sched["T"], sched["beta_lo"], sched["beta_hi"]),
        dtype=dtype,
    )


def degradation_from_config(doc: dict) -> DegradationConfig:
    return DegradationConfig.from_dict(doc.get("degrade", _DESK["degrade"]))


def guidance_from_config(doc: dict, **overrides) -> GuidanceConfig:
    g = dict(doc.get("guidance", {}))
    g.update({k: v for k, v in overrides.items() if v is not None})
    g.setdefault("seed", doc.get("seed", 0))
    return GuidanceConfig(**g)
