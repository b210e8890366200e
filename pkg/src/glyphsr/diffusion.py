"""Residual diffusion core: schedule, forward process, conditioned U-Net
denoiser, training objective, and deterministic DDIM sampling.

The clean target of the diffusion is the scaled residual (HR - LR) / 2, so
the sampler's final estimate maps back to an image as
clamp(LR + 2 * residual, -1, 1). The denoiser sees the noisy residual and
the LR image concatenated along channels, a sinusoidal timestep embedding
inside every residual block, and byte-text features through cross-attention
at the configured levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidRange, NonFiniteActivation, NonFiniteLoss, ShapeMismatch
from .seeding import mix_seed
from .textcodec import ByteTokenSeq, TextEncoder, TextEncoderConfig, encode_batch, tokenize


# ---------------------------------------------------------------------------
# schedule and forward process


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative signal levels."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_lo": float(self.beta[0]), "beta_hi": float(self.beta[-1])}


def make_schedule(T: int, beta_lo: float = 1e-4, beta_hi: float = 0.02) -> NoiseSchedule:
    """Interpolate beta linearly over T steps and accumulate alpha_bar."""
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not (0.0 < beta_lo <= beta_hi < 1.0):
        raise InvalidRange(f"need 0 < beta_lo <= beta_hi < 1, got [{beta_lo}, {beta_hi}]")
    beta = np.linspace(beta_lo, beta_hi, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar)


def q_sample(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise a clean sample to timestep t: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype, device=x0.device)[t]
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoiser configuration


@dataclass
class DenoiserConfig:
    """Shape of the U-Net. Defaults record the full-scale reference model;
    desk-scale presets live in glyphsr.config."""

    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8, 8)
    down_factors: tuple[int, ...] = (2, 2, 2, 2, 3)
    cross_attn_levels: tuple[int, ...] = (4, 5)  # 1-based level indices
    time_embed_dim: int = 64
    image_channels: int = 3
    height: int = 48
    width: int = 480
    text_dim: int = 128

    def __post_init__(self):
        if len(self.channel_multipliers) != len(self.down_factors):
            raise ShapeMismatch("multipliers and down factors must pair up per level")
        levels = len(self.channel_multipliers)
        if any(not 1 <= a <= levels for a in self.cross_attn_levels):
            raise ShapeMismatch(f"cross_attn_levels {self.cross_attn_levels} outside 1..{levels}")
        total = 1
        for f in self.down_factors:
            total *= f
        if self.height % total or self.width % total:
            raise ShapeMismatch(
                f"{self.height}x{self.width} not divisible by total downsample {total}"
            )

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "down_factors": list(self.down_factors),
            "cross_attn_levels": list(self.cross_attn_levels),
            "time_embed_dim": self.time_embed_dim,
            "image_channels": self.image_channels,
            "height": self.height,
            "width": self.width,
            "text_dim": self.text_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            base_channels=d["base_channels"],
            channel_multipliers=tuple(d["channel_multipliers"]),
            down_factors=tuple(d["down_factors"]),
            cross_attn_levels=tuple(d["cross_attn_levels"]),
            time_embed_dim=d["time_embed_dim"],
            image_channels=d["image_channels"],
            height=d["height"],
            width=d["width"],
            text_dim=d["text_dim"],
        )


# ---------------------------------------------------------------------------
# network blocks


def _norm(channels: int) -> nn.GroupNorm:
    # at most 8 groups, and never fewer than 2 channels per group so the
    # statistics stay well-defined even on 1x1 feature maps
    groups = min(8, max(1, channels // 2))
    while groups > 1 and channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype if t.is_floating_point() else torch.float64, device=t.device) / half
    )
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def flat_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2D sin/cos table for flattened (h*w, dim) feature maps.

    Gives the cross-attention queries an explicit notion of where they sit
    in the line, which a shallow conv stack cannot otherwise provide.
    """
    half = dim // 2
    quarter = max(half // 2, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None, :]
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None, :]
    rows = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, 2q)
    cols = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, 2q)
    table = torch.zeros(h, w, dim, dtype=torch.float64)
    table[:, :, : rows.shape[1]] += rows[:, None, :]
    cdim = min(cols.shape[1], dim - rows.shape[1])
    if cdim > 0:
        table[:, :, rows.shape[1] : rows.shape[1] + cdim] += cols[None, :, :cdim]
    else:
        table[:, :, : cols.shape[1]] += cols[None, :, :]
    return table.reshape(h * w, dim)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from flattened image features to text rows.

    out = x + reshape(softmax(Q K^T / sqrt(d)) V) with Q projected from the
    position-encoded flattened features and K/V from the text features.
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.channels = channels
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wk = nn.Linear(text_dim, channels, bias=False)
        self.wv = nn.Linear(text_dim, channels, bias=False)
        # start as an identity block so early training is image-driven
        nn.init.zeros_(self.wv.weight)
        self._pe_cache: dict[tuple, torch.Tensor] = {}

    def _pe(self, h: int, w: int, dtype, device) -> torch.Tensor:
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = flat_position_encoding(h, w, self.channels)
        return self._pe_cache[key].to(dtype=dtype, device=device)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        text_mask: torch.Tensor,
        gate: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.wq(flat + self._pe(h, w, x.dtype, x.device)[None])
        k = self.wk(text)
        v = self.wv(text)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.channels)
        logits = logits.masked_fill(~text_mask[:, None, :], float("-inf"))
        has_key = text_mask.any(dim=-1)[:, None, None]
        logits = torch.where(has_key, logits, torch.zeros_like(logits))
        out = torch.softmax(logits, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, c, h, w)
        if gate is not None:
            out = out * gate[:, None, None, None]
        return x + out


class Denoiser(nn.Module):
    """U-Net noise predictor over (noisy residual, LR image) channel pairs.

    Per level the encoder applies a pooled downsample and two residual
    layers; the decoder concatenates the matching encoder features and
    applies three residual layers before upsampling. Cross-attention to
    text features runs at the configured levels on both paths. The stem
    features re-enter before the head so full-resolution detail survives.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        td = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.null_image_emb = nn.Parameter(torch.zeros(td))
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        prev = cfg.base_channels
        for i, c in enumerate(chans, start=1):
            self.down_blocks.append(
                nn.ModuleList([ResBlock(prev, c, td), ResBlock(c, c, td)])
            )
            if i in cfg.cross_attn_levels:
                self.down_attn[str(i)] = CrossAttention(c, cfg.text_dim)
            prev = c

        self.middle = ResBlock(prev, prev, td)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.up_convs = nn.ModuleList()
        for i in range(len(chans), 0, -1):
            c = chans[i - 1]
            self.up_blocks.append(
                nn.ModuleList(
                    [ResBlock(2 * c, c, td), ResBlock(c, c, td), ResBlock(c, c, td)]
                )
            )
            if i in cfg.cross_attn_levels:
                self.up_attn[str(i)] = CrossAttention(c, cfg.text_dim)
            c_next = chans[i - 2] if i >= 2 else cfg.base_channels
            self.up_convs.append(nn.Conv2d(c, c_next, 3, padding=1))

        self.head_norm = _norm(2 * cfg.base_channels)
        self.head = nn.Conv2d(2 * cfg.base_channels, cfg.image_channels, 3, padding=1)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cond_img: torch.Tensor | None,
        text_feats: torch.Tensor | None = None,
        text_mask: torch.Tensor | None = None,
        drop_image: torch.Tensor | None = None,
        drop_text: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b = x_t.shape[0]
        if cond_img is None:
            cond_img = torch.zeros_like(x_t)
            drop_image = torch.ones(b, dtype=torch.bool, device=x_t.device)
        if cond_img.shape != x_t.shape:
            raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs cond {tuple(cond_img.shape)}")
        if drop_image is not None and drop_image.any():
            keep = (~drop_image).to(x_t.dtype)[:, None, None, None]
            cond_img = cond_img * keep
        emb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(x_t.dtype))
        if drop_image is not None and drop_image.any():
            emb = emb + drop_image.to(x_t.dtype)[:, None] * self.null_image_emb[None, :]

        gate = None
        if text_feats is not None and drop_text is not None:
            gate = (~drop_text).to(x_t.dtype)

        h = self.stem(torch.cat([x_t, cond_img], dim=1))
        stem_out = h
        skips = []
        for i, blocks in enumerate(self.down_blocks, start=1):
            h = F.avg_pool2d(h, self.cfg.down_factors[i - 1])
            h = blocks[0](h, emb)
            h = blocks[1](h, emb)
            if text_feats is not None and str(i) in self.down_attn:
                h = self.down_attn[str(i)](h, text_feats, text_mask, gate)
            skips.append(h)

        h = self.middle(h, emb)

        for j, blocks in enumerate(self.up_blocks):
            i = len(self.down_blocks) - j
            h = torch.cat([h, skips[i - 1]], dim=1)
            h = blocks[0](h, emb)
            h = blocks[1](h, emb)
            h = blocks[2](h, emb)
            if text_feats is not None and str(i) in self.up_attn:
                h = self.up_attn[str(i)](h, text_feats, text_mask, gate)
            h = self.up_convs[j](h)
            h = F.interpolate(h, scale_factor=float(self.cfg.down_factors[i - 1]), mode="nearest")

        h = torch.cat([h, stem_out], dim=1)
        return self.head(F.silu(self.head_norm(h)))


# ---------------------------------------------------------------------------
# model bundle, training step, DDIM


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) [-1, 1] numpy -> (C, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor -> (H, W, C) float64 numpy."""
    return t.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0)


class DiffusionModel:
    """Denoiser + text encoder + schedule, trained and sampled together."""

    def __init__(
        self,
        denoiser_config: DenoiserConfig,
        text_config: TextEncoderConfig,
        schedule: NoiseSchedule,
        dtype=torch.float32,
    ):
        if text_config.feature_dim != denoiser_config.text_dim:
            raise ShapeMismatch(
                f"text features {text_config.feature_dim}d vs denoiser expects {denoiser_config.text_dim}d"
            )
        self.denoiser_config = denoiser_config
        self.text_config = text_config
        self.schedule = schedule
        self.denoiser = Denoiser(denoiser_config).to(dtype)
        self.text_encoder = TextEncoder(text_config).to(dtype)
        self.dtype = dtype
        self.step_count = 0

    def parameters(self):
        yield from self.denoiser.parameters()
        if self.text_config.trainable:
            yield from self.text_encoder.parameters()

    def named_parameters(self):
        for n, p in self.denoiser.named_parameters():
            yield f"denoiser.{n}", p
        for n, p in self.text_encoder.named_parameters():
            yield f"text_encoder.{n}", p

    def encode_texts(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [tokenize(t, self.text_config.max_tokens) for t in texts]
        return encode_batch(self.text_encoder, seqs)

    def encode_tokens(self, seqs: list[ByteTokenSeq]) -> tuple[torch.Tensor, torch.Tensor]:
        return encode_batch(self.text_encoder, seqs)

    def eval_mode(self):
        self.denoiser.eval()
        self.text_encoder.eval()
        return self


@dataclass
class DiffusionBatch:
    """One training minibatch in tensor form."""

    x0: torch.Tensor  # (B, C, H, W) residual targets in [-1, 1]
    cond: torch.Tensor  # (B, C, H, W) LR planes
    token_ids: torch.Tensor  # (B, M) int64
    token_mask: torch.Tensor  # (B, M) bool
    drop_text: torch.Tensor  # (B,) bool
    drop_image: torch.Tensor  # (B,) bool
    t: torch.Tensor  # (B,) int64 in [0, T)
    eps: torch.Tensor  # (B, C, H, W) unit Gaussian noise


def training_step(model: DiffusionModel, batch: DiffusionBatch) -> tuple[float, dict]:
    """Compute the denoising loss and backpropagate.

    Loss is the per-sample mean squared error between the injected and the
    predicted noise, reduced over the batch by a sorted sum so the value is
    invariant to sample order. Returns (loss value, gradients by name);
    gradients are also left in each parameter's .grad.
    """
    for p in model.parameters():
        if p.grad is not None:
            p.grad = None
    x_t = q_sample(batch.x0, batch.t, batch.eps, model.schedule)
    feats = model.text_encoder(batch.token_ids, batch.token_mask)
    eps_hat = model.denoiser(
        x_t,
        batch.t,
        batch.cond,
        feats,
        batch.token_mask,
        drop_image=batch.drop_image,
        drop_text=batch.drop_text,
    )
    if not torch.isfinite(eps_hat).all():
        raise NonFiniteActivation("denoiser produced non-finite values")
    per_sample = ((batch.eps - eps_hat) ** 2).flatten(1).mean(dim=1)
    loss = torch.sort(per_sample).values.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss = {loss.item()}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
    return float(loss.item()), grads


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride timestep ladder from T-1 down to 0, both included."""
    if not 1 <= steps <= T:
        raise InvalidRange(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T - 1]
    ts = np.round(np.linspace(T - 1, 0, steps)).astype(int)
    # collapse any duplicates from rounding while keeping the endpoints
    out = [int(ts[0])]
    for v in ts[1:]:
        if int(v) < out[-1]:
            out.append(int(v))
    if out[-1] != 0:
        out.append(0)
    return out


def ddim_sample(
    cond_base: torch.Tensor,
    eps_fn,
    schedule: NoiseSchedule,
    steps: int,
    seeds: list[int],
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM over a uniform timestep subsequence.

    Args:
        cond_base: (B, C, H, W) images the residual is added onto.
        eps_fn: callable (x, t_batch) -> noise estimate, usually built by
            the guidance layer.
        steps: number of denoiser evaluations.
        seeds: one per batch element; the initial Gaussian noise for sample
            b is drawn from its own generator, so results do not depend on
            how samples are grouped into batches.

    Returns clamp(cond_base + 2 * residual_estimate, -1, 1).
    """
    b = cond_base.shape[0]
    if len(seeds) != b:
        raise ShapeMismatch(f"{len(seeds)} seeds for batch of {b}")
    ab = schedule.alpha_bar
    noise = torch.empty_like(cond_base)
    for i, s in enumerate(seeds):
        g = torch.Generator().manual_seed(mix_seed("ddim-init", s))
        noise[i] = torch.randn(cond_base.shape[1:], generator=g, dtype=torch.float32).to(
            cond_base.dtype
        )
    x = noise
    ladder = ddim_timesteps(schedule.T, steps)
    x0_hat = torch.zeros_like(x)
    for idx, t in enumerate(ladder):
        t_batch = torch.full((b,), t, dtype=torch.int64, device=cond_base.device)
        eps = eps_fn(x, t_batch)
        sqrt_ab = math.sqrt(ab[t])
        sqrt_1m = math.sqrt(1.0 - ab[t])
        x0_hat = (x - sqrt_1m * eps) / sqrt_ab
        if idx + 1 < len(ladder):
            t_next = ladder[idx + 1]
            x = math.sqrt(ab[t_next]) * x0_hat + math.sqrt(1.0 - ab[t_next]) * eps
    return torch.clamp(cond_base + 2.0 * x0_hat, -1.0, 1.0)
