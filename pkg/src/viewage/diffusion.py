"""Minimal latent diffusion backbone.

Contains the fixed latent codec, the noise schedule, a small U-Net whose
attention sites expose the hooks the aging, control and temporal modules
need, a deterministic DDIM sampler with classifier-free guidance, and the
epsilon-prediction training step.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .world import CELL


# -- codec -------------------------------------------------------------------


class LatentCodec:
    """Fixed linear encoder/decoder between images and latents.

    ``encode`` averages each ``CELL x CELL`` block and mixes RGB into
    ``channels`` latent channels with a seeded matrix of orthonormal columns;
    ``decode`` applies the transpose and repeats each cell.  Block-constant
    images survive the round trip up to float rounding.  No bias, so a zero
    image maps to a zero latent.
    """

    def __init__(self, channels: int = 4, seed: int = 0):
        if channels < 3:
            raise ValueError("need at least 3 latent channels")
        g = torch.Generator().manual_seed(10_000 + seed)
        q, _ = torch.linalg.qr(torch.randn(channels, 3, generator=g, dtype=torch.float64))
        self.mix = q  # [channels, 3]
        self.channels = channels

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        lead = pixels.shape[:-3]
        pooled = F.avg_pool2d(pixels.reshape(-1, *pixels.shape[-3:]), CELL)
        lat = torch.einsum("kc,nchw->nkhw", self.mix.to(pixels.dtype), pooled)
        return lat.reshape(*lead, *lat.shape[1:])

    @property
    def bound(self) -> float:
        """Largest latent magnitude an image in [-1, 1] can produce."""
        return float(self.mix.abs().sum(dim=1).max())

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("kc,...khw->...chw", self.mix.to(latent.dtype), latent)
        return rgb.repeat_interleave(CELL, dim=-2).repeat_interleave(CELL, dim=-1)


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0) -> float:
    mse = float(((a - b) ** 2).mean())
    return float("inf") if mse == 0 else 10 * math.log10(peak**2 / mse)


# -- schedule ----------------------------------------------------------------


class NoiseSchedule:
    """Beta schedule with ``alpha_bar[0] == 1`` prepended.

    ``kind="linear"`` spaces betas linearly; ``"scaled_linear"`` spaces their
    square roots linearly (the latent-diffusion default, 0.00085 to 0.012).
    """

    def __init__(self, T: int = 1000, kind: str = "scaled_linear", beta_start: float | None = None, beta_end: float | None = None):
        if T < 1:
            raise ValueError("T must be >= 1")
        if kind == "linear":
            b0, b1 = beta_start or 1e-4, beta_end or 0.02
            betas = torch.linspace(b0, b1, T, dtype=torch.float64)
        elif kind == "scaled_linear":
            b0, b1 = beta_start or 0.00085, beta_end or 0.012
            betas = torch.linspace(b0**0.5, b1**0.5, T, dtype=torch.float64) ** 2
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        self.T = T
        self.kind = kind
        self.alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, 0)])
        if not (self.alpha_bar[1:] < self.alpha_bar[:-1]).all() or self.alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must be strictly decreasing and positive")

    def signature(self) -> str:
        return f"{self.kind}:T={self.T}:{float(self.alpha_bar[1]):.12e}:{float(self.alpha_bar[-1]):.12e}"


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, with t broadcast over the batch."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t].to(z0.dtype)
    ab = ab.reshape(*ab.shape, *([1] * (z0.dim() - ab.dim())))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


# -- attention ---------------------------------------------------------------


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention dims mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1) @ v


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _tokens(h: torch.Tensor) -> torch.Tensor:
    return h.flatten(2).transpose(1, 2)  # [B, HW, C]


def _untokens(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return x.transpose(1, 2).reshape(like.shape)


@functools.lru_cache(maxsize=32)
def position_encoding(height: int, width: int, channels: int) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding [H*W, C]; half the channels per axis."""
    quarter = channels // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    ys, xs = torch.meshgrid(torch.arange(height, dtype=torch.float64), torch.arange(width, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1, 1), xs.reshape(-1, 1)):
        parts += [torch.sin(coord * freqs), torch.cos(coord * freqs)]
    enc = torch.cat(parts, dim=-1)
    return F.pad(enc, (0, channels - enc.shape[-1])).float()


@dataclass
class ForwardState:
    """Per-call routing for the hooks inside one U-Net forward."""

    context: torch.Tensor | None = None
    reference: list | None = None  # reference tokens per self-attention site
    capture: list | None = None  # filled with pre-attention tokens per site
    separate_ref_proj: bool = False
    num_frames: int = 1
    frame_pos: bool = False
    control: dict | None = None
    encoder_control: bool = False
    _site: int = field(default=0, repr=False)


class SelfAttention(nn.Module):
    """Single-head self-attention over spatial tokens.

    With ``positional`` a fixed sinusoidal position code is added to the
    normalised tokens, so keys and values (and captured reference tokens)
    know where they came from.
    """

    def __init__(self, channels: int, groups: int = 8, positional: bool = True):
        super().__init__()
        self.positional = positional
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.ref_k: nn.Linear | None = None
        self.ref_v: nn.Linear | None = None

    def enable_reference_projections(self):
        """Give reference tokens their own K/V maps, copied from the shared ones."""
        c = self.to_k.in_features
        self.ref_k = nn.Linear(c, c, bias=False)
        self.ref_v = nn.Linear(c, c, bias=False)
        self.ref_k.load_state_dict(self.to_k.state_dict())
        self.ref_v.load_state_dict(self.to_v.state_dict())

    def forward(self, h: torch.Tensor, st: ForwardState) -> torch.Tensor:
        x = _tokens(self.norm(h))
        if self.positional:
            x = x + position_encoding(h.shape[-2], h.shape[-1], h.shape[1]).to(x.dtype)
        site = st._site
        st._site += 1
        if st.capture is not None:
            st.capture.append(x)
        ref = None
        if st.reference is not None:
            ref = st.reference[site]
            if ref.shape[0] != x.shape[0]:
                ref = ref.repeat_interleave(x.shape[0] // ref.shape[0], dim=0)
        out = reference_attention_tokens(self, x, ref, st.separate_ref_proj)
        return h + _untokens(self.to_out(out), h)


def reference_attention_tokens(layer: SelfAttention, x: torch.Tensor, ref: torch.Tensor | None, separate: bool = False):
    """Queries from ``x``; keys/values from ``[x ; ref]`` along the token axis."""
    q = layer.to_q(x)
    if ref is None or ref.shape[-2] == 0:
        return attention(q, layer.to_k(x), layer.to_v(x))
    if ref.shape[-1] != x.shape[-1]:
        raise ValueError(f"reference token dim {ref.shape[-1]} != {x.shape[-1]}")
    if separate and layer.ref_k is not None:
        k = torch.cat([layer.to_k(x), layer.ref_k(ref)], dim=-2)
        v = torch.cat([layer.to_v(x), layer.ref_v(ref)], dim=-2)
    else:
        both = torch.cat([x, ref], dim=-2)
        k, v = layer.to_k(both), layer.to_v(both)
    return attention(q, k, v)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.context_dim = context_dim

    def forward(self, h: torch.Tensor, st: ForwardState) -> torch.Tensor:
        ctx = st.context
        if ctx is None:
            ctx = h.new_zeros(h.shape[0], 1, self.context_dim)
        elif ctx.shape[0] != h.shape[0]:
            ctx = ctx.repeat_interleave(h.shape[0] // ctx.shape[0], dim=0)
        x = _tokens(self.norm(h))
        out = attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx))
        return h + _untokens(self.to_out(out), h)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h, temb):
        x = self.conv1(F.silu(self.norm1(h)))
        if temb.shape[0] != x.shape[0]:
            temb = temb.repeat_interleave(x.shape[0] // temb.shape[0], dim=0)
        x = x + self.temb(F.silu(temb))[:, :, None, None]
        x = self.conv2(F.silu(self.norm2(x)))
        return self.skip(h) + x


class AttnBlock(nn.Module):
    """Residual block, self-attention, cross-attention; temporal slots after each attention."""

    def __init__(self, in_ch, out_ch, temb_dim, context_dim, positional: bool = True):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim)
        self.self_attn = SelfAttention(out_ch, positional=positional)
        self.cross_attn = CrossAttention(out_ch, context_dim)
        self.temporal_sa: nn.Module | None = None
        self.temporal_ca: nn.Module | None = None

    def forward(self, h, temb, st: ForwardState):
        h = self.res(h, temb)
        h = self.self_attn(h, st)
        if self.temporal_sa is not None:
            h = self.temporal_sa(h, st.num_frames, st.frame_pos)
        h = self.cross_attn(h, st)
        if self.temporal_ca is not None:
            h = self.temporal_ca(h, st.num_frames, st.frame_pos)
        return h


@dataclass
class UNetConfig:
    in_channels: int = 4
    out_channels: int = 4
    base_width: int = 32
    context_dim: int = 16
    time_dim: int = 32
    positional: bool = True

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class UNet(nn.Module):
    """Two down levels, one mid level, two up levels; one self- and one
    cross-attention per level.

    Block tags, in order: down(w), down(2w), mid(2w), up(2w), up(w).
    """

    SKIP_KEYS = ("down0", "down1", "mid")

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        w, ctx = cfg.base_width, cfg.context_dim
        temb = 4 * cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.down0 = AttnBlock(w, w, temb, ctx, cfg.positional)
        self.downsample0 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down1 = AttnBlock(w, 2 * w, temb, ctx, cfg.positional)
        self.downsample1 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.mid = AttnBlock(2 * w, 2 * w, temb, ctx, cfg.positional)
        self.mid_res = ResBlock(2 * w, 2 * w, temb)
        self.upsample0 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.up0 = AttnBlock(4 * w, 2 * w, temb, ctx, cfg.positional)
        self.upsample1 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.up1 = AttnBlock(3 * w, w, temb, ctx, cfg.positional)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, cfg.out_channels, 3, padding=1)

    def attn_blocks(self) -> list[AttnBlock]:
        return [self.down0, self.down1, self.mid, self.up0, self.up1]

    def block_graph(self) -> list[dict]:
        tags = ["downsample", "downsample", "mid", "upsample", "upsample"]
        return [
            {"tag": tag, "channels": b.res.conv2.out_channels, "layers": ["res", "self_attn", "cross_attn"]}
            for tag, b in zip(tags, self.attn_blocks())
        ]

    def time_embed(self, t: torch.Tensor, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim))

    def encode_path(self, x, t, st: ForwardState):
        """Input conv through mid block; returns the three skip/mid features."""
        temb = self.time_embed(t, x.shape[0])
        h0 = self.conv_in(x)
        s0 = self.down0(h0, temb, st)
        if st.encoder_control and st.control is not None:
            s0 = s0 + st.control["down0"]
        s1 = self.down1(self.downsample0(s0), temb, st)
        if st.encoder_control and st.control is not None:
            s1 = s1 + st.control["down1"]
        m = self.mid_res(self.mid(self.downsample1(s1), temb, st), temb)
        return {"down0": s0, "down1": s1, "mid": m}, temb

    def forward(self, x, t, st: ForwardState | None = None):
        st = st or ForwardState()
        st._site = 0
        feats, temb = self.encode_path(x, t, st)
        if st.control is not None and not st.encoder_control:
            feats = {k: feats[k] + st.control[k] for k in self.SKIP_KEYS}
        h = feats["mid"]
        h = self.upsample0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, feats["down1"]], dim=1), temb, st)
        h = self.upsample1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, feats["down0"]], dim=1), temb, st)
        return self.conv_out(F.silu(self.norm_out(h)))

    def widen_input(self, extra: int) -> None:
        """Append ``extra`` zero-initialised input channels to the first conv."""
        old = self.conv_in
        new = nn.Conv2d(old.in_channels + extra, old.out_channels, 3, padding=1)
        with torch.no_grad():
            new.weight.zero_()
            new.weight[:, : old.in_channels] = old.weight
            new.bias.copy_(old.bias)
        self.conv_in = new
        self.cfg.in_channels += extra

    def self_attention_sites(self) -> list[SelfAttention]:
        return [b.self_attn for b in self.attn_blocks()]


# -- sampling ----------------------------------------------------------------


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return [int(round(T - i * T / steps)) for i in range(steps + 1)]


@torch.no_grad()
def ddim_sample(
    eps_fn, z_T, schedule: NoiseSchedule, steps: int, guidance_scale: float = 3.0, cond=None, uncond=None, clip_x0=None
):
    """Deterministic (eta = 0) DDIM from t = T down to t = 0.

    ``eps_fn(z, t, conditioning)`` predicts noise.  With guidance scale 0 or 1
    only the unconditional or conditional branch is evaluated.  ``clip_x0``
    bounds the clean-latent estimate at every step (``None`` disables).
    """
    z = z_T
    ts = ddim_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        if guidance_scale == 0:
            eps = eps_fn(z, t, uncond)
        elif guidance_scale == 1:
            eps = eps_fn(z, t, cond)
        else:
            eps = cfg_combine(eps_fn(z, t, uncond), eps_fn(z, t, cond), guidance_scale)
        ab = schedule.alpha_bar[t].to(z.dtype)
        ab_prev = schedule.alpha_bar[t_prev].to(z.dtype)
        x0 = (z - (1 - ab).sqrt() * eps) / ab.sqrt()
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
            eps = (z - ab.sqrt() * x0) / (1 - ab).sqrt()
        z = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
    return z


# -- training ----------------------------------------------------------------


class DivergenceError(RuntimeError):
    pass


def sample_timesteps(schedule: NoiseSchedule, n: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, schedule.T + 1, (n,), generator=generator)


def eps_loss(eps_fn, schedule, z0, cond, t, eps) -> torch.Tensor:
    """Mean squared error between the drawn noise and the prediction."""
    z_t = add_noise(schedule, z0, t, eps)
    return F.mse_loss(eps_fn(z_t, t, cond), eps)


def train_step_eq9(eps_fn, schedule, batch: dict, optimizer: torch.optim.Optimizer) -> float:
    """One gradient step on the noise-prediction objective.

    ``batch`` holds ``z0``, ``cond``, ``t`` and ``eps``; only parameters
    registered with ``optimizer`` move.
    """
    loss = eps_loss(eps_fn, schedule, batch["z0"], batch.get("cond"), batch["t"], batch["eps"])
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite diffusion loss {float(loss)}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def param_checksum(module_or_params) -> str:
    """sha256 over the raw bytes of every tensor, in name order."""
    import hashlib

    h = hashlib.sha256()
    if isinstance(module_or_params, nn.Module):
        items = sorted(module_or_params.state_dict().items())
    else:
        items = sorted(module_or_params.items())
    for name, tensor in items:
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
