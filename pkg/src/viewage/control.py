"""Viewpoint control: a pose-conditioned view model and the zero-initialised
control branch built from it."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import ForwardState, UNet
from .world import CameraPose, ImageSample


def view_encoding(azimuth, polar) -> torch.Tensor:
    """(sin polar, cos polar, sin azimuth, cos azimuth) along the last axis."""
    az = torch.as_tensor(azimuth, dtype=torch.float64)
    po = torch.as_tensor(polar, dtype=torch.float64)
    return torch.stack([po.sin(), po.cos(), az.sin(), az.cos()], dim=-1)


def decode_view(enc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of ``view_encoding`` -> (azimuth, polar)."""
    return torch.atan2(enc[..., 2], enc[..., 3]), torch.atan2(enc[..., 0], enc[..., 1])


@dataclass
class ViewConditioning:
    relative_azimuth: float
    relative_polar: float
    reference_image: ImageSample | None = None

    @property
    def encoding(self) -> torch.Tensor:
        return view_encoding(self.relative_azimuth, self.relative_polar)

    @classmethod
    def from_pose(cls, pose: CameraPose, reference_image=None) -> "ViewConditioning":
        return cls(pose.azimuth, pose.polar, reference_image)


class ViewModel(nn.Module):
    """Standalone novel-view denoiser.

    Input is the noisy target latent concatenated with the clean source
    latent; the view encoding enters through cross-attention as one token.
    """

    def __init__(self, unet: UNet, latent_channels: int = 4):
        super().__init__()
        self.unet = unet
        self.latent_channels = latent_channels
        self.pose_embed = nn.Sequential(
            nn.Linear(4, unet.cfg.context_dim), nn.SiLU(), nn.Linear(unet.cfg.context_dim, unet.cfg.context_dim)
        )

    @classmethod
    def from_base(cls, base: UNet, latent_channels: int = 4) -> "ViewModel":
        unet = copy.deepcopy(base)
        for block in unet.attn_blocks():
            block.temporal_sa = block.temporal_ca = None
        unet.widen_input(latent_channels)
        unet.requires_grad_(True)
        return cls(unet, latent_channels)

    def context(self, enc: torch.Tensor) -> torch.Tensor:
        return self.pose_embed(enc.float()).unsqueeze(1)

    def forward(self, z_t, t, source_latent, enc):
        st = ForwardState(context=self.context(enc))
        if source_latent.shape[0] != z_t.shape[0]:
            source_latent = source_latent.repeat_interleave(z_t.shape[0] // source_latent.shape[0], dim=0)
        return self.unet(torch.cat([z_t, source_latent], dim=1), t, st)


def _zero_conv(ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Trainable copy of the view model's encoder path.

    It sees the noisy latent (no concatenated source latent), the input
    image latent through a zero-initialised hint conv, and the view encoding
    through cross-attention.  Per-level outputs pass through zero 1x1 convs,
    so a freshly attached branch contributes exactly nothing.

    ``condition="rgb"`` is the ablation arm: the hint is a rendering at the
    target pose and the angle context is dropped.
    """

    def __init__(self, view_model: ViewModel, condition: str = "angle"):
        super().__init__()
        if condition not in ("angle", "rgb"):
            raise ValueError(f"condition must be 'angle' or 'rgb', got {condition!r}")
        self.condition = condition
        net = copy.deepcopy(view_model.unet)
        old = net.conv_in
        conv = nn.Conv2d(view_model.latent_channels, old.out_channels, 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(old.weight[:, : view_model.latent_channels])
            conv.bias.copy_(old.bias)
        net.conv_in = conv
        net.cfg.in_channels = view_model.latent_channels
        for name in ("upsample0", "up0", "upsample1", "up1", "norm_out", "conv_out"):
            setattr(net, name, nn.Identity())
        self.net = net
        self.pose_embed = copy.deepcopy(view_model.pose_embed)
        w = net.cfg.base_width
        self.hint_conv = nn.Conv2d(view_model.latent_channels, w, 1)
        nn.init.zeros_(self.hint_conv.weight)
        nn.init.zeros_(self.hint_conv.bias)
        self.zero_convs = nn.ModuleDict({"down0": _zero_conv(w), "down1": _zero_conv(2 * w), "mid": _zero_conv(2 * w)})
        self.requires_grad_(True)

    def forward(self, z_t, t, hint_latent, enc) -> dict:
        if hint_latent.shape[0] != z_t.shape[0]:
            hint_latent = hint_latent.repeat_interleave(z_t.shape[0] // hint_latent.shape[0], dim=0)
        if self.condition == "angle":
            ctx = self.pose_embed(enc.float()).unsqueeze(1)
        else:
            ctx = None
        st = ForwardState(context=ctx)
        net = self.net
        temb = net.time_embed(t, z_t.shape[0])
        h0 = net.conv_in(z_t) + self.hint_conv(hint_latent)
        st._site = 0
        s0 = net.down0(h0, temb, st)
        s1 = net.down1(net.downsample0(s0), temb, st)
        m = net.mid_res(net.mid(net.downsample1(s1), temb, st), temb)
        feats = {"down0": s0, "down1": s1, "mid": m}
        return {k: self.zero_convs[k](v) for k, v in feats.items()}


def attach_controller(view_model: ViewModel, condition: str = "angle") -> ControlBranch:
    """Build a control branch initialised from a (fine-tuned) view model."""
    if view_model.unet.cfg.in_channels != 2 * view_model.latent_channels:
        raise ValueError("view model input does not match latent channels")
    return ControlBranch(view_model, condition)


def pose_sq_error(estimated: torch.Tensor, requested: torch.Tensor) -> torch.Tensor:
    """Per-sample squared (jaw, pitch) error in rad^2."""
    return ((estimated - requested) ** 2).sum(dim=-1)


def perimeter_poses(n: int = 8, box=(0.6, 0.3)) -> list[CameraPose]:
    """``n`` poses evenly spaced along the perimeter of the pose box."""
    a, p = box
    corners = [(-a, -p), (a, -p), (a, p), (-a, p)]
    lengths = [2 * a, 2 * p, 2 * a, 2 * p]
    total = sum(lengths)
    out = []
    for i in range(n):
        s = i * total / n
        for (x0, y0), (x1, y1), ln in zip(corners, corners[1:] + corners[:1], lengths):
            if s <= ln + 1e-12:
                f = s / ln
                out.append(CameraPose(x0 + f * (x1 - x0), y0 + f * (y1 - y0)))
                break
            s -= ln
    return out


def pose_sweep(spec: str) -> list[CameraPose]:
    """Parse ``start:end:steps`` into an azimuth sweep at zero polar."""
    try:
        start, end, steps = spec.split(":")
        start, end, steps = float(start), float(end), int(steps)
    except ValueError as exc:
        raise ValueError(f"pose sweep must be start:end:steps, got {spec!r}") from exc
    if steps < 1:
        raise ValueError("pose sweep needs at least one step")
    if steps == 1:
        return [CameraPose(start, 0.0)]
    return [CameraPose(start + i * (end - start) / (steps - 1), 0.0) for i in range(steps)]

