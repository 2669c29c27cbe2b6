"""Frame-axis attention that ties the views of one subject together."""

from __future__ import annotations

import math

import torch
from torch import nn

from .diffusion import attention


def fold_spatial(x: torch.Tensor) -> torch.Tensor:
    """[B, F, C, H, W] -> [(B*F), C, H, W]; frame f of item b lands at row b*F + f."""
    if x.dim() != 5:
        raise ValueError(f"expected [B, F, C, H, W], got {tuple(x.shape)}")
    b, f = x.shape[:2]
    return x.reshape(b * f, *x.shape[2:])


def unfold_spatial(x: torch.Tensor, num_frames: int) -> torch.Tensor:
    if x.dim() != 4 or num_frames < 1 or x.shape[0] % num_frames:
        raise ValueError(f"cannot unfold {tuple(x.shape)} into frames of {num_frames}")
    return x.reshape(x.shape[0] // num_frames, num_frames, *x.shape[1:])


def fold_temporal(x: torch.Tensor) -> torch.Tensor:
    """[B, F, C, H, W] -> [(B*H*W), C, F]."""
    if x.dim() != 5:
        raise ValueError(f"expected [B, F, C, H, W], got {tuple(x.shape)}")
    b, f, c, h, w = x.shape
    return x.permute(0, 3, 4, 2, 1).reshape(b * h * w, c, f)


def unfold_temporal(y: torch.Tensor, batch: int, height: int, width: int) -> torch.Tensor:
    if y.dim() != 3 or y.shape[0] != batch * height * width:
        raise ValueError(f"cannot unfold {tuple(y.shape)} with B={batch}, H={height}, W={width}")
    c, f = y.shape[1:]
    return y.reshape(batch, height, width, c, f).permute(0, 4, 3, 1, 2)


def frame_encoding(num_frames: int, dim: int) -> torch.Tensor:
    pos = torch.arange(num_frames, dtype=torch.float32)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float32)
    ang = pos / (100.0 ** (2 * i / max(dim, 2)))
    enc = torch.zeros(num_frames, dim)
    enc[:, 0::2] = torch.sin(ang)
    enc[:, 1::2] = torch.cos(ang)[:, : dim - dim // 2]
    return enc


class TemporalLayer(nn.Module):
    """Attention over the frame axis at every spatial position.

    The output projection starts at zero, so a new layer is an exact
    identity.  No frame positional encoding unless ``frame_pos`` is passed
    at call time.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def attend_tokens(self, tok: torch.Tensor, frame_pos: bool = False) -> torch.Tensor:
        """tok: [N, F, C] -> residual-added [N, F, C]."""
        n = self.norm(tok)
        if frame_pos:
            n = n + frame_encoding(tok.shape[1], tok.shape[2]).to(n)
        return tok + self.to_out(attention(self.to_q(n), self.to_k(n), self.to_v(n)))

    def forward(self, h: torch.Tensor, num_frames: int = 1, frame_pos: bool = False) -> torch.Tensor:
        x = unfold_spatial(h, num_frames)
        b, _, c, hh, ww = x.shape
        if c != self.norm.normalized_shape[0]:
            raise ValueError(f"temporal layer expects {self.norm.normalized_shape[0]} channels, got {c}")
        tok = fold_temporal(x).transpose(1, 2)
        out = self.attend_tokens(tok, frame_pos).transpose(1, 2)
        # Contiguous output keeps downstream kernels on the same summation order,
        # so a zero-initialised layer is a bitwise identity for the whole network.
        return fold_spatial(unfold_temporal(out, b, hh, ww)).contiguous()


def temporal_attend(x: torch.Tensor, layer: TemporalLayer, frame_pos: bool = False) -> torch.Tensor:
    """Apply ``layer`` to a frame batch [B, F, C, H, W]."""
    f = x.shape[1]
    return unfold_spatial(layer(fold_spatial(x), f, frame_pos), f)


def inflate(unet) -> list[TemporalLayer]:
    """Insert zero-initialised temporal layers after every attention site."""
    layers = []
    for block in unet.attn_blocks():
        c = block.self_attn.to_q.in_features
        block.temporal_sa = TemporalLayer(c)
        block.temporal_ca = TemporalLayer(c)
        layers += [block.temporal_sa, block.temporal_ca]
    return layers
