"""Age modulation: a text-conditioned residual direction in style space."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .world import EmbeddingVector, LatentCode


@dataclass
class AgedLatent:
    base: torch.Tensor
    residual: torch.Tensor
    aged: torch.Tensor


class AgeModulator(nn.Module):
    """Maps (w, e_t) to an aged latent ``w + w_delta``.

    ``w_delta = f_gamma(e_t) * (w' - mu) / sigma + f_beta(e_t)`` where
    ``w' = MLP(w)``.  Statistics are taken per row over the style channels
    (``norm_axis="row"``) or over the whole matrix (``"global"``).  The MLP
    is residual with a zero-initialised output layer, and both affine maps
    start at zero, so a fresh modulator is the identity edit.
    """

    def __init__(
        self,
        num_layers: int = 14,
        style_dim: int = 512,
        embed_dim: int = 64,
        hidden_dim: int | None = None,
        shared_rows: bool = True,
        norm_axis: str = "row",
        norm_epsilon: float = 1e-6,
    ):
        super().__init__()
        if norm_axis not in ("row", "global"):
            raise ValueError(f"norm_axis must be 'row' or 'global', got {norm_axis!r}")
        if norm_epsilon <= 0:
            raise ValueError("norm_epsilon must be positive")
        self.L, self.D = num_layers, style_dim
        self.shared_rows = shared_rows
        self.norm_axis = norm_axis
        self.norm_epsilon = norm_epsilon
        hidden = hidden_dim or style_dim
        rows = 1 if shared_rows else num_layers
        self.w1 = nn.Parameter(torch.randn(rows, style_dim, hidden) * style_dim**-0.5)
        self.b1 = nn.Parameter(torch.zeros(rows, hidden))
        self.w2 = nn.Parameter(torch.zeros(rows, hidden, style_dim))
        self.b2 = nn.Parameter(torch.zeros(rows, style_dim))
        self.f_gamma = nn.Linear(embed_dim, num_layers)
        self.f_beta = nn.Linear(embed_dim, num_layers)
        for lin in (self.f_gamma, self.f_beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def project(self, w: torch.Tensor) -> torch.Tensor:
        """Row-wise two-layer MLP with a skip connection; [..., L, D] -> [..., L, D]."""
        h = torch.einsum("...ld,ldh->...lh", w, self.w1.expand(self.L, -1, -1)) + self.b1
        h = nn.functional.silu(h)
        return w + torch.einsum("...lh,lhd->...ld", h, self.w2.expand(self.L, -1, -1)) + self.b2

    def normalize(self, w_prime: torch.Tensor) -> torch.Tensor:
        dims = (-1,) if self.norm_axis == "row" else (-2, -1)
        mu = w_prime.mean(dim=dims, keepdim=True)
        sigma = w_prime.std(dim=dims, keepdim=True, unbiased=False).clamp(min=self.norm_epsilon)
        return (w_prime - mu) / sigma

    def compute_residual(self, w_prime: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        gamma = self.f_gamma(e_t).unsqueeze(-1)  # [..., L, 1]
        beta = self.f_beta(e_t).unsqueeze(-1)
        return gamma * self.normalize(w_prime) + beta

    def forward(self, w: torch.Tensor, e_t: torch.Tensor) -> AgedLatent:
        residual = self.compute_residual(self.project(w), e_t.to(w.dtype))
        return AgedLatent(base=w, residual=residual, aged=w + residual)

    def config(self) -> dict:
        return {
            "num_layers": self.L,
            "style_dim": self.D,
            "embed_dim": self.f_gamma.in_features,
            "hidden_dim": self.w1.shape[-1],
            "shared_rows": self.shared_rows,
            "norm_axis": self.norm_axis,
            "norm_epsilon": self.norm_epsilon,
        }


def apply_aging(modulator: AgeModulator, w: LatentCode | torch.Tensor, e_t: EmbeddingVector | torch.Tensor) -> AgedLatent:
    styles = w.styles if isinstance(w, LatentCode) else w
    emb = e_t.values if isinstance(e_t, EmbeddingVector) else e_t
    return modulator(styles, emb)
