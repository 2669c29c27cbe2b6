"""Training losses for the latent age modulator and their weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

TERMS = ("l2", "lpips", "norm", "id", "age", "clip")


@dataclass
class LossWeights:
    l2: float = 0.1
    lpips: float = 0.1
    norm: float = 0.05
    id: float = 0.2
    age: float = 1.0
    clip: float = 0.6

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def from_config(cls, cfg: dict) -> "LossWeights":
        return cls(**{k: float(cfg[f"loss.{k}"]) for k in TERMS if f"loss.{k}" in cfg})


@dataclass
class LossReport:
    terms: dict
    total: torch.Tensor
    degenerate_clip: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def as_floats(self) -> dict:
        out = {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items()}
        out["total"] = float(torch.as_tensor(self.total).detach())
        return out


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def age_loss(predictor, x_age: torch.Tensor, target_age) -> torch.Tensor:
    """Mean absolute gap between target and predicted age (scalar L2 per sample)."""
    target = torch.as_tensor(target_age, dtype=x_age.dtype)
    if ((target < 0) | (target > 100)).any():
        raise ValueError("target age outside [0, 100]")
    return (target - predictor.predict_age(x_age)).abs().mean()


def directional_clip_loss(embedder, x_age, x, e_t, e_i, eps: float = 1e-12):
    """1 - cos(image-space change, text-space change), batch mean.

    A zero-length direction on either side scores 1 and sets the returned
    flag instead of producing NaN.
    """
    d_img = embedder.embed_image(x_age) - embedder.embed_image(x)
    d_txt = (torch.as_tensor(e_t) - torch.as_tensor(e_i)).to(d_img.dtype)
    d_txt = d_txt.expand_as(d_img)
    n_img = d_img.norm(dim=-1)
    n_txt = d_txt.norm(dim=-1)
    degenerate = (n_img <= eps) | (n_txt <= eps)
    safe = torch.where(degenerate, torch.ones_like(n_img), n_img * n_txt)
    cos = (d_img * d_txt).sum(dim=-1) / safe
    loss = torch.where(degenerate, torch.ones_like(cos), 1.0 - cos)
    return loss.mean(), bool(degenerate.any())


def identity_loss(embedder, x, x_age) -> torch.Tensor:
    _check_shapes(x, x_age)
    a = F.normalize(embedder.embed_identity(x), dim=-1)
    b = F.normalize(embedder.embed_identity(x_age), dim=-1)
    return (1.0 - (a * b).sum(dim=-1)).mean()


def pixel_l2_loss(x, x_age) -> torch.Tensor:
    _check_shapes(x, x_age)
    return ((x - x_age) ** 2).mean()


def perceptual_loss(metric, x, x_age) -> torch.Tensor:
    _check_shapes(x, x_age)
    return metric.perceptual(x, x_age).mean()


def norm_loss(residual: torch.Tensor) -> torch.Tensor:
    """Mean squared magnitude of the latent residual."""
    return (residual**2).mean()


def total_loss(terms: dict, weights: LossWeights | None = None, degenerate_clip: bool = False) -> LossReport:
    weights = weights or LossWeights()
    missing = set(TERMS) - set(terms)
    if missing:
        raise ValueError(f"missing loss terms: {sorted(missing)}")
    total = sum(getattr(weights, k) * terms[k] for k in TERMS)
    return LossReport(terms=dict(terms), total=total, degenerate_clip=degenerate_clip, weights=weights)


def stage1_losses(adapters, x, x_age, residual, target_age, e_t, e_i, weights=None) -> LossReport:
    """All six modulator losses on one batch, combined with ``weights``."""
    clip, degenerate = directional_clip_loss(adapters.text_embedder, x_age, x, e_t, e_i)
    terms = {
        "l2": pixel_l2_loss(x, x_age),
        "lpips": perceptual_loss(adapters.perceptual_metric, x, x_age),
        "norm": norm_loss(residual),
        "id": identity_loss(adapters.identity_embedder, x, x_age),
        "age": age_loss(adapters.age_predictor, x_age, target_age),
        "clip": clip,
    }
    return total_loss(terms, weights, degenerate)
