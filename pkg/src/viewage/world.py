"""Adapters for the pretrained models the pipeline consumes, plus a toy world.

The toy world is a deterministic stand-in for a 3D-aware generator, a joint
text/image embedder, an age predictor, an identity embedder, a head-pose
estimator and a perceptual metric. Every function is a pure function of its
inputs and the world seed, and everything touching pixels is differentiable.

Rendering happens on a coarse grid of ``CELL x CELL`` pixel blocks (the same
factor the latent encoder pools by), which keeps round-trips through the
latent space lossless.  Two regions of each image are reserved and drawn on
top of the sprite:

* the top-left ``AGE_PATCH x AGE_PATCH`` pixels carry the age scalar as a
  constant intensity ``age / 50 - 1``;
* the bottom cell row carries an identity code read by ``embed_identity``.

Neither region moves with the camera, so age and identity read-outs are
exactly pose invariant.
"""

from __future__ import annotations

import hashlib
import importlib.util
import math
import re
from dataclasses import dataclass, field
from typing import Protocol

import torch
import torch.nn.functional as F

CELL = 4
AGE_PATCH = 8
PIXELS_PER_RADIAN = 16.0  # at 64x64; scales linearly with image size
DEFAULT_L, DEFAULT_D, Z_DIM = 14, 512, 512
AGE_PROMPT = "Person of {age} years old"
POSE_BOX = (0.6, 0.3)  # |azimuth|, |polar| sampled for training and eval

_AGE_RE = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class CameraPose:
    azimuth: float = 0.0
    polar: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.azimuth) and math.isfinite(self.polar)):
            raise ValueError("pose angles must be finite")
        if abs(self.azimuth) > math.pi:
            raise ValueError(f"azimuth {self.azimuth} outside [-pi, pi]")
        if abs(self.polar) > math.pi / 2:
            raise ValueError(f"polar {self.polar} outside [-pi/2, pi/2]")

    def as_tuple(self) -> tuple[float, float]:
        return (self.azimuth, self.polar)


@dataclass
class LatentCode:
    styles: torch.Tensor  # [L, D]
    seed_id: int = -1

    def __post_init__(self):
        if self.styles.dim() != 2 or self.styles.shape[0] < 1 or self.styles.shape[1] < 2:
            raise ValueError(f"styles must be [L>=1, D>=2], got {tuple(self.styles.shape)}")
        if not torch.isfinite(self.styles).all():
            raise ValueError("latent code contains non-finite entries")


@dataclass
class ImageSample:
    pixels: torch.Tensor  # [3, H, W] in [-1, 1]
    pose: CameraPose = field(default_factory=CameraPose)
    age_years: float = 50.0

    def __post_init__(self):
        p = self.pixels
        if p.dim() != 3 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"pixels must be [3, H, H], got {tuple(p.shape)}")
        if not (0.0 <= self.age_years <= 100.0):
            raise ValueError(f"age {self.age_years} outside [0, 100]")


@dataclass
class EmbeddingVector:
    values: torch.Tensor
    source: str = "text"

    def is_null(self) -> bool:
        return bool((self.values == 0).all())


def age_prompt(age: float) -> str:
    return AGE_PROMPT.format(age=int(round(age)))


def null_embedding(dim: int, dtype=torch.float32) -> EmbeddingVector:
    return EmbeddingVector(torch.zeros(dim, dtype=dtype), "text")


def pose_tensor(poses, dtype=torch.float32) -> torch.Tensor:
    """Stack CameraPoses (or (az, polar) pairs) into an [N, 2] tensor."""
    rows = [p.as_tuple() if isinstance(p, CameraPose) else tuple(p) for p in poses]
    return torch.tensor(rows, dtype=dtype).reshape(-1, 2)


def _seeded(seed: int, *shape, scale: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype) * scale


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") & (2**62 - 1)


# Adapter interfaces.  Consumers only touch these methods, so an external
# implementation can replace any of them.


class Generator(Protocol):
    L: int
    D: int
    resolution: int

    def map_to_w(self, z: torch.Tensor) -> torch.Tensor: ...
    def render(self, styles: torch.Tensor, poses: torch.Tensor) -> torch.Tensor: ...


class TextImageEmbedder(Protocol):
    embed_dim: int

    def embed_text(self, prompt: str) -> EmbeddingVector: ...
    def embed_image(self, pixels: torch.Tensor) -> torch.Tensor: ...


class AgePredictor(Protocol):
    def predict_age(self, pixels: torch.Tensor) -> torch.Tensor: ...


class IdentityEmbedder(Protocol):
    def embed_identity(self, pixels: torch.Tensor) -> torch.Tensor: ...


class PoseEstimator(Protocol):
    def estimate_pose(self, pixels: torch.Tensor) -> torch.Tensor: ...


class PerceptualMetric(Protocol):
    def perceptual(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


def sample_z(rng_seed: int, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal [1, 512] noise vector, reproducible from the seed."""
    g = torch.Generator().manual_seed(int(rng_seed))
    return torch.randn(1, Z_DIM, generator=g, dtype=torch.float64).to(dtype)


class ToyWorld:
    """Deterministic synthetic stand-in for every pretrained adapter.

    ``num_layers`` and ``style_dim`` set the latent shape (14 x 512 by
    default); ``resolution`` the square image size (multiple of 4).
    """

    def __init__(
        self,
        seed: int = 0,
        num_layers: int = DEFAULT_L,
        style_dim: int = DEFAULT_D,
        resolution: int = 64,
        embed_dim: int = 64,
        id_dim: int = 32,
    ):
        if resolution % CELL or resolution < 4 * CELL:
            raise ValueError("resolution must be a multiple of 4 and at least 16")
        self.seed = seed
        self.L, self.D = num_layers, style_dim
        self.resolution = resolution
        self.grid = resolution // CELL
        self.embed_dim = embed_dim
        self.id_dim = id_dim
        self.px_per_rad = PIXELS_PER_RADIAN * resolution / 64.0
        s = seed * 1000
        n_in = self.L * self.D
        g = self.grid

        self._map_weight = _seeded(s + 1, Z_DIM, self.D, scale=Z_DIM**-0.5)
        self._map_bias = _seeded(s + 2, self.D, scale=0.1)
        # Flattened-style projections driving the sprite.
        self._p_shape = _seeded(s + 3, n_in, 2, scale=n_in**-0.5)
        self._p_color = _seeded(s + 4, n_in, 3, scale=n_in**-0.5)
        self._p_age = _seeded(s + 5, n_in, scale=n_in**-0.5)
        self._p_id = _seeded(s + 6, n_in, 3 * g, scale=n_in**-0.5)
        self._id_proj = _seeded(s + 7, 3 * g, id_dim, scale=(3 * g) ** -0.5)
        self._age_dir = F.normalize(_seeded(s + 8, embed_dim), dim=0)
        self._img_proj = _seeded(s + 9, 3 * g * g, embed_dim, scale=0.5 * (3 * g * g) ** -0.5)
        self._feat_proj = _seeded(s + 10, 3 * g * g, 128, scale=(3 * g * g) ** -0.5)
        self.age_embed_scale = 4.0

    # -- generator -----------------------------------------------------------

    def map_to_w(self, z: torch.Tensor) -> torch.Tensor:
        """Affine map of z ([..., 512]) to a style matrix [..., L, D]."""
        if not torch.isfinite(z).all():
            raise ValueError("z contains non-finite entries")
        row = z @ self._map_weight.to(z.dtype) + self._map_bias.to(z.dtype)
        if row.dim() >= 2 and row.shape[-2] == 1:
            row = row.squeeze(-2)
        return row.unsqueeze(-2).expand(*row.shape[:-1], self.L, self.D).clone()

    def latent(self, seed: int, dtype=torch.float32) -> LatentCode:
        return LatentCode(self.map_to_w(sample_z(seed, dtype)), seed)

    def _flat(self, styles: torch.Tensor) -> torch.Tensor:
        if styles.shape[-2:] != (self.L, self.D):
            raise ValueError(f"styles must end in ({self.L}, {self.D}), got {tuple(styles.shape)}")
        return styles.reshape(*styles.shape[:-2], self.L * self.D)

    def age_of(self, styles: torch.Tensor) -> torch.Tensor:
        """The age scalar encoded by a latent, in (0, 100)."""
        flat = self._flat(styles)
        return 50.0 + 50.0 * torch.tanh(0.7 * (flat @ self._p_age.to(flat.dtype)))

    def identity_code(self, styles: torch.Tensor) -> torch.Tensor:
        flat = self._flat(styles)
        code = torch.tanh(flat @ self._p_id.to(flat.dtype))
        return code.reshape(*code.shape[:-1], 3, self.grid)

    def sprite_centre(self, poses: torch.Tensor) -> torch.Tensor:
        """Cell-space (x, y) centre of the sprite for [..., 2] poses."""
        c = (self.grid - 1) / 2.0
        k = self.px_per_rad / CELL
        return torch.stack([c + k * poses[..., 0], c - k * poses[..., 1]], dim=-1)

    def render(self, styles: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """Render latents [..., L, D] at poses [..., 2] into [..., 3, H, W].

        Leading dimensions of ``styles`` and ``poses`` broadcast.
        """
        if poses.shape[-1] != 2:
            raise ValueError("poses must have trailing dim 2")
        if (poses[..., 0].abs() > math.pi).any() or (poses[..., 1].abs() > math.pi / 2).any():
            raise ValueError("pose out of range")
        dtype = styles.dtype
        poses = poses.to(dtype)
        flat = self._flat(styles)
        shape = flat @ self._p_shape.to(dtype)
        sigma = 1.3 + 0.5 * torch.sigmoid(shape)  # cells
        age = self.age_of(styles)
        gray = (0.6 * age / 100.0).unsqueeze(-1)
        base = 0.6 + 0.35 * torch.tanh(flat @ self._p_color.to(dtype))
        color = (1 - gray) * base + gray * 0.9  # [..., 3]

        g = self.grid
        coords = torch.arange(g, dtype=dtype)
        centre = self.sprite_centre(poses)
        cx = centre[..., 0, None, None]
        cy = centre[..., 1, None, None]
        dy = coords[:, None] - cy
        dx = coords[None, :] - cx
        dx = dx - 0.3 * poses[..., 0, None, None] * dy  # shear; keeps point symmetry
        sx = sigma[..., 0, None, None]
        sy = sigma[..., 1, None, None]
        alpha = torch.exp(-0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2))
        cells = -1.0 + alpha.unsqueeze(-3) * (color[..., :, None, None] + 1.0)

        a = AGE_PATCH // CELL
        age_mask = torch.zeros(g, g, dtype=torch.bool)
        age_mask[:a, :a] = True
        strip_mask = torch.zeros(g, g, dtype=torch.bool)
        strip_mask[-1, :] = True
        age_val = (age / 50.0 - 1.0)[..., None, None, None]
        strip = self.identity_code(styles).unsqueeze(-2)  # [..., 3, 1, g]
        cells = torch.where(age_mask, age_val, cells)
        cells = torch.where(strip_mask, strip, cells)
        return cells.repeat_interleave(CELL, dim=-2).repeat_interleave(CELL, dim=-1)

    # -- readers -------------------------------------------------------------

    def predict_age(self, pixels: torch.Tensor) -> torch.Tensor:
        """Age in years from the reserved corner patch; 50 for a zero image."""
        m = pixels[..., :AGE_PATCH, :AGE_PATCH].mean(dim=(-3, -2, -1))
        return ((m + 1.0) * 50.0).clamp(0.0, 100.0)

    def _cells(self, pixels: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(pixels.reshape(-1, *pixels.shape[-3:]), CELL).reshape(
            *pixels.shape[:-2], self.grid, self.grid
        )

    def embed_identity(self, pixels: torch.Tensor) -> torch.Tensor:
        strip = self._cells(pixels)[..., :, -1, :]
        flat = strip.reshape(*strip.shape[:-2], -1)
        return flat @ self._id_proj.to(flat.dtype)

    def _sprite_mask(self, dtype) -> torch.Tensor:
        g = self.grid
        a = AGE_PATCH // CELL
        mask = torch.ones(g, g, dtype=dtype)
        mask[:a, :a] = 0
        mask[-1, :] = 0
        return mask

    def estimate_pose(self, pixels: torch.Tensor, iters: int = 12) -> torch.Tensor:
        """Recover (jaw, pitch) in radians from the sprite centroid.

        The centroid is refined with a Gaussian window around the previous
        estimate; because the sprite is point-symmetric the window leaves the
        fixed point unbiased while suppressing background noise.
        """
        with torch.no_grad():
            cells = self._cells(pixels.double()).mean(dim=-3)  # [..., g, g]
            mask = self._sprite_mask(cells.dtype)
            flat = cells.reshape(*cells.shape[:-2], -1)
            keep = mask.reshape(-1) > 0
            bg = flat[..., keep].median(dim=-1).values[..., None, None]
            v = (cells - bg) * mask
            g = self.grid
            coords = torch.arange(g, dtype=cells.dtype)
            yy, xx = torch.meshgrid(coords, coords, indexing="ij")
            pos = v.clamp(min=0)
            thr = pos.amax(dim=(-2, -1), keepdim=True) * 0.3
            w = (pos - thr).clamp(min=0)
            tot = w.sum(dim=(-2, -1)).clamp(min=1e-12)
            cx = (w * xx).sum(dim=(-2, -1)) / tot
            cy = (w * yy).sum(dim=(-2, -1)) / tot
            for _ in range(iters):
                win = torch.exp(-0.5 * (((xx - cx[..., None, None]) ** 2 + (yy - cy[..., None, None]) ** 2) / 9.0))
                w = v * win
                tot = w.sum(dim=(-2, -1))
                tot = torch.where(tot.abs() < 1e-12, torch.full_like(tot, 1e-12), tot)
                cx = ((w * xx).sum(dim=(-2, -1)) / tot).clamp(0, g - 1)
                cy = ((w * yy).sum(dim=(-2, -1)) / tot).clamp(0, g - 1)
            c = (g - 1) / 2.0
            k = self.px_per_rad / CELL
            return torch.stack([(cx - c) / k, (c - cy) / k], dim=-1).to(pixels.dtype)

    # -- embedders -----------------------------------------------------------

    def embed_text(self, prompt: str) -> EmbeddingVector:
        """Hash-seeded prompt embedding with a linear age direction.

        The number in the prompt is replaced by a placeholder before hashing,
        so prompts differing only in age differ by ``age_dir * delta / 100``
        scaled by ``age_embed_scale``.
        """
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        m = _AGE_RE.search(prompt)
        template = _AGE_RE.sub("{n}", prompt, count=1) if m else prompt
        base = _seeded(_stable_hash(f"{self.seed}:{template}"), self.embed_dim, scale=self.embed_dim**-0.5)
        vec = base.clone()
        if m:
            vec = vec + self._age_dir * self.age_embed_scale * float(m.group()) / 100.0
        return EmbeddingVector(vec.float(), "text")

    def embed_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """Image-side embedding sharing the text embedder's age direction."""
        cells = self._cells(pixels)
        flat = cells.reshape(*cells.shape[:-3], -1)
        dtype = pixels.dtype
        age = self.predict_age(pixels)
        return flat @ self._img_proj.to(dtype) + self._age_dir.to(dtype) * (self.age_embed_scale * age / 100.0)[..., None]

    # -- perceptual ----------------------------------------------------------

    def perceptual(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean squared difference of a fixed random feature projection, per sample."""
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        d = self._cells(a) - self._cells(b)
        feats = d.reshape(*d.shape[:-3], -1) @ self._feat_proj.to(a.dtype)
        return (feats**2).mean(dim=-1)


ADAPTER_KEYS = ("generator", "text_embedder", "age_predictor", "identity_embedder", "pose_estimator", "perceptual_metric")


@dataclass
class Adapters:
    generator: Generator
    text_embedder: TextImageEmbedder
    age_predictor: AgePredictor
    identity_embedder: IdentityEmbedder
    pose_estimator: PoseEstimator
    perceptual_metric: PerceptualMetric


def _load_external(spec: str, key: str):
    path = spec.split(":", 1)[1]
    mod_spec = importlib.util.spec_from_file_location(f"viewage_external_{key}", path)
    if mod_spec is None or mod_spec.loader is None:
        raise ValueError(f"cannot load external adapter {path!r} for {key}")
    module = importlib.util.module_from_spec(mod_spec)
    mod_spec.loader.exec_module(module)
    return module.build(key)


def build_adapters(registry: dict | None = None, world: ToyWorld | None = None) -> Adapters:
    """Resolve each adapter key to ``"toy"`` or ``"external:<path>"``.

    External modules must define ``build(key)`` returning an object with the
    matching adapter methods.
    """
    registry = dict(registry or {})
    world = world or ToyWorld()
    resolved = {}
    for key in ADAPTER_KEYS:
        spec = registry.pop(key, "toy")
        if spec == "toy":
            resolved[key] = world
        elif isinstance(spec, str) and spec.startswith("external:"):
            resolved[key] = _load_external(spec, key)
        else:
            raise ValueError(f"adapter {key}: expected 'toy' or 'external:<path>', got {spec!r}")
    if registry:
        raise ValueError(f"unknown adapter keys: {sorted(registry)}")
    return Adapters(**resolved)
