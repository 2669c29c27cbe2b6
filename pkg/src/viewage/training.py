"""Stage trainers and the composite denoiser they build up.

Stages run in order: base pretraining (the toy stand-in for a pretrained
latent diffusion model), aging, view fine-tuning, controller and temporal.
Each trainer touches only the parameters its stage owns.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .aging import AgingBundle, make_age_input
from .control import ControlBranch, ViewModel, view_encoding
from .dataset import FrameGroup, derive_seed, sample_poses
from .diffusion import (
    DivergenceError,
    ForwardState,
    LatentCodec,
    NoiseSchedule,
    UNet,
    add_noise,
    ddim_sample,
    eps_loss,
    sample_timesteps,
)
from .modulation import AgeModulator
from .temporal import TemporalLayer, inflate
from .world import Adapters, age_prompt

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    warmup: int = 100
    ref_prob: float = 0.5  # base pretraining only

    def as_dict(self) -> dict:
        return asdict(self)


def _optimizer(params, cfg: StageConfig):
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    steps = max(cfg.steps, 1)

    def factor(s):
        return min(1.0, (s + 1) / max(cfg.warmup, 1)) * 0.5 * (1 + math.cos(math.pi * s / steps))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def _fit(loss_fn, params, cfg: StageConfig, tag: str, log_file=None) -> list:
    """Generic loop: ``loss_fn(step, generator)`` returns a scalar loss."""
    history = []
    if cfg.steps == 0:
        return history
    opt, sched = _optimizer(params, cfg)
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, tag, "noise"))
    for step in range(cfg.steps):
        loss = loss_fn(step, g)
        if not torch.isfinite(loss):
            raise DivergenceError(f"{tag} loss became {float(loss)} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step, "eps_mse": float(loss.detach()), "total": float(loss.detach())}
        history.append(row)
        if log_file is not None:
            log_file.write(json.dumps(row) + "\n")
        if step % 500 == 0:
            log.info("%s step %d loss %.4f", tag, step, row["total"])
    return history


# -- data --------------------------------------------------------------------


class LatentData:
    """A loaded dataset encoded to latents and stacked for fast batching."""

    def __init__(self, groups: list[FrameGroup], codec: LatentCodec):
        by_id: dict = {}
        for g in groups:
            by_id.setdefault(g.identity_id, []).append(g)
        ids = sorted(by_id)
        if not ids:
            raise ValueError("empty dataset")
        self.identity_ids = ids
        rows = [sorted(by_id[i], key=lambda g: g.age_index) for i in ids]
        with torch.no_grad():
            self.inputs = codec.encode(torch.stack([r[0].input_image for r in rows]))
            self.latents = codec.encode(torch.stack([torch.stack([g.images for g in r]) for r in rows]))
        self.poses = torch.stack([r[0].poses for r in rows])
        self.ages = torch.tensor([[g.target_age for g in r] for r in rows])
        self.source_age = torch.tensor([r[0].source_age for r in rows])
        self.split = [r[0].split for r in rows]

    @property
    def shape(self) -> tuple[int, int, int]:
        n, a, v = self.latents.shape[:3]
        return n, v, a

    def subset(self, split: str) -> "LatentData":
        keep = [k for k, s in enumerate(self.split) if s == split]
        out = object.__new__(LatentData)
        out.identity_ids = [self.identity_ids[k] for k in keep]
        for name in ("inputs", "latents", "poses", "ages", "source_age"):
            setattr(out, name, getattr(self, name)[keep])
        out.split = [split] * len(keep)
        return out

    def _draw(self, g, n, high):
        return torch.randint(0, high, (n,), generator=g)

    def aging_batch(self, g, n):
        """Same-view pairs at two ages of one identity."""
        N, V, A = self.shape
        i, v = self._draw(g, n, N), self._draw(g, n, V)
        a_in, a_out = self._draw(g, n, A), self._draw(g, n, A)
        return self.latents[i, a_in, v], self.latents[i, a_out, v], self.ages[i, a_out]

    def controller_batch(self, g, n):
        """Input image at pose (0, 0) and source age; target at a stored view and age."""
        N, V, A = self.shape
        i, v, a = self._draw(g, n, N), self._draw(g, n, V), self._draw(g, n, A)
        return self.inputs[i], self.latents[i, a, v], self.ages[i, a], view_encoding(self.poses[i, v, 0], self.poses[i, v, 1])

    def group_batch(self, g, n):
        """``n`` whole frame groups, folded to [(n*V), ...]."""
        N, V, A = self.shape
        i, a = self._draw(g, n, N), self._draw(g, n, A)
        targets = self.latents[i, a].reshape(n * V, *self.latents.shape[-3:])
        enc = view_encoding(self.poses[i, :, 0], self.poses[i, :, 1]).reshape(n * V, 4)
        return self.inputs[i], targets, self.ages[i, a], enc


# -- composite denoiser --------------------------------------------------------


class AgeViewDenoiser(nn.Module):
    """Frozen base plus aging replica, optional controller and temporal layers.

    ``forward`` predicts noise for ``z_t`` laid out as groups of
    ``num_frames`` frames; ``input_latent`` and ``target_age`` are per group,
    ``enc`` (view encodings) per frame.
    """

    def __init__(self, bundle: AgingBundle, controller: ControlBranch | None = None):
        super().__init__()
        self.bundle = bundle
        self.controller = controller
        self.temporal_layers = nn.ModuleList()
        self.encoder_injection = False
        self.frame_pos = False

    @property
    def base(self) -> UNet:
        return self.bundle.base

    def add_temporal_layers(self) -> list[TemporalLayer]:
        layers = inflate(self.base)
        self.temporal_layers = nn.ModuleList(layers)
        return layers

    def forward(self, z_t, t, input_latent, target_age, enc=None, num_frames: int = 1, use_controller: bool = True):
        refs = self.bundle.extract_reference_states(make_age_input(input_latent, target_age))
        st = self._state(refs, num_frames)
        if self.controller is not None and use_controller and enc is not None:
            hint = input_latent.repeat_interleave(num_frames, dim=0)
            st.control = self.controller(z_t, _frame_t(t, num_frames, z_t.shape[0]), hint, enc)
        return self.base(z_t, _frame_t(t, num_frames, z_t.shape[0]), st)

    def _state(self, refs, num_frames: int) -> ForwardState:
        return ForwardState(
            reference=refs, separate_ref_proj=self.bundle.separate_ref_proj, num_frames=num_frames,
            frame_pos=self.frame_pos, encoder_control=self.encoder_injection,
        )

    def unconditional(self, z_t, t, num_frames: int = 1):
        """Base alone with no reference tokens, control or context."""
        return self.base(z_t, _frame_t(t, num_frames, z_t.shape[0]), self._state(None, num_frames))


def _frame_t(t, num_frames: int, total: int) -> torch.Tensor:
    t = torch.as_tensor(t).reshape(-1)
    if t.numel() == 1:
        return t.expand(total)
    if t.numel() * num_frames == total:
        return t.repeat_interleave(num_frames)
    return t


# -- stage 0: base pretraining ----------------------------------------------------


@torch.no_grad()
def pretrain_batch(adapters: Adapters, modulator: AgeModulator, codec: LatentCodec, seed: int, n: int, keep_prob: float = 0.3):
    """Random subjects at random ages and poses, plus a second pose of each."""
    g = torch.Generator().manual_seed(seed)
    gen = adapters.generator
    w = gen.map_to_w(torch.randn(n, 1, 512, generator=g))
    ages = torch.randint(0, 76, (n,), generator=g).float()
    keep = torch.rand(n, generator=g) < keep_prob
    e_t = torch.stack([adapters.text_embedder.embed_text(age_prompt(a)).values for a in ages.tolist()])
    w = torch.where(keep[:, None, None], w, modulator(w, e_t).aged)
    poses, ref_poses = sample_poses(g, n), sample_poses(g, n)
    return codec.encode(gen.render(w, poses)), codec.encode(gen.render(w, ref_poses))


def self_reference(unet: UNet, latent: torch.Tensor) -> list:
    st = ForwardState(capture=[])
    with torch.no_grad():
        unet(latent, torch.zeros(1, dtype=torch.long), st)
    return st.capture


def pretrain_base(
    adapters: Adapters, modulator: AgeModulator, codec: LatentCodec, schedule: NoiseSchedule, cfg: StageConfig, unet: UNet | None = None, log_file=None
) -> tuple[UNet, list]:
    """Train the toy base denoiser from scratch on generator renders.

    On a ``ref_prob`` share of steps the self-attention sites also see
    reference tokens taken from the base itself on a clean render of the same
    subject at another pose, so the base learns to draw on reference tokens
    the way large pretrained denoisers do.
    """
    if unet is None:
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(cfg.seed, "base-init"))
            unet = UNet()

    def loss_fn(step, g):
        z0, ref = pretrain_batch(adapters, modulator, codec, derive_seed(cfg.seed, "base", step), cfg.batch_size)
        t = sample_timesteps(schedule, cfg.batch_size, g)
        eps = torch.randn(z0.shape, generator=g)
        use_ref = bool(torch.rand(1, generator=g) < cfg.ref_prob)
        st = ForwardState(reference=self_reference(unet, ref) if use_ref else None)
        return eps_loss(lambda z, tt, c: unet(z, tt, st), schedule, z0, None, t, eps)

    return unet, _fit(loss_fn, unet.parameters(), cfg, "base", log_file)


# -- stage 1: aging ------------------------------------------------------------


def train_aging(bundle: AgingBundle, data: LatentData, schedule: NoiseSchedule, cfg: StageConfig, log_file=None) -> list:
    """Fit the aging replica; the base stays frozen."""
    bundle.base.requires_grad_(False)
    params = bundle.trainable_parameters()
    for p in params:
        p.requires_grad_(True)

    def loss_fn(step, g):
        x_in, z0, age = data.aging_batch(g, cfg.batch_size)
        t = sample_timesteps(schedule, cfg.batch_size, g)
        eps = torch.randn(z0.shape, generator=g)
        return eps_loss(lambda z, tt, c: bundle.aged_denoise(z, tt, x_in, age), schedule, z0, None, t, eps)

    return _fit(loss_fn, params, cfg, "aging", log_file)


# -- stage 2a: view fine-tuning ----------------------------------------------------


@torch.no_grad()
def make_view_pairs(adapters: Adapters, n: int, seed: int, box=None):
    """Same-latent renders at (0, 0) and at a sampled relative pose.

    Returns ``(x, x_pose, azimuth, polar)`` tensors; empty tensors for n = 0.
    """
    gen = adapters.generator
    g = torch.Generator().manual_seed(seed)
    w = gen.map_to_w(torch.randn(n, 1, 512, generator=g))
    poses = sample_poses(g, n) if box is None else sample_poses(g, n, box)
    x = gen.render(w, torch.zeros(n, 2))
    x_pose = gen.render(w, poses)
    return x, x_pose, poses[:, 0], poses[:, 1]


def view_pair_latents(adapters, codec, n, seed):
    x, x_pose, az, po = make_view_pairs(adapters, n, seed)
    return codec.encode(x), codec.encode(x_pose), view_encoding(az, po)


def view_loss(view_model: ViewModel, schedule, src, tgt, enc, g) -> torch.Tensor:
    t = sample_timesteps(schedule, src.shape[0], g)
    eps = torch.randn(tgt.shape, generator=g)
    return eps_loss(lambda z, tt, c: view_model(z, tt, src, enc), schedule, tgt, None, t, eps)


def finetune_view_model(view_model: ViewModel, adapters: Adapters, codec: LatentCodec, schedule, cfg: StageConfig, log_file=None) -> list:
    """Noise-prediction fine-tuning of the standalone view denoiser."""
    view_model.requires_grad_(True)

    def loss_fn(step, g):
        src, tgt, enc = view_pair_latents(adapters, codec, cfg.batch_size, derive_seed(cfg.seed, "view", step))
        return view_loss(view_model, schedule, src, tgt, enc, g)

    return _fit(loss_fn, view_model.parameters(), cfg, "view-finetune", log_file)


@torch.no_grad()
def heldout_view_loss(view_model: ViewModel, adapters, codec, schedule, n: int = 64, seed: int = 4242) -> float:
    src, tgt, enc = view_pair_latents(adapters, codec, n, seed)
    g = torch.Generator().manual_seed(seed)
    return float(view_loss(view_model, schedule, src, tgt, enc, g))


# -- stage 2b: controller ------------------------------------------------------------


def train_controller(model: AgeViewDenoiser, data: LatentData, schedule, cfg: StageConfig, rgb_hint=None, log_file=None) -> list:
    """Fit the control branch; base and aging replica stay frozen.

    ``rgb_hint(batch_indices...)`` is unused for the angle arm; the RGB arm
    passes target-pose latents through ``data`` instead (see ``rgb_batch``).
    """
    model.requires_grad_(False)
    model.controller.requires_grad_(True)
    rgb = model.controller.condition == "rgb"

    def loss_fn(step, g):
        if rgb:
            x_in, z0, age, enc, hint = rgb_batch(data, g, cfg.batch_size)
        else:
            x_in, z0, age, enc = data.controller_batch(g, cfg.batch_size)
            hint = None
        t = sample_timesteps(schedule, cfg.batch_size, g)
        eps = torch.randn(z0.shape, generator=g)
        return eps_loss(lambda z, tt, c: controlled_eps(model, z, tt, x_in, age, enc, hint), schedule, z0, None, t, eps)

    return _fit(loss_fn, model.controller.parameters(), cfg, f"controller-{model.controller.condition}", log_file)


def rgb_batch(data: LatentData, g, n):
    """Controller batch whose hint is the source-age subject rendered at the target pose."""
    N, V, A = data.shape
    i, v, a = data._draw(g, n, N), data._draw(g, n, V), data._draw(g, n, A)
    # The stored age index closest to the source age stands in for the source render.
    src_a = (data.ages[i] - data.source_age[i, None]).abs().argmin(dim=1)
    enc = view_encoding(data.poses[i, v, 0], data.poses[i, v, 1])
    return data.inputs[i], data.latents[i, a, v], data.ages[i, a], enc, data.latents[i, src_a, v]


def controlled_eps(model: AgeViewDenoiser, z_t, t, input_latent, age, enc, hint=None, num_frames: int = 1):
    """Like ``model.forward`` but lets the RGB arm substitute its hint."""
    if hint is None:
        return model(z_t, t, input_latent, age, enc, num_frames)
    refs = model.bundle.extract_reference_states(make_age_input(input_latent, age))
    st = model._state(refs, num_frames)
    tt = _frame_t(t, num_frames, z_t.shape[0])
    st.control = model.controller(z_t, tt, hint, enc)
    return model.base(z_t, tt, st)


# -- stage 3: temporal ---------------------------------------------------------------


def train_temporal(model: AgeViewDenoiser, data: LatentData, schedule, cfg: StageConfig, log_file=None) -> list:
    """Fit only the temporal layers on whole frame groups (one t per group)."""
    if len(model.temporal_layers) == 0:
        model.add_temporal_layers()
    model.requires_grad_(False)
    model.temporal_layers.requires_grad_(True)
    views = data.shape[1]
    groups = max(1, cfg.batch_size // views)

    def loss_fn(step, g):
        x_in, z0, age, enc = data.group_batch(g, groups)
        t = sample_timesteps(schedule, groups, g)
        eps = torch.randn(z0.shape, generator=g)
        z_t = add_noise(schedule, z0, t.repeat_interleave(views), eps)
        pred = model(z_t, t, x_in, age, enc, num_frames=views)
        return torch.nn.functional.mse_loss(pred, eps)

    return _fit(loss_fn, model.temporal_layers.parameters(), cfg, "temporal", log_file)


# -- sampling --------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    steps: int = 20
    guidance_scale: float = 1.0
    clip: bool = True


def sample_groups(
    model: AgeViewDenoiser,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    input_latent: torch.Tensor,
    target_age: torch.Tensor,
    enc: torch.Tensor | None,
    num_frames: int,
    seed: int,
    sampler: SamplerConfig,
    use_controller: bool = True,
    hint: torch.Tensor | None = None,
) -> torch.Tensor:
    """One joint DDIM trajectory per group; returns decoded frames [(G*F), 3, H, W]."""
    groups = input_latent.shape[0]
    shape = (groups * num_frames, *input_latent.shape[1:])
    z_T = torch.randn(shape, generator=torch.Generator().manual_seed(seed))

    def eps_fn(z, t, cond):
        if cond is None:
            return model.unconditional(z, t, num_frames)
        if hint is not None:
            return controlled_eps(model, z, t, input_latent, target_age, enc, hint, num_frames)
        return model(z, t, input_latent, target_age, enc, num_frames, use_controller)

    z0 = ddim_sample(
        eps_fn, z_T, schedule, sampler.steps, sampler.guidance_scale, cond=True, uncond=None,
        clip_x0=codec.bound if sampler.clip else None,
    )
    return codec.decode(z0)
