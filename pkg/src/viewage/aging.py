"""Aging network: a trainable replica of the base denoiser whose hidden
attention tokens are injected into the frozen base's self-attention."""

from __future__ import annotations

import copy

import torch
from torch import nn

from .diffusion import ForwardState, UNet, attention, param_checksum

AGE_CHANNEL_SCALE = 100.0


def age_channel_value(age) -> torch.Tensor:
    """Map years in [0, 100] to [-1, 1] via 2a/100 - 1."""
    age = torch.as_tensor(age, dtype=torch.float32)
    if ((age < 0) | (age > 100)).any():
        raise ValueError("target age outside [0, 100]")
    return 2.0 * age / AGE_CHANNEL_SCALE - 1.0


def make_age_input(latent: torch.Tensor, target_age) -> torch.Tensor:
    """Append a constant age plane to a clean input latent [B, C, h, w]."""
    val = age_channel_value(target_age).to(latent).reshape(-1, 1, 1, 1)
    plane = val.expand(latent.shape[0], 1, *latent.shape[2:])
    return torch.cat([latent, plane], dim=1)


def reference_attention(q_tokens, ref_tokens, w_q, w_k, w_v) -> torch.Tensor:
    """Functional form: queries from ``q_tokens``; keys and values from the
    concatenation ``[q_tokens ; ref_tokens]``.  Weights act as ``x @ W``."""
    both = torch.cat([q_tokens, ref_tokens], dim=-2)
    return attention(q_tokens @ w_q, both @ w_k, both @ w_v)


class AgingBundle(nn.Module):
    """Frozen base denoiser plus its trainable age-conditioned replica."""

    def __init__(self, base: UNet, separate_ref_proj: bool = False):
        super().__init__()
        self.base = base
        self.aging = copy.deepcopy(base)
        self.aging.widen_input(1)
        # Temporal layers belong to the base only.
        for block in self.aging.attn_blocks():
            block.temporal_sa = block.temporal_ca = None
        self.separate_ref_proj = separate_ref_proj
        self.base.requires_grad_(False)
        if separate_ref_proj:
            # Reference key/value maps live on the base's sites but train with the replica.
            for site in base.self_attention_sites():
                site.enable_reference_projections()

    def _is_base_own(self, name: str) -> bool:
        return "temporal_" not in name and ".ref_k." not in name and ".ref_v." not in name

    def trainable_parameters(self):
        params = list(self.aging.parameters())
        if self.separate_ref_proj:
            for site in self.base.self_attention_sites():
                params += list(site.ref_k.parameters()) + list(site.ref_v.parameters())
        return params

    def trainable_state(self) -> dict:
        state = {f"aging.{k}": v.clone() for k, v in self.aging.state_dict().items()}
        if self.separate_ref_proj:
            for i, site in enumerate(self.base.self_attention_sites()):
                for name in ("ref_k", "ref_v"):
                    state[f"ref.{i}.{name}.weight"] = getattr(site, name).weight.detach().clone()
        return state

    def load_trainable_state(self, state: dict):
        self.aging.load_state_dict({k[len("aging."):]: v for k, v in state.items() if k.startswith("aging.")})
        if self.separate_ref_proj:
            with torch.no_grad():
                for i, site in enumerate(self.base.self_attention_sites()):
                    for name in ("ref_k", "ref_v"):
                        getattr(site, name).weight.copy_(state[f"ref.{i}.{name}.weight"])

    def base_checksum(self) -> str:
        """Checksum of the pretrained base alone (inserted layers excluded)."""
        return param_checksum({k: v for k, v in self.base.state_dict().items() if self._is_base_own(k)})

    def aging_checksum(self) -> str:
        return param_checksum(self.trainable_state())

    def extract_reference_states(self, aging_input: torch.Tensor) -> list[torch.Tensor]:
        """One pass through the replica at t = 0, capturing pre-attention tokens."""
        st = ForwardState(capture=[])
        self.aging(aging_input, torch.zeros(1, dtype=torch.long), st)
        return st.capture

    def aged_denoise(self, z_t, t, input_latent, target_age, st: ForwardState | None = None):
        refs = self.extract_reference_states(make_age_input(input_latent, target_age))
        st = st or ForwardState()
        st.reference = refs
        st.separate_ref_proj = self.separate_ref_proj
        return self.base(z_t, t, st)
