"""Routing policy: low-resolution rank-1 probability maps over T-F regions.

The filter looks at a dynamic block's input feature map plus a recurrent
state carried across blocks, and emits two per-region probability
channels (local path, non-local path). Each channel is an outer product
of a per-time and a per-frequency sigmoid factor, so it has rank 1 by
construction; nearest-neighbor upsampling expands it to full resolution.
Actions are per-region categorical draws over the two paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import ConvBlock, RecurrentCell


class DegeneratePolicyError(RuntimeError):
    """Both path probabilities vanished for some region."""


@dataclass
class PolicyMap:
    """Low-res path probabilities: p_low[b, 0] = local, p_low[b, 1] = non-local.

    p_low is float64, each channel the outer product of (t_factor, f_factor).
    """

    p_low: torch.Tensor  # (B, 2, T', F')
    t_factor: torch.Tensor  # (B, 2, T')
    f_factor: torch.Tensor  # (B, 2, F')


@dataclass
class Action:
    """Binary routing decision upsampled to feature resolution."""

    mask: torch.Tensor  # (B, 2, T, F) float32, channels (local, non-local)
    low_mask: torch.Tensor  # (B, 2, T', F') float32
    log_prob: torch.Tensor  # (B,) float64, differentiable w.r.t. filter params
    mode: str  # "sampled" | "argmax"

    @property
    def nonlocal_fraction(self) -> torch.Tensor:
        """Per-sample fraction of T-F units routed to the non-local path."""
        return self.mask[:, 1].mean(dim=(1, 2))


def upsample_nearest(low: torch.Tensor, t: int, f: int) -> torch.Tensor:
    """Tile each low-res cell over its region; edge cells clamp.

    Accepts (..., T', F') and returns (..., t, f). The scale factor is
    implied by the size ratio (ceil division).
    """
    t_low, f_low = low.shape[-2], low.shape[-1]
    if t < t_low or f < f_low:
        raise ValueError(f"target {t}x{f} smaller than source {t_low}x{f_low}")
    ds_t = -(-t // t_low)  # ceil
    ds_f = -(-f // f_low)
    idx_t = torch.clamp(torch.arange(t, device=low.device) // ds_t, max=t_low - 1)
    idx_f = torch.clamp(torch.arange(f, device=low.device) // ds_f, max=f_low - 1)
    return low.index_select(-2, idx_t).index_select(-1, idx_f)


class FeatureFilter(nn.Module):
    """Policy network shared by all dynamic blocks.

    Three conv blocks downsample the feature map by ``downsample`` in both
    axes; two stacked LSTM cells carry context across blocks; separate
    time and frequency heads produce sigmoid factors whose outer products
    form the two probability channels.
    """

    def __init__(self, in_channels, filter_channels=8, hidden=32, downsample=4):
        super().__init__()
        if downsample not in (1, 2, 4, 8):
            raise ValueError("downsample must be one of 1, 2, 4, 8")
        self.downsample = downsample
        n_strided = {1: 0, 2: 1, 4: 2, 8: 3}[downsample]
        layers = []
        ch = in_channels
        for i in range(3):
            stride = 2 if i < n_strided else 1
            layers.append(_StridedConvBlock(ch, filter_channels, stride))
            ch = filter_channels
        self.convs = nn.Sequential(*layers)
        self.rnn1 = RecurrentCell(filter_channels, hidden)
        self.rnn2 = RecurrentCell(hidden, hidden)
        self.ctx_proj = nn.Linear(hidden, filter_channels)
        self.head_t = nn.Conv1d(filter_channels, 2, 3, padding=1)
        self.head_f = nn.Conv1d(filter_channels, 2, 3, padding=1)

    def initial_state(self, batch, device=None):
        return (
            self.rnn1.initial_state(batch, device=device),
            self.rnn2.initial_state(batch, device=device),
        )

    def forward(self, z, state):
        """(feature map, state) -> (PolicyMap, new state).

        The caller detaches z when backbone gradients must not leak into
        the policy objective.
        """
        feats = self.convs(z)  # (B, Cf, T', F')
        pooled = feats.mean(dim=(2, 3))
        s1, s2 = state
        h1, s1 = self.rnn1(pooled, s1)
        h2, s2 = self.rnn2(h1, s2)
        ctx = self.ctx_proj(h2)[:, :, None]  # (B, Cf, 1)

        u_t = feats.mean(dim=3) + ctx  # (B, Cf, T')
        u_f = feats.mean(dim=2) + ctx  # (B, Cf, F')
        t_factor = torch.sigmoid(self.head_t(u_t))  # (B, 2, T')
        f_factor = torch.sigmoid(self.head_f(u_f))  # (B, 2, F')

        # Outer product in float64: two float32 factors multiply exactly,
        # keeping each channel rank-1 to machine precision.
        p_low = torch.einsum("bct,bcf->bctf", t_factor.double(), f_factor.double())
        return PolicyMap(p_low=p_low, t_factor=t_factor, f_factor=f_factor), (s1, s2)


class _StridedConvBlock(nn.Module):
    """ConvBlock variant striding both axes (filter-internal downsampling)."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(out_ch, eps=1e-5)

    def forward(self, x):
        return torch.nn.functional.elu(self.bn(self.conv(x)))


def select_action(
    pm: PolicyMap,
    t: int,
    f: int,
    mode: str = "sampled",
    generator: torch.Generator | None = None,
    routing: str = "categorical",
) -> Action:
    """Draw (or argmax) a routing action from a policy map.

    Categorical routing normalizes the two channels per region and picks
    exactly one path per region; ties break to the local (cheaper) path.
    Bernoulli routing (non-default) treats each channel independently.
    """
    p = pm.p_low
    p_local, p_nonlocal = p[:, 0], p[:, 1]

    if routing == "categorical":
        total = p_local + p_nonlocal
        if (total == 0).any():
            raise DegeneratePolicyError("both path probabilities are zero for a region")
        q_local = p_local / total
        if mode == "sampled":
            if generator is None:
                generator = torch.Generator(device=p.device)
            u = torch.rand(q_local.shape, generator=generator, dtype=torch.float64)
            choose_local = u < q_local
        elif mode == "argmax":
            choose_local = q_local >= 0.5  # ties go to the cheap path
        else:
            raise ValueError(f"unknown action mode: {mode!r}")
        chosen_q = torch.where(choose_local, q_local, 1.0 - q_local)
        log_prob = torch.log(chosen_q).sum(dim=(1, 2))
        low_mask = torch.stack([choose_local, ~choose_local], dim=1).to(torch.float32)
    elif routing == "bernoulli":
        if mode == "sampled":
            if generator is None:
                generator = torch.Generator(device=p.device)
            u = torch.rand(p.shape, generator=generator, dtype=torch.float64)
            on = u < p
        elif mode == "argmax":
            on = p >= 0.5
        else:
            raise ValueError(f"unknown action mode: {mode!r}")
        chosen = torch.where(on, p, 1.0 - p)
        log_prob = torch.log(chosen).sum(dim=(1, 2, 3))
        low_mask = on.to(torch.float32)
    else:
        raise ValueError(f"unknown routing: {routing!r}")

    mask = upsample_nearest(low_mask, t, f)
    return Action(
        mask=mask, low_mask=low_mask, log_prob=log_prob, mode="sampled" if mode == "sampled" else "argmax"
    )


def action_log_prob(pm: PolicyMap, low_mask: torch.Tensor, routing: str = "categorical") -> torch.Tensor:
    """Log-probability of a given low-res action under a policy map.

    Used to force specific action sequences (e.g. exhaustive enumeration
    of tiny policy spaces) while keeping the log-prob differentiable.
    """
    p_local, p_nonlocal = pm.p_low[:, 0], pm.p_low[:, 1]
    if routing == "categorical":
        total = p_local + p_nonlocal
        if (total == 0).any():
            raise DegeneratePolicyError("both path probabilities are zero for a region")
        q_local = p_local / total
        choose_local = low_mask[:, 0] > 0.5
        chosen = torch.where(choose_local, q_local, 1.0 - q_local)
        return torch.log(chosen).sum(dim=(1, 2))
    if routing == "bernoulli":
        on = low_mask > 0.5
        chosen = torch.where(on, pm.p_low, 1.0 - pm.p_low)
        return torch.log(chosen).sum(dim=(1, 2, 3))
    raise ValueError(f"unknown routing: {routing!r}")


def random_action(
    batch: int,
    t_low: int,
    f_low: int,
    t: int,
    f: int,
    generator: torch.Generator | None = None,
) -> Action:
    """Uniform random routing at policy resolution (pretraining masks)."""
    if generator is None:
        generator = torch.Generator()
    u = torch.rand(batch, t_low, f_low, generator=generator)
    choose_local = u < 0.5
    low_mask = torch.stack([choose_local, ~choose_local], dim=1).to(torch.float32)
    mask = upsample_nearest(low_mask, t, f)
    log_prob = torch.full((batch,), float(t_low * f_low) * torch.log(torch.tensor(0.5)).item(), dtype=torch.float64)
    return Action(mask=mask, low_mask=low_mask, log_prob=log_prob, mode="sampled")
