"""Enhancer backbone: encoder, routed dynamic blocks, decoder, FLOP model.

The encoder strides only the frequency axis, so dynamic-block features
keep the input's frame count and routing masks align with time frames.
Each dynamic block runs a shared conv path, splits its output between a
local-attention branch and a non-local-attention branch according to the
routing masks, and fuses branch outputs with the shared feature through
one more conv block. A branch whose mask is all-zero contributes exactly
zero (the attention blocks map zero to zero), so it is skipped outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ConvBlock, LocalAttention, NonLocalAttention, conv_stack
from .config import Config
from .policy import Action, FeatureFilter, random_action, select_action

N_ENCODER_BLOCKS = 3


@dataclass
class NetworkConfig:
    in_channels: int = 2
    channels: int = 8
    n_dynamic_blocks: int = 4
    mask_downsample: int = 4
    local_attention: bool = True
    nonlocal_attention: bool = True
    fusion: str = "feature_filter"
    nonlocal_tokens: str = "time"
    filter_channels: int = 8
    filter_hidden: int = 32
    routing: str = "categorical"

    @classmethod
    def from_config(cls, cfg: Config) -> "NetworkConfig":
        return cls(
            channels=cfg.channels,
            n_dynamic_blocks=cfg.n_dynamic_blocks,
            mask_downsample=cfg.mask_downsample,
            local_attention=cfg.local_attention,
            nonlocal_attention=cfg.nonlocal_attention,
            fusion=cfg.fusion,
            nonlocal_tokens=cfg.nonlocal_tokens,
            filter_channels=cfg.filter_channels,
            filter_hidden=cfg.filter_hidden,
            routing=cfg.routing,
        )

    def validate(self):
        if self.n_dynamic_blocks < 1:
            raise ValueError("need at least one dynamic block")
        if self.fusion == "feature_filter" and not (self.local_attention and self.nonlocal_attention):
            raise ValueError("feature_filter fusion needs both attention paths")


@dataclass
class ForwardTrace:
    features: list  # z_0 .. z_N, each (B, C, T, F')
    s_pred: torch.Tensor  # (B, 2, T, F)
    intermediates: list  # per-block (B, 2, T, F) auxiliary predictions
    actions: list  # per-block Action or None
    flop_count: int = 0

    @property
    def nonlocal_fraction(self) -> float:
        """Mean fraction of units routed non-local across blocks/samples."""
        fracs = [a.nonlocal_fraction.mean().item() for a in self.actions if a is not None]
        return sum(fracs) / len(fracs) if fracs else 0.0


class Encoder(nn.Module):
    def __init__(self, in_channels, channels):
        super().__init__()
        self.blocks = nn.ModuleList(
            [ConvBlock(in_channels if i == 0 else channels, channels, freq_stride=2)
             for i in range(N_ENCODER_BLOCKS)]
        )

    def forward(self, y):
        skips = []
        x = y
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        return x, skips


class Decoder(nn.Module):
    """Mirror of the encoder; consumes skip concatenations, linear output."""

    def __init__(self, channels, out_channels=2):
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                ConvBlock(2 * channels, channels, freq_stride=2, transposed=True),
                ConvBlock(2 * channels, channels, freq_stride=2, transposed=True),
                ConvBlock(2 * channels, out_channels, freq_stride=2, transposed=True, plain=True),
            ]
        )

    def forward(self, z, skips):
        x = z
        for block, skip in zip(self.blocks, reversed(skips)):
            x = block(torch.cat([x, skip], dim=1))
        return x


class DynamicBlock(nn.Module):
    """Shared path + optionally-routed attention branches + fuse conv."""

    def __init__(self, net: NetworkConfig):
        super().__init__()
        c = net.channels
        self.fusion = net.fusion
        self.shared = conv_stack(c, 2)
        self.local = LocalAttention(c) if net.local_attention else None
        self.nonlocal_ = NonLocalAttention(c, tokens=net.nonlocal_tokens) if net.nonlocal_attention else None
        fuse_in = c
        if net.fusion == "concat":
            n_paths = 1 + int(net.local_attention) + int(net.nonlocal_attention)
            fuse_in = n_paths * c
        if net.fusion == "selective":
            self.sel_local = nn.Linear(c, c)
            self.sel_nonlocal = nn.Linear(c, c)
        self.fuse = ConvBlock(fuse_in, c)

    def forward(self, z, m_local=None, m_nonlocal=None):
        s = self.shared(z)
        if self.fusion == "feature_filter":
            acc = s
            if m_local.any():
                acc = acc + self.local(s * m_local.unsqueeze(1))
            if m_nonlocal.any():
                acc = acc + self.nonlocal_(s * m_nonlocal.unsqueeze(1))
            return self.fuse(acc)
        if self.fusion == "concat":
            parts = [branch(s) for branch in (self.local, self.nonlocal_) if branch is not None]
            return self.fuse(torch.cat(parts + [s], dim=1))
        if self.fusion == "selective":
            la, na = self.local(s), self.nonlocal_(s)
            v = (la + na).mean(dim=(2, 3))
            w = torch.softmax(torch.stack([self.sel_local(v), self.sel_nonlocal(v)]), dim=0)
            return self.fuse(la * w[0][:, :, None, None] + na * w[1][:, :, None, None] + s)
        # fusion == "none": any always-on branches, summed with the shared path
        acc = s
        for branch in (self.local, self.nonlocal_):
            if branch is not None:
                acc = acc + branch(s)
        return self.fuse(acc)


class Enhancer(nn.Module):
    """Full enhancement network mapping (B, 2, T, F) -> (B, 2, T, F)."""

    def __init__(self, net: NetworkConfig):
        super().__init__()
        net.validate()
        self.net = net
        self.encoder = Encoder(net.in_channels, net.channels)
        self.blocks = nn.ModuleList([DynamicBlock(net) for _ in range(net.n_dynamic_blocks)])
        self.decoder = Decoder(net.channels, net.in_channels)
        # shared projection head producing per-block auxiliary predictions
        self.inter_head = nn.Conv2d(net.channels, net.in_channels, 1)

    def feature_shape(self, t, f):
        """(T', F') of dynamic-block features for a (t, f) input."""
        for _ in range(N_ENCODER_BLOCKS):
            f = (f - 1) // 2 + 1
        return t, f

    def mask_shape(self, t, f):
        t_feat, f_feat = self.feature_shape(t, f)
        ds = self.net.mask_downsample
        return -(-t_feat // ds), -(-f_feat // ds)

    def forward(self, y, mask_provider=None, need_intermediates=True):
        """Run the network; `mask_provider(i, z)` yields routing per block.

        mask_provider returns (m_local, m_nonlocal, action_or_none) with
        masks of shape (B, T', F'); it is ignored unless fusion is
        feature_filter. Returns a ForwardTrace.
        """
        z, skips = self.encoder(y)
        features = [z]
        intermediates = []
        actions = []
        t_feat, f_feat = z.shape[2], z.shape[3]
        for i, block in enumerate(self.blocks):
            if self.net.fusion == "feature_filter":
                m_local, m_nonlocal, action = mask_provider(i, z)
                if m_local.shape[-2:] != (t_feat, f_feat):
                    raise ValueError(
                        f"mask shape {tuple(m_local.shape[-2:])} does not match features "
                        f"{(t_feat, f_feat)}"
                    )
                z = block(z, m_local, m_nonlocal)
                actions.append(action)
            else:
                z = block(z)
                actions.append(None)
            features.append(z)
            if need_intermediates:
                proj = self.inter_head(z)
                intermediates.append(
                    F.interpolate(proj, size=(y.shape[2], y.shape[3]), mode="nearest")
                )
        s_pred = self.decoder(z, skips)
        if s_pred.shape != y.shape:
            raise ValueError(
                f"decoder produced {tuple(s_pred.shape)} for input {tuple(y.shape)}; "
                "the frequency width must halve to an odd size at each encoder stage "
                "(true for F = frame_len // 2 + 1)"
            )
        flops = count_network_flops(
            self.net,
            t_frames=y.shape[2],
            f_bins=y.shape[3],
            nonlocal_fractions=[
                a.nonlocal_fraction.mean().item() if a is not None else None for a in actions
            ],
            with_filter=any(a is not None for a in actions),
        )
        return ForwardTrace(
            features=features,
            s_pred=s_pred,
            intermediates=intermediates,
            actions=actions,
            flop_count=flops,
        )


def make_mask_provider(
    source,
    enhancer: Enhancer,
    policy: FeatureFilter | None = None,
    mode: str = "sampled",
    generator: torch.Generator | None = None,
    routing: str = "categorical",
):
    """Build the per-block routing callback used by Enhancer.forward.

    source: "random" | "policy" | "all_local" | "all_nonlocal" | list of
    per-block (m_local, m_nonlocal) full-resolution mask pairs.
    """
    if isinstance(source, (list, tuple)):
        fixed = list(source)

        def fixed_provider(i, z):
            m_local, m_nonlocal = fixed[i]
            return m_local, m_nonlocal, None

        return fixed_provider

    if source == "random":
        ds = enhancer.net.mask_downsample

        def random_provider(i, z):
            b, _, t, f = z.shape
            t_low, f_low = -(-t // ds), -(-f // ds)
            act = random_action(b, t_low, f_low, t, f, generator=generator)
            return act.mask[:, 0], act.mask[:, 1], act

        return random_provider

    if source in ("all_local", "all_nonlocal"):
        idx = 0 if source == "all_local" else 1

        def const_provider(i, z):
            b, _, t, f = z.shape
            masks = torch.zeros(b, 2, t, f, device=z.device)
            masks[:, idx] = 1.0
            return masks[:, 0], masks[:, 1], None

        return const_provider

    if source == "policy":
        if policy is None:
            raise ValueError("policy source needs a FeatureFilter")
        state_box = {}

        def policy_provider(i, z):
            if i == 0:
                state_box["state"] = policy.initial_state(z.shape[0], device=z.device)
            # the policy sees the backbone feature but must not feed
            # gradients back into it
            pm, state_box["state"] = policy(z.detach(), state_box["state"])
            act = select_action(pm, z.shape[2], z.shape[3], mode=mode, generator=generator, routing=routing)
            return act.mask[:, 0], act.mask[:, 1], act

        return policy_provider

    raise ValueError(f"unknown mask source: {source!r}")


def count_conv_macs(t, f_out, c_in, c_out, kernel=3) -> int:
    """Multiply-accumulates of one conv layer at output size t x f_out."""
    return int(t) * int(f_out) * int(c_in) * int(c_out) * int(kernel) * int(kernel)


def _freq_chain(f_bins):
    fs = []
    f = f_bins
    for _ in range(N_ENCODER_BLOCKS):
        f = (f - 1) // 2 + 1
        fs.append(f)
    return fs


def count_network_flops(
    net: NetworkConfig,
    t_frames: int,
    f_bins: int,
    nonlocal_fractions=None,
    with_filter: bool = False,
) -> int:
    """Analytic MAC count for one forward pass at batch size 1.

    Counts convolutions and attention matmuls of executed paths only:
    branch costs scale with the fraction of units routed to them, and the
    non-local token count scales with its routed fraction (quadratic
    cost). Normalizations and activations are excluded.
    """
    c = net.channels
    t = t_frames
    f_chain = _freq_chain(f_bins)
    f_feat = f_chain[-1]

    total = 0.0
    # encoder
    c_in = net.in_channels
    for f_out in f_chain:
        total += count_conv_macs(t, f_out, c_in, c)
        c_in = c

    if nonlocal_fractions is None:
        nonlocal_fractions = [None] * net.n_dynamic_blocks

    for rho in nonlocal_fractions:
        total += dynamic_block_flops(net, t, f_feat, rho)
        if with_filter:
            total += filter_flops(net, t, f_feat)

    # intermediate projection heads (1x1)
    total += net.n_dynamic_blocks * count_conv_macs(t, f_feat, c, net.in_channels, kernel=1)

    # decoder mirrors the encoder with concatenated (2c) inputs
    dec_f = list(reversed([f_bins] + f_chain[:-1]))  # output widths per stage
    c_in = 2 * c
    for i, f_out in enumerate(dec_f):
        c_out = net.in_channels if i == len(dec_f) - 1 else c
        total += count_conv_macs(t, f_out, c_in, c_out)
        c_in = 2 * c
    return int(round(total))


def dynamic_block_flops(net: NetworkConfig, t, f_feat, nonlocal_fraction=None) -> float:
    """MACs of one dynamic block given the fraction routed non-local."""
    c = net.channels
    shared = 2 * count_conv_macs(t, f_feat, c, c)
    fuse_in = c
    if net.fusion == "concat":
        fuse_in = (1 + int(net.local_attention) + int(net.nonlocal_attention)) * c
    fuse = count_conv_macs(t, f_feat, fuse_in, c)

    local = local_attention_flops(net, t, f_feat) if net.local_attention else 0.0
    nonloc = nonlocal_attention_flops(net, t, f_feat) if net.nonlocal_attention else 0.0

    if net.fusion == "feature_filter":
        rho_n = 0.5 if nonlocal_fraction is None else float(nonlocal_fraction)
        rho_l = 1.0 - rho_n
        local *= rho_l
        nonloc_conv, nonloc_mm = nonloc
        nonloc = rho_n * nonloc_conv + rho_n * rho_n * nonloc_mm
    else:
        if net.nonlocal_attention:
            nonloc = nonloc[0] + nonloc[1]
        if net.fusion == "selective":
            fuse += 2 * c * c  # fusion FC heads
    return shared + local + nonloc + fuse


def local_attention_flops(net: NetworkConfig, t, f_feat) -> float:
    c = net.channels
    convs = (2 + 4) * count_conv_macs(t, f_feat, c, c)  # two branches
    gate = count_conv_macs(t, f_feat, c, c)
    fcs = 2 * c * c
    return convs + gate + fcs


def nonlocal_attention_flops(net: NetworkConfig, t, f_feat):
    """(embedding conv MACs, attention matmul MACs) for full occupancy."""
    c = net.channels
    convs = 4 * count_conv_macs(t, f_feat, c, c, kernel=1)  # Q, K, V, out
    n_tokens = t if net.nonlocal_tokens == "time" else f_feat
    dim = c * (f_feat if net.nonlocal_tokens == "time" else t)
    matmuls = 2 * n_tokens * n_tokens * dim  # Q K^T and A V
    return float(convs), float(matmuls)


def filter_flops(net: NetworkConfig, t, f_feat) -> float:
    cf, h = net.filter_channels, net.filter_hidden
    ds = net.mask_downsample
    total = 0.0
    c_in, tt, ff = net.channels, t, f_feat
    n_strided = {1: 0, 2: 1, 4: 2, 8: 3}[ds]
    for i in range(3):
        if i < n_strided:
            tt, ff = (tt - 1) // 2 + 1, (ff - 1) // 2 + 1
        total += count_conv_macs(tt, ff, c_in, cf)
        c_in = cf
    total += 4 * (cf * h + h * h) + 4 * (h * h + h * h)  # two LSTM cells
    total += h * cf  # context projection
    total += tt * 2 * cf * 3 + ff * 2 * cf * 3  # 1-D factor heads
    return total
