"""Network building blocks: conv blocks, local and non-local attention.

Feature maps are (B, C, T, F) tensors. Every block preserves the input
shape unless constructed with a stride, and every block is traceable by
autograd so gradients can be checked against finite differences.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ConvBlock(nn.Module):
    """Conv2d (or ConvTranspose2d) -> BatchNorm2d -> ELU.

    Strides apply to the frequency axis only, so policy masks stay
    aligned with time frames. `plain=True` drops BN and ELU for a linear
    output layer.
    """

    def __init__(self, in_ch, out_ch, kernel=3, freq_stride=1, transposed=False, plain=False):
        super().__init__()
        pad = kernel // 2
        if transposed:
            self.conv = nn.ConvTranspose2d(
                in_ch, out_ch, kernel, stride=(1, freq_stride), padding=pad
            )
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=(1, freq_stride), padding=pad)
        self.plain = plain
        if not plain:
            self.bn = nn.BatchNorm2d(out_ch, eps=1e-5)

    def forward(self, x):
        x = self.conv(x)
        if self.plain:
            return x
        return F.elu(self.bn(x))


def conv_stack(channels, n_layers, kernel=3):
    return nn.Sequential(*[ConvBlock(channels, channels, kernel) for _ in range(n_layers)])


class LocalAttention(nn.Module):
    """Channel-recalibrating attention over two receptive-field branches.

    Branches of two and four conv blocks produce C2 and C4; a global
    average over their sum drives two sigmoid-gated fully-connected heads
    that reweight the branches per channel; a final sigmoid conv gates the
    input, which is added back residually. With the gate conv at zero the
    block is exactly 1.5 * identity.
    """

    def __init__(self, channels):
        super().__init__()
        self.branch2 = conv_stack(channels, 2)
        self.branch4 = conv_stack(channels, 4)
        self.fc2 = nn.Linear(channels, channels)
        self.fc4 = nn.Linear(channels, channels)
        self.gate = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        c2 = self.branch2(x)
        c4 = self.branch4(x)
        v = (c2 + c4).mean(dim=(2, 3))  # (B, C) global pooling of the fused branches
        w2 = torch.sigmoid(self.fc2(v))[:, :, None, None]
        w4 = torch.sigmoid(self.fc4(v))[:, :, None, None]
        s = c2 * w2 + c4 * w4
        return torch.sigmoid(self.gate(s)) * x + x


class NonLocalAttention(nn.Module):
    """Self-similarity attention across all time frames (or all bins).

    1x1 convolutions embed the input into query/key/value; attention is
    softmax(Q K^T) over tokens, where a token is one time frame with
    feature dimension C*F (``tokens="time"``, quadratic in T) or one
    frequency bin with dimension C*T (``tokens="freq"``). The value and
    output embeddings carry no bias, so a zero input yields exactly zero:
    a branch whose mask is all-zero can be skipped outright.
    """

    def __init__(self, channels, tokens="time"):
        super().__init__()
        if tokens not in ("time", "freq"):
            raise ValueError(f"tokens must be 'time' or 'freq', got {tokens!r}")
        self.tokens = tokens
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1, bias=False)
        self.out = nn.Conv2d(channels, channels, 1, bias=False)

    def _to_tokens(self, x):
        b, c, t, f = x.shape
        if self.tokens == "time":
            return x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        return x.permute(0, 3, 1, 2).reshape(b, f, c * t)

    def _from_tokens(self, w, shape):
        b, c, t, f = shape
        if self.tokens == "time":
            return w.reshape(b, t, c, f).permute(0, 2, 1, 3)
        return w.reshape(b, f, c, t).permute(0, 2, 3, 1)

    def forward(self, x, return_attention=False):
        q = self._to_tokens(self.query(x))
        k = self._to_tokens(self.key(x))
        v = self._to_tokens(self.value(x))
        att = torch.softmax(q @ k.transpose(1, 2), dim=-1)
        w = self._from_tokens(att @ v, x.shape)
        j = self.out(w) + x
        if return_attention:
            return j, att
        return j


class RecurrentCell(nn.Module):
    """Single LSTM cell: (x, (h, c)) -> (h', (h', c'))."""

    def __init__(self, input_size, hidden_size):
        super().__init__()
        self.cell = nn.LSTMCell(input_size, hidden_size)
        self.hidden_size = hidden_size

    def initial_state(self, batch, dtype=torch.float32, device=None):
        z = torch.zeros(batch, self.hidden_size, dtype=dtype, device=device)
        return z, z.clone()

    def forward(self, x, state):
        h, c = self.cell(x, state)
        return h, (h, c)
