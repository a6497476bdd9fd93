"""Building blocks shared by the keyframe model and the dense predictor."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


def kl_gaussian(mu_q: torch.Tensor, sigma_q: torch.Tensor, mu_p=0.0, sigma_p=1.0) -> torch.Tensor:
    """KL(N(mu_q, sigma_q) || N(mu_p, sigma_p)) for diagonal Gaussians, summed over the last dim."""
    if torch.any(sigma_q <= 0):
        raise ValueError("posterior scale must be positive")
    sigma_p = torch.as_tensor(sigma_p, dtype=sigma_q.dtype)
    if torch.any(sigma_p <= 0):
        raise ValueError("prior scale must be positive")
    kl = torch.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2 * sigma_p**2) - 0.5
    return kl.sum(-1)


class FrameEncoder(nn.Module):
    """Stride-2 conv stack down to 4x4, then a linear embedding."""

    def __init__(self, image_size: int, channels: int, embed_dim: int, layers: int, base: int):
        super().__init__()
        convs = []
        c_in = channels
        for i in range(layers):
            c_out = base * 2**i
            convs += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.GroupNorm(min(8, c_out), c_out), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.convs = nn.Sequential(*convs)
        self.fc = nn.Linear(c_in * 16, embed_dim)
        self.image_size = image_size
        self.channels = channels

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        lead = frames.shape[:-3]
        if tuple(frames.shape[-3:]) != (self.image_size, self.image_size, self.channels):
            raise ValueError(f"expected frames [..., {self.image_size}, {self.image_size}, {self.channels}], "
                             f"got {tuple(frames.shape)}")
        x = frames.reshape(-1, *frames.shape[-3:]).permute(0, 3, 1, 2)
        h = self.convs(x).flatten(1)
        return self.fc(h).reshape(*lead, -1)


class FrameDecoder(nn.Module):
    def __init__(self, image_size: int, channels: int, embed_dim: int, layers: int, base: int):
        super().__init__()
        self.top = base * 2 ** (layers - 1)
        self.fc = nn.Linear(embed_dim, self.top * 16)
        deconvs = []
        c_in = self.top
        for i in reversed(range(layers)):
            last = i == 0
            c_out = channels if last else base * 2 ** (i - 1)
            deconvs.append(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1))
            if not last:
                deconvs += [nn.GroupNorm(min(8, c_out), c_out), nn.LeakyReLU(0.2)]
            c_in = c_out
        self.deconvs = nn.Sequential(*deconvs)
        self.embed_dim = embed_dim

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        lead = emb.shape[:-1]
        if emb.shape[-1] != self.embed_dim:
            raise ValueError(f"expected embeddings of size {self.embed_dim}, got {emb.shape[-1]}")
        h = F.leaky_relu(self.fc(emb.reshape(-1, self.embed_dim)), 0.2).reshape(-1, self.top, 4, 4)
        x = torch.sigmoid(self.deconvs(h)).permute(0, 2, 3, 1)
        return x.reshape(*lead, *x.shape[1:])


class ProjLSTM(nn.Module):
    """Linear -> stacked LSTM -> linear, usable over a whole sequence or one step at a time."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, layers: int, bidirectional: bool = False):
        super().__init__()
        self.inp = nn.Linear(in_dim, hidden)
        self.lstm = nn.LSTM(hidden, hidden, layers, batch_first=True, bidirectional=bidirectional)
        self.out = nn.Linear(hidden * (2 if bidirectional else 1), out_dim)
        self.hidden = hidden
        self.layers = layers

    def forward(self, x: torch.Tensor, state=None):
        """``x`` is ``[B, L, in]``; returns ``([B, L, out], state)``."""
        h, state = self.lstm(self.inp(x), state)
        return self.out(h), state

    def step(self, x: torch.Tensor, state=None):
        y, state = self.forward(x.unsqueeze(1), state)
        return y.squeeze(1), state


class StateInit(nn.Module):
    """MLP producing an initial (h, c) LSTM state."""

    def __init__(self, in_dim: int, hidden: int, layers: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 2 * layers * hidden))
        self.hidden = hidden
        self.layers = layers

    def forward(self, x: torch.Tensor):
        hc = self.net(x).reshape(x.shape[0], 2, self.layers, self.hidden).permute(1, 2, 0, 3)
        return torch.tanh(hc[0]).contiguous(), hc[1].contiguous()
