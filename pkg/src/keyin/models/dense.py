"""Frame-by-frame stochastic predictor with a fixed unit-Gaussian prior.

Used by the surprise baseline: the per-step KL between the inferred
posterior and the prior peaks where the sequence becomes unpredictable.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .. import relax
from .config import ModelConfig
from .networks import FrameDecoder, FrameEncoder, ProjLSTM, kl_gaussian


@dataclass
class DenseRollout:
    frames: torch.Tensor  # [B, T, H, W, C]
    mu: torch.Tensor  # [B, T, Z]
    sigma: torch.Tensor
    kl: torch.Tensor  # [B, T]


class DenseStochasticPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig, beta: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.beta = beta
        E, Z, H, L = cfg.embed_dim, cfg.latent_dim, cfg.hidden_dim, cfg.lstm_layers
        self.encoder = FrameEncoder(cfg.image_size, cfg.channels, E, cfg.enc_layers, cfg.base_channels)
        self.decoder = FrameDecoder(cfg.image_size, cfg.channels, E, cfg.enc_layers, cfg.base_channels)
        self.posterior = ProjLSTM(E, 2 * Z, H, L)
        self.predictor = ProjLSTM(E + Z, E, H, L)

    def forward(self, cond, sequence=None, z=None, eps=None) -> DenseRollout:
        """Predict ``T`` frames after ``cond [B, C, ...]``.

        With ``sequence [B, T, ...]`` the latents come from the posterior
        (teacher forcing on ground-truth embeddings); otherwise ``z [B, T, Z]``
        are prior samples and the rollout feeds back its own frames.
        """
        cfg = self.cfg
        B, C = cond.shape[:2]
        Z = cfg.latent_dim
        cond_emb = self.encoder(cond)
        if sequence is not None:
            seq_emb = self.encoder(sequence)
            T = sequence.shape[1]
            all_emb = torch.cat([cond_emb, seq_emb], 1)
            post, _ = self.posterior(all_emb)
            mu, raw = post[:, C:].split([Z, Z], -1)
            sigma = F.softplus(raw) + 1e-4
            zs = mu if eps is None else mu + sigma * eps
            # predictor sees frame t-1 (ground truth) and z_t; warm up on the conditioning frames
            zero = cond_emb.new_zeros(B, C - 1, Z)
            inputs = torch.cat([all_emb[:, :-1], torch.cat([zero, zs], 1)], -1)
            out, _ = self.predictor(inputs)
            frames = self.decoder(out[:, C - 1 :])
            return DenseRollout(frames, mu, sigma, kl_gaussian(mu, sigma))
        if z is None:
            raise ValueError("prior rollout needs latents z [B, T, Z]")
        T = z.shape[1]
        zero = cond_emb.new_zeros(B, C - 1, Z)
        state = None
        if C > 1:
            _, state = self.predictor(torch.cat([cond_emb[:, :-1], zero], -1))
        prev = cond_emb[:, -1]
        embs = []
        for t in range(T):
            out, state = self.predictor.step(torch.cat([prev, z[:, t]], -1), state)
            embs.append(out)
            prev = self.encoder(self.decoder(out))
        frames = self.decoder(torch.stack(embs, 1))
        mu = torch.zeros_like(z)
        return DenseRollout(frames, mu, torch.ones_like(z), z.new_zeros(B, T))

    def loss(self, cond, sequence, eps=None) -> dict[str, torch.Tensor]:
        out = self(cond, sequence, eps=eps)
        rec = relax.reconstruction(out.frames, sequence, self.cfg.recon, start_dim=2).sum(1)
        kl = out.kl.sum(1)
        total = (rec + self.beta * kl).mean()
        return {"total": total, "recon": rec.mean(), "kl": kl.mean()}

    @torch.no_grad()
    def surprise(self, cond, sequence) -> torch.Tensor:
        """Per-step KL ``[B, T]`` of the posterior mean pass."""
        return self(cond, sequence).kl
