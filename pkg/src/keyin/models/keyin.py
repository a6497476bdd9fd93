"""The keyframe predictor / sequence inpainter model and its training objectives."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .. import relax
from .config import ModelConfig
from .networks import FrameDecoder, FrameEncoder, ProjLSTM, StateInit, kl_gaussian

ATTENTION_CLAMP = 50.0


@dataclass
class KeyframePrediction:
    embeddings: torch.Tensor  # [B, N, E]
    delta_logits: torch.Tensor  # [B, N, J]
    z: torch.Tensor  # [B, N, Z]
    mu: torch.Tensor
    sigma: torch.Tensor
    kl: torch.Tensor  # [B, N]
    delta: torch.Tensor  # [B, N, J] offset distribution actually used
    images: torch.Tensor | None = None  # [B, N, H, W, C]
    attention: torch.Tensor | None = None  # [B, N, T]


class Inpainter(nn.Module):
    """Recurrent generator of the J frames following a keyframe.

    The initial LSTM state is an MLP of both keyframe embeddings, the offset
    vector and a per-segment latent.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        E, J, Zi = cfg.embed_dim, cfg.J, cfg.inpaint_latent_dim
        self.J = J
        self.latent_dim = Zi
        self.init = StateInit(2 * E + J + Zi, cfg.hidden_dim, cfg.lstm_layers)
        self.lstm = ProjLSTM(2 * E, E, cfg.hidden_dim, cfg.lstm_layers)
        self.posterior = nn.Sequential(nn.Linear(3 * E + J, cfg.hidden_dim), nn.LeakyReLU(0.2),
                                       nn.Linear(cfg.hidden_dim, 2 * Zi))

    def infer(self, k_a, k_b, dvec, segment_mean):
        out = self.posterior(torch.cat([k_a, k_b, dvec, segment_mean], -1))
        mu, raw = out.chunk(2, -1)
        return mu, F.softplus(raw) + 1e-4

    def forward(self, k_a: torch.Tensor, k_b: torch.Tensor, dvec: torch.Tensor, z: torch.Tensor | None = None):
        lead = k_a.shape[:-1]
        E = k_a.shape[-1]
        a, b = k_a.reshape(-1, E), k_b.reshape(-1, E)
        d = dvec.reshape(-1, self.J)
        if z is None:
            z = a.new_zeros(a.shape[0], self.latent_dim)
        else:
            z = z.reshape(-1, self.latent_dim)
        state = self.init(torch.cat([a, b, d, z], -1))
        prev = a
        outs = []
        for _ in range(self.J):
            prev, state = self.lstm.step(torch.cat([prev, b], -1), state)
            outs.append(prev)
        return torch.stack(outs, 1).reshape(*lead, self.J, E)


class KeyInModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        E, Z, J, H, L = cfg.embed_dim, cfg.latent_dim, cfg.J, cfg.hidden_dim, cfg.lstm_layers
        self.encoder = FrameEncoder(cfg.image_size, cfg.channels, E, cfg.enc_layers, cfg.base_channels)
        self.decoder = FrameDecoder(cfg.image_size, cfg.channels, E, cfg.enc_layers, cfg.base_channels)
        self.cond_lstm = ProjLSTM(E, E, H, L)
        self.key_lstm = ProjLSTM(E + Z, E + J, H, L)
        self.inf_lstm = ProjLSTM(2 * E if cfg.inference_differences else E, E + 2 * Z, H, L, bidirectional=True)
        self.inpainter = Inpainter(cfg)

    # ------------------------------------------------------------ components

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames)

    def decode(self, emb: torch.Tensor) -> torch.Tensor:
        return self.decoder(emb)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "keyframe_lstm": list(self.cond_lstm.parameters()) + list(self.key_lstm.lstm.parameters())
            + list(self.key_lstm.inp.parameters()),
            "keyframe_head": list(self.key_lstm.out.parameters()),
            "inference": list(self.inf_lstm.parameters()),
            "inpainter": list(self.inpainter.parameters()),
        }

    def offset_distribution(self, logits: torch.Tensor) -> torch.Tensor:
        if self.cfg.fixed_offset is not None:
            onehot = torch.zeros_like(logits)
            onehot[..., self.cfg.fixed_offset - 1] = 1.0
            return onehot
        return torch.softmax(logits, -1)

    def inference_outputs(self, cond_emb: torch.Tensor, target_emb: torch.Tensor):
        """Run the inference LSTM over conditioning + target embeddings.

        Returns attention keys ``[B, T, E]`` and per-step Gaussian values
        ``(mu, sigma)`` each ``[B, T, Z]``; scales go through a softplus before
        being attended over.
        """
        C, E, Z = cond_emb.shape[1], self.cfg.embed_dim, self.cfg.latent_dim
        seq = torch.cat([cond_emb, target_emb], 1)
        if self.cfg.inference_differences:
            seq = torch.cat([seq, torch.diff(seq, dim=1, prepend=seq[:, :1])], -1)
        out, _ = self.inf_lstm(seq)
        out = out[:, C:]
        keys, mu, raw = out.split([E, Z, Z], -1)
        return keys, mu, F.softplus(raw) + 1e-4

    @staticmethod
    def attend(query: torch.Tensor, keys: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor):
        """Key-value attention with an unscaled inner-product score."""
        scores = torch.einsum("be,bte->bt", query, keys).clamp(-ATTENTION_CLAMP, ATTENTION_CLAMP)
        a = torch.exp(scores - scores.max(-1, keepdim=True).values)
        w = a / a.sum(-1, keepdim=True)
        return torch.einsum("bt,btz->bz", w, mu), torch.einsum("bt,btz->bz", w, sigma), w

    def infer_posterior(self, frames, cond_frames, prev_keyframe_emb):
        """Posterior ``(mu, sigma)`` ``[B, N, Z]`` for given previous-keyframe queries ``[B, N, E]``."""
        keys, mu_t, sig_t = self.inference_outputs(self.encode(cond_frames), self.encode(frames))
        outs = [self.attend(prev_keyframe_emb[:, n], keys, mu_t, sig_t) for n in range(prev_keyframe_emb.shape[1])]
        return torch.stack([o[0] for o in outs], 1), torch.stack([o[1] for o in outs], 1)

    def rollout(
        self,
        cond_emb: torch.Tensor,
        target_emb: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
        eps: torch.Tensor | None = None,
        decode_images: bool = True,
    ) -> KeyframePrediction:
        """Autoregressive keyframe generation.

        With ``target_emb`` the latents come from the attention posterior
        (``z = mu + sigma * eps``, or ``mu`` when ``eps`` is None); otherwise
        ``z`` must hold ``N`` prior samples.
        """
        cfg = self.cfg
        B, N, E = cond_emb.shape[0], cfg.N, cfg.embed_dim
        posterior = target_emb is not None
        if not posterior:
            if z is None or z.shape[:2] != (B, N):
                raise ValueError(f"expected {N} latents per sequence, got {None if z is None else tuple(z.shape)}")
        else:
            keys, mu_t, sig_t = self.inference_outputs(cond_emb, target_emb)
        _, state = self.cond_lstm(cond_emb)
        prev = cond_emb[:, -1]
        embs, logits, zs, mus, sigs, kls, atts = [], [], [], [], [], [], []
        for n in range(N):
            if posterior:
                mu, sig, w = self.attend(prev, keys, mu_t, sig_t)
                z_n = mu if eps is None else mu + sig * eps[:, n]
                kl = kl_gaussian(mu, sig)
                atts.append(w)
            else:
                z_n = z[:, n]
                mu, sig = torch.zeros_like(z_n), torch.ones_like(z_n)
                kl = z_n.new_zeros(B)
            out, state = self.key_lstm.step(torch.cat([prev, z_n], -1), state)
            prev = out[:, :E]
            embs.append(prev)
            logits.append(out[:, E:])
            zs.append(z_n)
            mus.append(mu)
            sigs.append(sig)
            kls.append(kl)
        embeddings = torch.stack(embs, 1)
        delta_logits = torch.stack(logits, 1)
        return KeyframePrediction(
            embeddings=embeddings,
            delta_logits=delta_logits,
            z=torch.stack(zs, 1),
            mu=torch.stack(mus, 1),
            sigma=torch.stack(sigs, 1),
            kl=torch.stack(kls, 1),
            delta=self.offset_distribution(delta_logits),
            images=self.decode(embeddings) if decode_images else None,
            attention=torch.stack(atts, 1) if atts else None,
        )

    def predict_keyframes(self, cond_frames, z=None, target_frames=None, eps=None) -> KeyframePrediction:
        if cond_frames.shape[1] != self.cfg.C:
            raise ValueError(f"expected {self.cfg.C} conditioning frames, got {cond_frames.shape[1]}")
        cond_emb = self.encode(cond_frames)
        target_emb = None if target_frames is None else self.encode(target_frames)
        return self.rollout(cond_emb, target_emb, z=z, eps=eps)

    def inpaint(self, k_a, k_b, delta, z=None):
        """J frames after ``k_a`` towards ``k_b``.

        ``delta`` is an integer offset (broadcast) or an offset vector ``[..., J]``.
        Returns ``(frames [..., J, H, W, C], embeddings [..., J, E])``.
        """
        J = self.cfg.J
        if not torch.is_tensor(delta) or delta.dim() == 0 or delta.shape[-1] != J or delta.dtype in (torch.int32, torch.int64):
            d = torch.as_tensor(delta)
            if torch.any(d < 1) or torch.any(d > J):
                raise ValueError(f"offset must lie in [1, {J}], got {d.tolist()}")
            delta = F.one_hot(d.long() - 1, J).to(k_a.dtype).expand(*k_a.shape[:-1], J)
        emb = self.inpainter(k_a, k_b, delta, z)
        return self.decode(emb), emb

    # ------------------------------------------------------------ objectives

    def inpainter_loss(self, starts, ends, between, offsets, eps=None) -> dict[str, torch.Tensor]:
        """Stage-1 objective on ground-truth segments.

        ``between[:, j-1]`` is the frame ``j`` steps after ``starts`` (zero
        padded past each offset, with ``between[:, o-1] == ends``).
        """
        cfg = self.cfg
        J = cfg.J
        k_a, k_b = self.encode(starts), self.encode(ends)
        tgt = self.encode(between)
        mask = (torch.arange(1, J + 1, device=offsets.device)[None] <= offsets[:, None]).to(k_a.dtype)
        dvec = F.one_hot(offsets.long() - 1, J).to(k_a.dtype)
        seg_mean = (tgt * mask[..., None]).sum(1) / offsets[:, None].to(k_a.dtype)
        mu, sig = self.inpainter.infer(k_a, k_b, dvec, seg_mean)
        z = mu if eps is None else mu + sig * eps
        frames = self.decode(self.inpainter(k_a, k_b, dvec, z))
        rec = (relax.reconstruction(frames, between, cfg.recon, start_dim=2) * mask).sum(1)
        ae = relax.reconstruction(self.decode(torch.stack([k_a, k_b], 1)), torch.stack([starts, ends], 1),
                                  cfg.recon, start_dim=2).sum(1)
        kl = kl_gaussian(mu, sig)
        total = rec + ae + cfg.beta_inpaint * kl
        out = {"inpaint_recon": rec.mean(), "autoencode": ae.mean(), "kl": kl.mean()}
        if cfg.inpaint_mean_weight > 0:
            # stage 2 runs the inpainter at the prior mean, so that input has to be trained too
            mean_frames = self.decode(self.inpainter(k_a, k_b, dvec))
            rec_mean = (relax.reconstruction(mean_frames, between, cfg.recon, start_dim=2) * mask).sum(1)
            total = total + cfg.inpaint_mean_weight * rec_mean
            out["inpaint_mean_recon"] = rec_mean.mean()
        return {"total": total.mean(), **out}

    def keyframe_objective(self, cond, targets, eps=None) -> dict[str, torch.Tensor]:
        """Stage-2 relaxed objective for ``cond [B, C, ...]`` and ``targets [B, T, ...]``."""
        cfg = self.cfg
        T = targets.shape[1]
        if T != cfg.T:
            raise ValueError(f"expected {cfg.T} target frames, got {T}")
        cond_emb, tgt_emb = self.encode(cond), self.encode(targets)
        pred = self.rollout(cond_emb, tgt_emb, eps=eps, decode_images=cfg.beta_K > 0)
        delta = pred.delta
        P = relax.compose_placements(delta, T)
        if cfg.beta_K > 0:
            K_t, _ = relax.soft_keyframe_targets(P, targets)
            K_hat = pred.images
        else:
            K_t = K_hat = pred.embeddings.new_zeros(pred.embeddings.shape[:2] + (1,))
        key = relax.keyframe_loss(K_hat, K_t, pred.kl, P.c, cfg.beta, cfg.recon, recon_weight=cfg.beta_K)
        kappa_t, _ = relax.soft_keyframe_targets(P, tgt_emb.detach())
        emb_rec = relax.reconstruction(pred.embeddings, kappa_t, cfg.embed_recon, start_dim=2)
        emb_term = relax.weighted_keyframe_mean(emb_rec, P.c)
        prev = torch.cat([cond_emb[:, -1:], pred.embeddings[:, :-1]], 1)
        frames, _ = self.inpaint(prev, pred.embeddings, delta)
        m = relax.placement_matrix(delta, P, T)
        soft = relax.compose_soft_sequence(m, frames)
        seq = relax.sequence_loss(targets, soft, cfg.recon)
        total = relax.total_loss(key, targets, soft, cfg.beta_I, cfg.beta_kappa, emb_term, cfg.recon)
        entropy = -(delta * torch.log(delta.clamp_min(1e-12))).sum(-1).mean()
        return {
            "total": total,
            "keyframe": key,
            "sequence": seq,
            "embedding": emb_term,
            "kl": pred.kl.mean(),
            "mean_c": P.c.mean(),
            "delta_entropy": entropy,
        }

    # ------------------------------------------------------------ generation

    def decode_offsets(self, delta: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.cfg.offset_decoding == "sample" and generator is not None:
            flat = delta.reshape(-1, delta.shape[-1])
            return (torch.multinomial(flat, 1, generator=generator).reshape(delta.shape[:-1]) + 1)
        return delta.argmax(-1) + 1

    @torch.no_grad()
    def generate(self, cond_frames, z):
        """Keyframes plus the inpainted sequence for hard (decoded) offsets.

        Returns ``(prediction, sequence [B, <=T, ...], times [B, N])``; the
        sequence holds frames ``1..T`` assembled segment by segment.
        """
        pred = self.predict_keyframes(cond_frames, z=z)
        offsets = self.decode_offsets(pred.delta)
        cond_emb = self.encode(cond_frames[:, -1:])
        prev = torch.cat([cond_emb, pred.embeddings[:, :-1]], 1)
        frames, _ = self.inpaint(prev, pred.embeddings, offsets)
        B, T = frames.shape[0], self.cfg.T
        seq = frames.new_zeros(B, T, *frames.shape[3:])
        for b in range(B):
            t = 0
            for n in range(self.cfg.N):
                o = int(offsets[b, n])
                take = min(o, T - t)
                if take <= 0:
                    break
                seq[b, t : t + take] = frames[b, n, :take]
                t += o
        return pred, seq, torch.cumsum(offsets, -1)
