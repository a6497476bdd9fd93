"""Continuous relaxation of keyframe placement.

Keyframe times are parametrized by per-segment offset distributions
``delta`` of shape ``[..., N, J]`` where ``delta[..., n, j-1]`` is the
probability that keyframe ``n`` lies ``j`` steps after keyframe ``n-1``.
Time ``t = 0`` is the last conditioning frame; ground-truth targets live at
``t = 1..T``.

All functions are pure and differentiable in torch; leading batch dimensions
are carried through.  ``brute_force_targets`` is an independent numpy
enumeration used as a test oracle.
"""
from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np
import torch

EPS = 1e-6
RECON_KINDS = ("bce", "l1", "l2")


class Placements(NamedTuple):
    tau: torch.Tensor  # [..., N, N*J], probability of keyframe n at t = 1..N*J
    c: torch.Tensor  # [..., N], in-horizon mass
    tau_full: torch.Tensor  # [..., N+1, N*J+1], includes the point mass tau^0 and t = 0


class SoftSequence(NamedTuple):
    frames: torch.Tensor  # [..., T, *F]
    coverage: torch.Tensor  # [..., T]
    valid: torch.Tensor  # [..., T] bool


def check_offset_dist(delta: torch.Tensor, atol: float = 1e-6) -> None:
    if delta.dim() < 2:
        raise ValueError(f"offset distributions need shape [..., N, J], got {tuple(delta.shape)}")
    if torch.any(delta < 0):
        raise ValueError("offset distribution has negative entries")
    err = (delta.sum(-1) - 1).abs().max().item()
    if err > atol:
        raise ValueError(f"offset distribution rows must sum to 1 (max deviation {err:.2e})")


def compose_placements(delta: torch.Tensor, T: int) -> Placements:
    """Convolve offset distributions into absolute keyframe placements.

    ``tau^n_t = sum_j tau^{n-1}_{t-j} delta^n_j`` with ``tau^0`` a point mass
    at ``t = 0``, and ``c^n = sum_{t <= T} tau^n_t``.
    """
    check_offset_dist(delta)
    N, J = delta.shape[-2], delta.shape[-1]
    L = N * J
    if T > L:
        raise ValueError(f"horizon T={T} exceeds maximal sequence length N*J={L}")
    if T < 1:
        raise ValueError("horizon must be positive")
    batch = delta.shape[:-2]
    prev = delta.new_zeros(*batch, L + 1)
    prev[..., 0] = 1.0
    rows = [prev]
    for n in range(N):
        cur = delta.new_zeros(*batch, L + 1)
        for j in range(1, J + 1):
            cur = cur + torch.nn.functional.pad(prev[..., : L + 1 - j], (j, 0)) * delta[..., n, j - 1 : j]
        rows.append(cur)
        prev = cur
    tau_full = torch.stack(rows, dim=-2)
    tau = tau_full[..., 1:, 1:]
    c = tau[..., :T].sum(-1)
    return Placements(tau=tau, c=c, tau_full=tau_full)


def segment_survival(delta: torch.Tensor) -> torch.Tensor:
    """``e_j = P(offset >= j)``: the chance frame ``j`` of a segment exists."""
    return torch.flip(torch.cumsum(torch.flip(delta, (-1,)), -1), (-1,))


def frame_placement(tau_prev: torch.Tensor, e: torch.Tensor, T: int) -> torch.Tensor:
    """Unnormalized ``m_{j,t} = tau^{n-1}_{t-j} e_j`` for ``t = 1..T``.

    ``tau_prev`` is indexed from ``t = 0`` (shape ``[..., L+1]``).  Returns
    ``[..., J, T]``; mass landing beyond ``T`` is dropped.
    """
    J = e.shape[-1]
    if tau_prev.shape[:-1] != e.shape[:-1]:
        raise ValueError(f"batch shapes differ: {tuple(tau_prev.shape)} vs {tuple(e.shape)}")
    # padded[k + J] == tau_prev[k]; zero outside 0..L
    padded = torch.nn.functional.pad(tau_prev, (J, T))
    cols = [padded[..., J - j + 1 : J - j + 1 + T] for j in range(1, J + 1)]
    return torch.stack(cols, dim=-2) * e.unsqueeze(-1)


def placement_matrix(delta: torch.Tensor, placements: Placements, T: int) -> torch.Tensor:
    """Per-frame placement ``m`` of shape ``[..., N, J, T]``."""
    e = segment_survival(delta)
    return frame_placement(placements.tau_full[..., :-1, :], e, T)


def soft_keyframe_targets(
    placements: Placements, frames: torch.Tensor, eps: float = EPS
) -> tuple[torch.Tensor, torch.Tensor]:
    """In-horizon expectation of ground-truth frames under each placement.

    Returns ``(targets [..., N, *F], usable [..., N])``.  Targets of keyframes
    with ``c <= eps`` are zero and flagged unusable.
    """
    nb = placements.c.dim() - 1
    T = frames.shape[nb]
    feat = frames.shape[nb + 1 :]
    w = placements.tau[..., :T]
    flat = frames.reshape(*frames.shape[: nb + 1], -1)
    weighted = torch.matmul(w, flat)
    usable = placements.c > eps
    denom = torch.where(usable, placements.c, torch.ones_like(placements.c))
    targets = torch.where(usable.unsqueeze(-1), weighted / denom.unsqueeze(-1), torch.zeros_like(weighted))
    return targets.reshape(*targets.shape[:-1], *feat), usable


def compose_soft_sequence(m: torch.Tensor, predicted: torch.Tensor, eps: float = EPS) -> SoftSequence:
    """Coverage-normalized expectation of inpainted frames at every target time.

    ``m``: ``[..., N, J, T]``; ``predicted``: ``[..., N, J, *F]``.
    """
    nb = m.dim() - 3
    if predicted.shape[: nb + 2] != m.shape[:-1]:
        raise ValueError(f"placement {tuple(m.shape)} and predictions {tuple(predicted.shape)} disagree on N, J")
    feat = predicted.shape[nb + 2 :]
    flat = predicted.reshape(*predicted.shape[: nb + 2], -1)
    N, J, T = m.shape[-3:]
    mt = m.reshape(*m.shape[:-3], N * J, T).transpose(-1, -2)
    num = torch.matmul(mt, flat.reshape(*flat.shape[:-3], N * J, flat.shape[-1]))
    coverage = m.sum(dim=(-3, -2))
    valid = coverage > eps
    if not torch.any(valid.reshape(-1, T), dim=-1).all():
        raise ValueError("degenerate placement: zero coverage at every target time")
    denom = torch.where(valid, coverage, torch.ones_like(coverage))
    out = torch.where(valid.unsqueeze(-1), num / denom.unsqueeze(-1), torch.zeros_like(num))
    return SoftSequence(out.reshape(*out.shape[:-1], *feat), coverage, valid)


def reconstruction(pred: torch.Tensor, target: torch.Tensor, kind: str = "bce", start_dim: int = 1) -> torch.Tensor:
    """Per-item reconstruction summed over dims from ``start_dim`` on."""
    if kind == "bce":
        p = pred.clamp(1e-6, 1 - 1e-6)
        val = -(target * torch.log(p) + (1 - target) * torch.log1p(-p))
    elif kind == "l1":
        val = (pred - target).abs()
    elif kind == "l2":
        val = (pred - target) ** 2
    else:
        raise ValueError(f"unknown reconstruction kind {kind!r}; expected one of {RECON_KINDS}")
    if val.dim() <= start_dim:
        return val
    return val.flatten(start_dim).sum(-1)


def keyframe_loss(
    K_hat: torch.Tensor,
    K_tilde: torch.Tensor,
    kl: torch.Tensor,
    c: torch.Tensor,
    beta: float,
    recon: str = "bce",
    recon_weight: float = 1.0,
    eps: float = EPS,
) -> torch.Tensor:
    """``sum_n c^n (recon_n + beta kl_n) / sum_n c^n``, averaged over the batch.

    ``recon_weight`` scales the image term (0 disables it while keeping KL).
    """
    nb = c.dim()
    if K_hat.shape != K_tilde.shape or kl.shape != c.shape or K_hat.shape[:nb] != c.shape:
        raise ValueError("keyframe_loss inputs must share the leading [..., N] shape")
    if recon_weight:
        rec = reconstruction(K_hat, K_tilde, recon, start_dim=nb)
    else:
        rec = torch.zeros_like(c)
    csum = c.sum(-1)
    if torch.any(csum <= eps):
        raise ValueError("total in-horizon keyframe mass is zero")
    per = (c * (recon_weight * rec + beta * kl)).sum(-1) / csum
    return per.mean()


def weighted_keyframe_mean(values: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """c-weighted mean over keyframes of per-keyframe ``values [..., N]``, batch-averaged."""
    return ((c * values).sum(-1) / c.sum(-1).clamp_min(EPS)).mean()


def sequence_loss(frames: torch.Tensor, soft: SoftSequence, recon: str = "bce") -> torch.Tensor:
    """Sum over valid target times of the reconstruction, averaged over the batch."""
    nb = soft.coverage.dim()
    per_t = reconstruction(soft.frames, frames, recon, start_dim=nb)
    return (per_t * soft.valid).sum(-1).mean()


def total_loss(
    key_loss: torch.Tensor,
    frames: torch.Tensor,
    soft: SoftSequence,
    beta_I: float,
    beta_kappa: float = 0.0,
    embedding_term: torch.Tensor | float = 0.0,
    recon: str = "bce",
) -> torch.Tensor:
    out = key_loss
    if beta_I:
        out = out + beta_I * sequence_loss(frames, soft, recon)
    if beta_kappa:
        out = out + beta_kappa * embedding_term
    return out


def brute_force_targets(
    delta: np.ndarray, frames: np.ndarray, predicted: np.ndarray, budget: int = 100_000, eps: float = EPS
) -> dict:
    """Exact targets by enumerating every joint offset assignment.

    ``delta`` [N, J], ``frames`` [T, ...], ``predicted`` [N, J, ...].
    Returns a dict with ``K`` [N, ...], ``c`` [N], ``I`` [T, ...], ``coverage`` [T]
    and ``valid`` [T].  Undefined targets are zero.
    """
    delta = np.asarray(delta, dtype=np.float64)
    N, J = delta.shape
    if J**N > budget:
        raise ValueError(f"enumeration of {J}**{N} assignments exceeds budget {budget}")
    frames = np.asarray(frames, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    T = frames.shape[0]
    c = np.zeros(N)
    K = np.zeros((N,) + frames.shape[1:])
    cov = np.zeros(T)
    I = np.zeros(frames.shape)
    for offsets in itertools.product(range(1, J + 1), repeat=N):
        p = np.prod([delta[n, o - 1] for n, o in enumerate(offsets)])
        if p == 0.0:
            continue
        start = 0
        for n, o in enumerate(offsets):
            for j in range(1, o + 1):
                t = start + j
                if t <= T:
                    cov[t - 1] += p
                    I[t - 1] += p * predicted[n, j - 1]
            start += o
            if start <= T:
                c[n] += p
                K[n] += p * frames[start - 1]
    shape_k = (N,) + (1,) * (frames.ndim - 1)
    shape_i = (T,) + (1,) * (frames.ndim - 1)
    K = np.where(c.reshape(shape_k) > eps, K / np.where(c > eps, c, 1).reshape(shape_k), 0.0)
    valid = cov > eps
    I = np.where(valid.reshape(shape_i), I / np.where(valid, cov, 1).reshape(shape_i), 0.0)
    return {"K": K, "c": c, "I": I, "coverage": cov, "valid": valid}


def discrete_loss(
    offsets,
    frames: torch.Tensor,
    K_hat: torch.Tensor,
    predicted: torch.Tensor,
    kl: torch.Tensor,
    beta: float,
    beta_I: float,
    recon: str = "bce",
) -> torch.Tensor:
    """Loss of a single hard placement, computed without any relaxation.

    ``offsets`` are integers per keyframe (one example, no batch dim).
    """
    T = frames.shape[0]
    key_terms = []
    seq = frames.new_zeros(())
    start = 0
    for n, o in enumerate(offsets):
        for j in range(1, o + 1):
            t = start + j
            if t <= T:
                seq = seq + reconstruction(predicted[n, j - 1][None], frames[t - 1][None], recon)[0]
        start += o
        if start <= T:
            rec = reconstruction(K_hat[n][None], frames[start - 1][None], recon)[0]
            key_terms.append(rec + beta * kl[n])
    key = torch.stack(key_terms).mean()
    return key + beta_I * seq
