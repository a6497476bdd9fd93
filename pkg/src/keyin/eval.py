"""Keyframe-discovery metrics, baselines and video-quality metrics.

Keyframe times are integers ``1..T`` counted from the last conditioning
frame, the same convention as the placement distributions in
:mod:`keyin.relax`.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5 -> 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


def check_times(times: Iterable[int], T: int | None = None) -> list[int]:
    out = [int(t) for t in times]
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"keyframe times must be strictly increasing: {out}")
    if T is not None and out and (out[0] < 0 or out[-1] > T):
        raise ValueError(f"keyframe times {out} outside [0, {T}]")
    return out


# ---------------------------------------------------------------- matching metrics

@dataclass(frozen=True)
class Match:
    precision: float
    recall: float
    f1: float
    true_positives: int


def realized_times(offsets, T: int) -> list[int]:
    """Cumulative keyframe times from integer offsets ``[N]`` or an offset distribution ``[N, J]``.

    Distributions are decoded by argmax (offset ``j`` is column ``j - 1``).
    Times past the horizon are dropped.
    """
    arr = offsets.detach().cpu().numpy() if torch.is_tensor(offsets) else np.asarray(offsets)
    if arr.ndim == 2:
        arr = arr.argmax(-1) + 1
    if arr.ndim != 1:
        raise ValueError(f"expected offsets [N] or a distribution [N, J], got shape {arr.shape}")
    times = np.cumsum(arr.astype(int))
    return [int(t) for t in times if t <= T]


def f1(pred: Sequence[int], truth: Sequence[int], tol: int = 1) -> Match:
    """Greedy one-to-one matching in increasing time order.

    Each predicted time takes the earliest unmatched true time within
    ``tol``.  On sorted 1-D points this greedy choice yields a maximum
    matching, so swapping the arguments swaps precision and recall.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    p, t = sorted(int(x) for x in pred), sorted(int(x) for x in truth)
    used = [False] * len(t)
    tp = 0
    lo = 0
    for x in p:
        while lo < len(t) and (used[lo] or t[lo] < x - tol):
            lo += 1
        if lo < len(t) and abs(t[lo] - x) <= tol:
            used[lo] = True
            tp += 1
            lo += 1
    precision = tp / len(p) if p else 0.0
    recall = tp / len(t) if t else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Match(precision, recall, score, tp)


def min_distances(pred: Sequence[int], truth: Sequence[int]) -> tuple[float, float] | None:
    """``(mean over predicted of nearest-true distance, mean over true of nearest-predicted distance)``.

    Returns None when either set is empty.
    """
    if len(pred) == 0 or len(truth) == 0:
        return None
    p = np.asarray(pred, float)[:, None]
    t = np.asarray(truth, float)[None, :]
    d = np.abs(p - t)
    return float(d.min(1).mean()), float(d.min(0).mean())


# ---------------------------------------------------------------- baselines

def random_baseline(N: int, T: int, seed: int = 0) -> list[int]:
    if not 0 <= N <= T:
        raise ValueError(f"cannot draw {N} distinct times from 1..{T}")
    rng = np.random.default_rng(seed)
    return sorted(int(t) for t in rng.choice(np.arange(1, T + 1), size=N, replace=False))


def _mean_f1(placement: Sequence[int], truths: Sequence[Sequence[int]], tol: int) -> float:
    # fsum is exactly rounded, so the objective does not depend on episode order
    return math.fsum(f1(placement, t, tol).f1 for t in truths) / max(len(truths), 1)


def static_baseline_fit(truths: Sequence[Sequence[int]], N: int, T: int, tol: int = 1,
                        restarts: int = 5, seed: int = 0) -> list[int]:
    """The single placement of ``N`` times maximizing mean F1 over ``truths``.

    Greedy coordinate ascent: each coordinate in turn moves to its best free
    time (ties go to the earliest), until a sweep makes no change.  The first
    start is evenly spaced, the others are seeded random draws.
    """
    if not 1 <= N <= T:
        raise ValueError(f"need 1 <= N <= T, got N={N}, T={T}")
    truths = [sorted(int(x) for x in t) for t in truths]
    rng = np.random.default_rng(seed)
    starts = [sorted({int(round(x)) for x in np.linspace(1, T, N + 2)[1:-1]})]
    while len(starts[0]) < N:  # rounding collisions on tiny horizons
        starts[0] = sorted(set(starts[0]) | {min(set(range(1, T + 1)) - set(starts[0]))})
    for _ in range(restarts - 1):
        starts.append(sorted(int(x) for x in rng.choice(np.arange(1, T + 1), N, replace=False)))
    cache: dict[tuple[int, ...], float] = {}

    def score(pl):
        key = tuple(sorted(pl))
        if key not in cache:
            cache[key] = _mean_f1(key, truths, tol)
        return cache[key]

    best, best_score = None, -1.0
    for start in starts:
        cur = list(start)
        cur_score = score(cur)
        changed = True
        while changed:
            changed = False
            for i in range(N):
                others = cur[:i] + cur[i + 1 :]
                for t in range(1, T + 1):
                    if t in others:
                        continue
                    s = score(others + [t])
                    if s > cur_score + 1e-12:
                        cur, cur_score, changed = sorted(others + [t]), s, True
                        others = [x for x in cur if x != t]
        if cur_score > best_score + 1e-12 or (abs(cur_score - best_score) <= 1e-12 and sorted(cur) < best):
            best, best_score = sorted(cur), cur_score
    return best


def peak_surprise_times(surprise: Sequence[float], M: int) -> list[int]:
    """Indices of the ``M`` largest strict interior maxima, padded with the largest remaining values."""
    s = np.asarray(surprise, dtype=float)
    if M > len(s):
        raise ValueError(f"cannot pick {M} peaks from {len(s)} steps")
    interior = np.arange(1, len(s) - 1)
    peaks = [int(i) for i in interior if s[i] > s[i - 1] and s[i] > s[i + 1]]
    # stable sort: among equal values the earlier index wins
    peaks = sorted(peaks, key=lambda i: -s[i])[:M]
    if len(peaks) < M:
        rest = [int(i) for i in np.argsort(-s, kind="stable") if int(i) not in peaks]
        peaks += rest[: M - len(peaks)]
    return sorted(peaks)


def surprise_times(model, cond: torch.Tensor, targets: torch.Tensor, M: int) -> tuple[list[list[int]], np.ndarray]:
    """Surprise-baseline keyframe times (1-based) for a batch, plus the surprise traces ``[B, T]``."""
    with torch.no_grad():
        s = model.surprise(cond, targets).cpu().numpy()
    return [[i + 1 for i in peak_surprise_times(row, M)] for row in s], s


# ---------------------------------------------------------------- image metrics

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``, capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM over all images and channels of ``[..., H, W, C]`` arrays in ``[0, 1]``.

    Gaussian-weighted statistics (11x11 window, sigma 1.5) with population
    variances; the mean is taken over positions the window fits entirely.
    """
    a, b = _check_pair(a, b)
    if a.ndim < 3:
        raise ValueError("expected images shaped [..., H, W, C]")
    H, W, C = a.shape[-3:]
    x = np.moveaxis(a.reshape(-1, H, W, C), -1, 1).reshape(-1, H, W)
    y = np.moveaxis(b.reshape(-1, H, W, C), -1, 1).reshape(-1, H, W)
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    blur = lambda img: gaussian_filter(img, sigma=(0, SSIM_SIGMA, SSIM_SIGMA), truncate=SSIM_TRUNCATE)
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    r = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    if H > 2 * r and W > 2 * r:
        s = s[:, r:-r, r:-r]
    return float(s.mean())


# ---------------------------------------------------------------- discovery evaluation

@dataclass
class DiscoveryReport:
    method: str
    precision: float
    recall: float
    f1: float
    f1_std: float
    min_d_true: float | None
    min_d_pred: float | None
    episodes: int
    per_episode: list[dict[str, Any]] = field(default_factory=list)

    def row(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("per_episode")
        return d


def summarize(method: str, preds: Sequence[Sequence[int]], truths: Sequence[Sequence[int]], tol: int = 1) -> DiscoveryReport:
    per = []
    for p, t in zip(preds, truths):
        m = f1(p, t, tol)
        d = min_distances(p, t)
        per.append({"pred": list(map(int, p)), "truth": list(map(int, t)), "precision": m.precision,
                    "recall": m.recall, "f1": m.f1, "min_d_true": None if d is None else d[0],
                    "min_d_pred": None if d is None else d[1]})
    f = np.array([r["f1"] for r in per])
    dt = [r["min_d_true"] for r in per if r["min_d_true"] is not None]
    dp = [r["min_d_pred"] for r in per if r["min_d_pred"] is not None]
    return DiscoveryReport(
        method=method,
        precision=float(np.mean([r["precision"] for r in per])),
        recall=float(np.mean([r["recall"] for r in per])),
        f1=float(f.mean()),
        f1_std=float(f.std()),
        min_d_true=float(np.mean(dt)) if dt else None,
        min_d_pred=float(np.mean(dp)) if dp else None,
        episodes=len(per),
        per_episode=per,
    )


def window_truths(true_keyframes: Sequence[int], C: int, T: int, start: int = 0) -> list[int]:
    """Annotated keyframes of an episode window, as times ``1..T`` after the last conditioning frame."""
    last = start + C - 1
    return [k - last for k in true_keyframes if last < k <= last + T]


def held_out_windows(dataset, C: int, T: int, image_size: int | None = None):
    """First ``C + T`` frames of every episode as ``(cond, targets, truths)``."""
    from .training import prepare_frames

    frames = prepare_frames(dataset, image_size or dataset.frame_shape[0])[:, : C + T]
    if frames.shape[1] < C + T:
        raise ValueError(f"episodes hold {frames.shape[1]} frames, need {C + T}")
    truths = [window_truths(ep.true_keyframes, C, T) for ep in dataset]
    return frames[:, :C], frames[:, C:], truths


def train_window_truths(dataset, C: int, T: int, max_windows: int = 2000, seed: int = 0) -> list[list[int]]:
    """Annotations of random training windows, used to fit the static baseline."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_windows):
        ep = dataset[int(rng.integers(len(dataset)))]
        s = int(rng.integers(0, len(ep) - (C + T) + 1))
        out.append(window_truths(ep.true_keyframes, C, T, s))
    return out


def keyin_times(model, cond: np.ndarray, targets: np.ndarray | None, mode: str = "posterior",
                seed: int = 0, batch_size: int = 100) -> list[list[int]]:
    """Realized keyframe times for each sequence, with posterior latents (``targets`` given) or prior samples."""
    if mode not in ("posterior", "prior"):
        raise ValueError("mode must be 'posterior' or 'prior'")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(cond), batch_size):
            c = torch.from_numpy(np.asarray(cond[i : i + batch_size], dtype=np.float32))
            if mode == "posterior":
                tg = torch.from_numpy(np.asarray(targets[i : i + batch_size], dtype=np.float32))
                pred = model.rollout(model.encode(c), model.encode(tg), decode_images=False)
            else:
                z = torch.from_numpy(rng.standard_normal((len(c), cfg.N, cfg.latent_dim)).astype(np.float32))
                pred = model.rollout(model.encode(c), z=z, decode_images=False)
            out += [realized_times(d, cfg.T) for d in pred.delta]
    return out


def evaluate_discovery(model, dataset, mode: str = "posterior", seed: int = 0, tol: int = 1) -> DiscoveryReport:
    cfg = model.cfg
    cond, targets, truths = held_out_windows(dataset, cfg.C, cfg.T, cfg.image_size)
    preds = keyin_times(model, cond, targets, mode, seed)
    return summarize(f"keyin-{mode}", preds, truths, tol)


def discovery_table(dataset, train_set, N: int, T: int, C: int, keyin=None, dense=None, image_size=None,
                    seed: int = 0, tol: int = 1) -> tuple[list[DiscoveryReport], dict[str, Any]]:
    """Reports for every available method plus extras (surprise traces, static placement) for plotting."""
    size = image_size or (keyin.cfg.image_size if keyin is not None else dense.cfg.image_size if dense else None)
    cond, targets, truths = held_out_windows(dataset, C, T, size)
    reports, extras = [], {}
    if keyin is not None:
        for mode in ("posterior", "prior"):
            preds = keyin_times(keyin, cond, targets, mode, seed)
            reports.append(summarize(f"keyin-{mode}", preds, truths, tol))
            extras[f"keyin-{mode}"] = preds
    if dense is not None:
        preds, traces = [], []
        for i in range(0, len(cond), 100):
            p, s = surprise_times(dense, torch.from_numpy(cond[i : i + 100]), torch.from_numpy(targets[i : i + 100]), N)
            preds += p
            traces.append(s)
        reports.append(summarize("surprise", preds, truths, tol))
        extras["surprise"] = preds
        extras["surprise_traces"] = np.concatenate(traces)
    if train_set is not None:
        placement = static_baseline_fit(train_window_truths(train_set, C, T, seed=seed), N, T, tol, seed=seed)
        reports.append(summarize("static", [placement] * len(truths), truths, tol))
        extras["static_placement"] = placement
    rand = [random_baseline(N, T, seed=seed * 1_000_003 + i) for i in range(len(truths))]
    reports.append(summarize("random", rand, truths, tol))
    extras["truths"] = truths
    return reports, extras


# ---------------------------------------------------------------- video metrics

def evaluate_video(model, dataset, samples: int = 5, seed: int = 0, batch_size: int = 50) -> dict[str, float]:
    """PSNR/SSIM of generated continuations: posterior reconstruction and best-of-``samples`` prior draws."""
    cfg = model.cfg
    cond, targets, _ = held_out_windows(dataset, cfg.C, cfg.T, cfg.image_size)
    rng = np.random.default_rng(seed)
    scores = {"posterior": [], "prior_best": [], "prior_mean": []}
    model.eval()
    with torch.no_grad():
        for i in range(0, len(cond), batch_size):
            c = torch.from_numpy(cond[i : i + batch_size])
            tg = targets[i : i + batch_size]
            pred = model.rollout(model.encode(c), model.encode(torch.from_numpy(tg)), decode_images=False)
            post_seq = _assemble(model, c, pred)
            per_sample = []
            for _ in range(samples):
                z = torch.from_numpy(rng.standard_normal((len(c), cfg.N, cfg.latent_dim)).astype(np.float32))
                _, seq, _ = model.generate(c, z)
                per_sample.append(seq.numpy())
            for b in range(len(c)):
                scores["posterior"].append((psnr(post_seq[b], tg[b]), ssim(post_seq[b], tg[b])))
                ss = [(psnr(s[b], tg[b]), ssim(s[b], tg[b])) for s in per_sample]
                scores["prior_best"].append(max(ss))
                scores["prior_mean"].append(tuple(np.mean(ss, 0)))
    out = {}
    for k, v in scores.items():
        arr = np.asarray(v)
        out[f"{k}_psnr"] = float(arr[:, 0].mean())
        out[f"{k}_ssim"] = float(arr[:, 1].mean())
    out["episodes"] = len(cond)
    return out


def _assemble(model, cond, pred) -> np.ndarray:
    offsets = model.decode_offsets(pred.delta)
    prev = torch.cat([model.encode(cond[:, -1:]), pred.embeddings[:, :-1]], 1)
    frames, _ = model.inpaint(prev, pred.embeddings, offsets)
    B, T = frames.shape[0], model.cfg.T
    seq = np.zeros((B, T) + tuple(frames.shape[3:]), dtype=np.float32)
    f = frames.numpy()
    for b in range(B):
        t = 0
        for n in range(model.cfg.N):
            o = int(offsets[b, n])
            take = min(o, T - t)
            if take <= 0:
                break
            seq[b, t : t + take] = f[b, n, :take]
            t += o
    return seq


# ---------------------------------------------------------------- reports

def write_rows(rows: list[dict[str, Any]], out_dir: str | os.PathLike, stem: str, extra: dict | None = None) -> None:
    """``<stem>.json`` and ``<stem>.csv`` with one row per method."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps({"rows": rows, **(extra or {})}, indent=2))
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)


def plot_discovery(extras: dict[str, Any], T: int, out_dir: str | os.PathLike) -> list[Path]:
    """Placement histograms per method and a few surprise traces, as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    methods = [k for k in extras if k.startswith("keyin") or k == "surprise"]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    bins = np.arange(0.5, T + 1.5)
    ax.hist([t for ts in extras["truths"] for t in ts], bins=bins, alpha=0.4, label="annotated", color="k")
    for m in methods:
        ax.hist([t for ts in extras[m] for t in ts], bins=bins, histtype="step", label=m)
    if "static_placement" in extras:
        for t in extras["static_placement"]:
            ax.axvline(t, color="r", ls=":", lw=1)
    ax.set_xlabel("time after last conditioning frame")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(out / "placement_histogram.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    if "surprise_traces" in extras:
        traces = extras["surprise_traces"][:4]
        fig, axes = plt.subplots(len(traces), 1, figsize=(7, 1.6 * len(traces)), sharex=True, squeeze=False)
        for i, (ax, s) in enumerate(zip(axes[:, 0], traces)):
            ax.plot(np.arange(1, len(s) + 1), s, "b.-")
            for t in extras["truths"][i]:
                ax.axvline(t, color="k", ls="--", lw=0.8)
            ax.set_ylabel("KL")
        axes[-1, 0].set_xlabel("time")
        fig.tight_layout()
        paths.append(out / "surprise_traces.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
