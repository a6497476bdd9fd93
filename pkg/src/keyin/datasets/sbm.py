"""Structured Brownian Motion: a ball that turns after 6-8 straight frames."""
from __future__ import annotations

import math

import numpy as np

from .base import Dataset, Episode

GAPS = (6, 7, 8)


def _first_gap(rng: np.random.Generator) -> int:
    # forward-recurrence time of the renewal process, so the phase is stationary
    k = np.arange(1, max(GAPS) + 1)
    weights = np.array([np.mean([g >= kk for g in GAPS]) for kk in k])
    return int(rng.choice(k, p=weights / weights.sum()))


def render_ball(pos: np.ndarray, radius: float, H: int, W: int) -> np.ndarray:
    """Binary disc at continuous ``pos = (x, y)`` in pixel units (pixel centers at i + 0.5)."""
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    return ((xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 <= radius**2).astype(np.float32)


def sbm_episode(
    rng: np.random.Generator,
    T_total: int,
    H: int,
    W: int,
    radius: float,
    speed: float,
    min_turn: float,
) -> Episode:
    lo = np.array([radius, radius])
    hi = np.array([W - radius, H - radius])
    pos = rng.uniform(lo, hi)
    angle = rng.uniform(0, 2 * math.pi)
    vel = speed * np.array([math.cos(angle), math.sin(angle)])
    countdown = _first_gap(rng)
    frames = np.zeros((T_total, H, W, 1), dtype=np.float32)
    states = np.zeros((T_total, 4), dtype=np.float32)
    keyframes = []
    for t in range(T_total):
        frames[t, ..., 0] = render_ball(pos, radius, H, W)
        states[t] = [*pos, *vel]
        if t > 0:
            countdown -= 1
            if countdown == 0:
                keyframes.append(t)
                heading = math.atan2(vel[1], vel[0])
                turn = rng.uniform(min_turn, math.pi) * rng.choice([-1.0, 1.0])
                vel = speed * np.array([math.cos(heading + turn), math.sin(heading + turn)])
                countdown = int(rng.choice(GAPS))
        pos = pos + vel
        # elastic reflection; not an annotated keyframe
        for d in range(2):
            if pos[d] < lo[d]:
                pos[d] = 2 * lo[d] - pos[d]
                vel[d] = -vel[d]
            elif pos[d] > hi[d]:
                pos[d] = 2 * hi[d] - pos[d]
                vel[d] = -vel[d]
    return Episode(frames=frames, true_keyframes=keyframes, states=states)


def gen_sbm(
    num_episodes: int,
    T_total: int,
    H: int = 32,
    W: int = 32,
    seed: int = 0,
    radius: float | None = None,
    speed: float | None = None,
    min_turn: float = math.pi / 6,
    start_index: int = 0,
) -> Dataset:
    """Generate SBM episodes.

    Ball size and speed default to 3 px radius and 2 px/frame at 32x32,
    scaled linearly with the image size.  Episode ``i`` uses the random
    stream ``[seed, i]`` so generation can be split across workers.
    """
    if T_total < 2:
        raise ValueError("T_total must be at least 2")
    scale = min(H, W) / 32.0
    radius = 3.0 * scale if radius is None else float(radius)
    speed = 2.0 * scale if speed is None else float(speed)
    if radius <= 0 or 2 * radius + 2 * speed >= min(H, W):
        raise ValueError(f"ball radius {radius} and speed {speed} do not fit a {H}x{W} image")
    episodes = []
    for i in range(start_index, start_index + num_episodes):
        ep = sbm_episode(np.random.default_rng([seed, i]), T_total, H, W, radius, speed, min_turn)
        ep.meta = {"seed": seed, "index": i}
        episodes.append(ep)
    params = {
        "generator": "sbm",
        "T_total": T_total,
        "H": H,
        "W": W,
        "seed": seed,
        "radius": radius,
        "speed": speed,
        "min_turn": min_turn,
        "gaps": list(GAPS),
        "reflections_are_keyframes": False,
    }
    return Dataset("sbm", episodes, params)
