"""Planar pushing surrogate: a disc arm pushes a disc puck around a wall.

Coordinates are world units in the unit square; ``x`` maps to image columns
and ``y`` to image rows.  Physics is quasi-static: an overlapping arm moves
the puck along the contact normal, and both bodies are projected out of the
wall and the workspace bounds.  Every function is deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .base import Dataset, Episode

PUCK_RADIUS = 0.06
ARM_RADIUS = 0.04
WALL_LENGTH = 0.4
WALL_HALF_WIDTH = 0.02
STEP_SCALE = 0.035
A_MAX = 1.0
NUM_PUSHES = 6
SUBGOAL_TOL = 0.03
SUCCESS_THRESHOLD = 0.1

BACKGROUND = (0.0, 0.0, 0.0)
WALL_COLOR = (0.0, 1.0, 0.0)
ARM_COLOR = (0.0, 0.0, 1.0)
PUCK_COLOR = (1.0, 0.0, 0.0)


@dataclass(frozen=True)
class Push2DState:
    arm: np.ndarray
    puck: np.ndarray
    barrier: np.ndarray  # [2, 2] wall endpoints
    goal: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))

    def __post_init__(self):
        for name in ("arm", "puck", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(2))
        object.__setattr__(self, "barrier", np.asarray(self.barrier, dtype=np.float64).reshape(2, 2))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.arm, self.puck])


def _closest_on_wall(p: np.ndarray, barrier: np.ndarray) -> np.ndarray:
    b0, b1 = barrier
    d = b1 - b0
    s = np.clip(((p - b0) @ d) / (d @ d), 0.0, 1.0)
    return b0 + s[..., None] * d


def wall_distance(p: np.ndarray, barrier: np.ndarray) -> np.ndarray:
    """Distance from points ``[..., 2]`` to the wall's center line."""
    return np.linalg.norm(p - _closest_on_wall(p, barrier), axis=-1)


def _out_of_wall(p: np.ndarray, radius: float, barrier: np.ndarray) -> np.ndarray:
    q = _closest_on_wall(p, barrier)
    diff = p - q
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    need = radius + WALL_HALF_WIDTH
    d = barrier[1] - barrier[0]
    normal = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    n = np.where(dist > 1e-12, diff / np.maximum(dist, 1e-12), normal)
    return np.where(dist < need, q + n * need, p)


def _in_bounds(p: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(p, radius, 1.0 - radius)


def _separate(anchor: np.ndarray, mover: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Move ``mover`` so it no longer overlaps ``anchor`` (along their center line)."""
    diff = mover - anchor
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    need = ARM_RADIUS + PUCK_RADIUS
    n = np.where(dist > 1e-12, diff / np.maximum(dist, 1e-12), fallback)
    return np.where(dist < need, anchor + n * need, mover)


def step_arrays(
    arm: np.ndarray, puck: np.ndarray, barrier: np.ndarray, action: np.ndarray, step_scale: float = STEP_SCALE,
    a_max: float = A_MAX,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized dynamics over leading batch dims of ``arm``, ``puck``, ``action``."""
    a = np.clip(action, -a_max, a_max)
    move = a * step_scale
    norm = np.linalg.norm(move, axis=-1, keepdims=True)
    heading = np.where(norm > 1e-12, move / np.maximum(norm, 1e-12), np.array([1.0, 0.0]))
    arm = _in_bounds(_out_of_wall(arm + move, ARM_RADIUS, barrier), ARM_RADIUS)
    puck = _separate(arm, puck, heading)
    for _ in range(2):
        puck = _in_bounds(_out_of_wall(puck, PUCK_RADIUS, barrier), PUCK_RADIUS)
        arm = _separate(puck, arm, -heading)
        arm = _in_bounds(_out_of_wall(arm, ARM_RADIUS, barrier), ARM_RADIUS)
    puck = _in_bounds(_out_of_wall(puck, PUCK_RADIUS, barrier), PUCK_RADIUS)
    return arm, puck


def push2d_step(state: Push2DState, action, step_scale: float = STEP_SCALE, a_max: float = A_MAX) -> Push2DState:
    arm, puck = step_arrays(state.arm, state.puck, state.barrier, np.asarray(action, dtype=np.float64), step_scale, a_max)
    return replace(state, arm=arm, puck=puck)


class Renderer:
    """Rasterizes states to ``[H, W, 3]`` float32 frames without antialiasing."""

    def __init__(self, size: int = 64):
        self.size = size
        c = (np.arange(size) + 0.5) / size
        self.xs = c[None, :]
        self.ys = c[:, None]
        self._wall_cache: dict[bytes, np.ndarray] = {}

    def wall_mask(self, barrier: np.ndarray) -> np.ndarray:
        key = np.asarray(barrier, dtype=np.float64).tobytes()
        if key not in self._wall_cache:
            pts = np.stack(np.broadcast_arrays(self.xs, self.ys), -1)
            self._wall_cache[key] = wall_distance(pts, np.asarray(barrier, dtype=np.float64)) <= WALL_HALF_WIDTH
            if len(self._wall_cache) > 512:
                self._wall_cache.pop(next(iter(self._wall_cache)))
        return self._wall_cache[key]

    def _disc(self, center: np.ndarray, radius: float) -> np.ndarray:
        cx = center[..., 0, None, None]
        cy = center[..., 1, None, None]
        return (self.xs - cx) ** 2 + (self.ys - cy) ** 2 <= radius**2

    def render_arrays(self, arm: np.ndarray, puck: np.ndarray, barrier: np.ndarray) -> np.ndarray:
        batch = np.broadcast_shapes(arm.shape[:-1], puck.shape[:-1])
        img = np.empty(batch + (self.size, self.size, 3), dtype=np.float32)
        img[...] = BACKGROUND
        img[..., self.wall_mask(barrier), :] = WALL_COLOR
        img[self._disc(arm, ARM_RADIUS)] = ARM_COLOR
        img[self._disc(puck, PUCK_RADIUS)] = PUCK_COLOR
        return img

    def __call__(self, state: Push2DState) -> np.ndarray:
        return self.render_arrays(state.arm, state.puck, state.barrier)


_RENDERERS: dict[int, Renderer] = {}


def render_push2d(state: Push2DState, size: int = 64) -> np.ndarray:
    if size not in _RENDERERS:
        _RENDERERS[size] = Renderer(size)
    return _RENDERERS[size](state)


def puck_pixel_center(puck: np.ndarray, size: int = 64) -> np.ndarray:
    """Projected puck center in pixel units, ``(col, row)``."""
    return np.asarray(puck) * size


# ---------------------------------------------------------------- demonstrations


@dataclass
class Layout:
    barrier: np.ndarray
    puck: np.ndarray
    goal: np.ndarray
    arm: np.ndarray
    side: int


def _clear(p: np.ndarray, barrier: np.ndarray, margin: float) -> bool:
    lo, hi = PUCK_RADIUS + margin, 1.0 - PUCK_RADIUS - margin
    return bool(np.all(p >= lo) and np.all(p <= hi) and wall_distance(p, barrier) >= PUCK_RADIUS + WALL_HALF_WIDTH + margin)


def sample_layout(rng: np.random.Generator) -> Layout:
    while True:
        center = 0.5 + rng.uniform(-0.08, 0.08, 2)
        theta = rng.uniform(0, math.pi)
        tang = np.array([math.cos(theta), math.sin(theta)])
        norm = np.array([-tang[1], tang[0]])
        barrier = np.stack([center - tang * WALL_LENGTH / 2, center + tang * WALL_LENGTH / 2])
        puck = center - norm * rng.uniform(0.17, 0.26) + tang * rng.uniform(-0.08, 0.08)
        goal = center + norm * rng.uniform(0.17, 0.26) + tang * rng.uniform(-0.08, 0.08)
        phi = rng.uniform(0, 2 * math.pi)
        arm = puck + (ARM_RADIUS + PUCK_RADIUS + 0.03) * np.array([math.cos(phi), math.sin(phi)])
        if not (_clear(puck, barrier, 0.02) and _clear(goal, barrier, 0.02)):
            continue
        if np.any(arm < ARM_RADIUS) or np.any(arm > 1 - ARM_RADIUS) or wall_distance(arm, barrier) < ARM_RADIUS + WALL_HALF_WIDTH:
            continue
        return Layout(barrier, puck, goal, arm, int(rng.choice([-1, 1])))


def sample_subgoals(layout: Layout, rng: np.random.Generator, num: int = NUM_PUSHES) -> np.ndarray | None:
    """Subgoals along a detour around one wall end, the last one being the goal."""
    b0, b1 = layout.barrier
    center = (b0 + b1) / 2
    tang = (b1 - b0) / np.linalg.norm(b1 - b0)
    norm = np.array([-tang[1], tang[0]])
    end = center + layout.side * tang * WALL_LENGTH / 2
    lateral = layout.side * tang * (PUCK_RADIUS + WALL_HALF_WIDTH + 0.05)
    path = np.stack([layout.puck, end + lateral - norm * 0.09, end + lateral + norm * 0.09, layout.goal])
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0], np.cumsum(seg)])
    goals = []
    for k in range(1, num):
        s = cum[-1] * (k + rng.uniform(-0.2, 0.2)) / num
        i = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
        p = path[i] + (path[i + 1] - path[i]) * (s - cum[i]) / seg[i]
        p = p + rng.uniform(-0.03, 0.03, 2)
        if not _clear(p, layout.barrier, 0.01):
            return None
        goals.append(p)
    goals.append(layout.goal)
    return np.stack(goals)


def demo_action(state: Push2DState, subgoal: np.ndarray, step_scale: float = STEP_SCALE) -> np.ndarray:
    """Scripted pushing controller towards one subgoal."""
    contact = ARM_RADIUS + PUCK_RADIUS
    orbit = contact + 0.035
    d = subgoal - state.puck
    dist = np.linalg.norm(d)
    u = d / max(dist, 1e-9)
    rel = state.arm - state.puck
    r = np.linalg.norm(rel)
    behind = -u
    cosang = rel @ behind / max(r, 1e-9)
    if cosang > math.cos(math.radians(20)) and r < contact + 0.015:
        target = state.puck - u * contact + u * min(dist, step_scale * 0.9)
    elif cosang > math.cos(math.radians(35)):
        target = state.puck - u * (contact + 0.005)
    else:
        phi = math.atan2(rel[1], rel[0])
        psi = math.atan2(behind[1], behind[0])
        dphi = (psi - phi + math.pi) % (2 * math.pi) - math.pi
        # at distance, first get onto the orbit; otherwise walk along it
        if r < orbit - 0.01:
            target = state.puck + rel / max(r, 1e-9) * orbit
        else:
            step = min(abs(dphi), 0.9 * step_scale / orbit) * np.sign(dphi)
            target = state.puck + orbit * np.array([math.cos(phi + step), math.sin(phi + step)])
    return np.clip((target - state.arm) / step_scale, -A_MAX, A_MAX)


def run_demo(layout: Layout, subgoals: np.ndarray, raw_steps: int, step_scale: float = STEP_SCALE):
    """Execute the scripted pushes; returns states [raw_steps+1, 4], actions, completion times."""
    state = Push2DState(layout.arm, layout.puck, layout.barrier, layout.goal)
    states = [state.as_vector()]
    actions = []
    done_at = []
    k = 0
    for t in range(raw_steps):
        if k < len(subgoals):
            a = demo_action(state, subgoals[k], step_scale)
        else:
            a = np.zeros(2)
        state = push2d_step(state, a, step_scale)
        actions.append(a)
        states.append(state.as_vector())
        if k < len(subgoals) and np.linalg.norm(state.puck - subgoals[k]) < SUBGOAL_TOL:
            done_at.append(t + 1)
            k += 1
    return np.array(states), np.array(actions), done_at


def demo_push2d(
    num_episodes: int,
    seed: int = 0,
    T_total: int = 31,
    size: int = 64,
    step_scale: float = STEP_SCALE,
    max_attempts: int = 200,
    start_index: int = 0,
) -> Dataset:
    """Scripted demonstrations, subsampled by two.

    Frame ``k`` is raw step ``2k``; action ``k`` sums raw actions ``2k`` and
    ``2k+1``.  Keyframes are the (subsampled) times at which each subgoal
    was reached.  Demonstrations that do not finish within the horizon are
    regenerated; the number of discards is recorded.
    """
    raw_steps = 2 * (T_total - 1)
    renderer = Renderer(size)
    episodes = []
    discarded = 0
    for i in range(start_index, start_index + num_episodes):
        rng = np.random.default_rng([seed, i])
        for attempt in range(max_attempts):
            layout = sample_layout(rng)
            subgoals = sample_subgoals(layout, rng)
            if subgoals is None:
                discarded += 1
                continue
            states, actions, done_at = run_demo(layout, subgoals, raw_steps, step_scale)
            final = np.linalg.norm(states[-1, 2:] - layout.goal)
            distinct = {-(-t // 2) for t in done_at}
            if len(done_at) == NUM_PUSHES and len(distinct) == NUM_PUSHES and final < SUCCESS_THRESHOLD:
                break
            discarded += 1
        else:
            raise RuntimeError(f"demonstrator failed {max_attempts} times for episode {i}")
        kept = states[::2]
        frames = renderer.render_arrays(kept[:, :2], kept[:, 2:], layout.barrier)
        agg = actions.reshape(-1, 2, 2).sum(1)
        keyframes = sorted(min(-(-t // 2), T_total - 1) for t in done_at)
        meta = {
            "seed": seed,
            "index": i,
            "barrier": layout.barrier.tolist(),
            "goal": layout.goal.tolist(),
            "side": layout.side,
            "subgoals": subgoals.tolist(),
            "raw_keyframes": done_at,
            "attempts": attempt + 1,
        }
        episodes.append(Episode(frames, keyframes, actions=agg.astype(np.float32), states=kept.astype(np.float32), meta=meta))
    params = {
        "generator": "push2d",
        "T_total": T_total,
        "size": size,
        "seed": seed,
        "step_scale": step_scale,
        "puck_radius": PUCK_RADIUS,
        "arm_radius": ARM_RADIUS,
        "wall_length": WALL_LENGTH,
        "wall_half_width": WALL_HALF_WIDTH,
        "num_pushes": NUM_PUSHES,
        "subgoal_tol": SUBGOAL_TOL,
        "success_threshold": SUCCESS_THRESHOLD,
        "subsample": 2,
        "discarded": discarded,
    }
    return Dataset("push2d", episodes, params)


def episode_state(ep: Episode, t: int = 0) -> Push2DState:
    s = ep.states[t]
    return Push2DState(s[:2], s[2:4], np.array(ep.meta["barrier"]), np.array(ep.meta["goal"]))
