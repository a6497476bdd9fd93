"""Hierarchical keyframe planning on the pushing surrogate.

A high-level cross-entropy search over keyframe-model latents picks subgoal
images whose last keyframe best matches the goal; a low-level cross-entropy
search over action sequences, rolled out with the true simulator, drives
the puck toward the active subgoal.  Comparison planners differ only in how
the subgoal list is produced.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .datasets.push2d import A_MAX, STEP_SCALE, SUCCESS_THRESHOLD, Push2DState, Renderer, step_arrays
from .eval import peak_surprise_times

VARIANTS = ("flat", "jumpy", "surprise", "keyin", "oracle", "random")
REFERENCE_SIZE = 64  # pixel distances are reported in units of a 64x64 frame


@dataclass
class PlannerConfig:
    T_max: int = 60
    T_s_max: int = 10
    L: int = 6
    M_high: int = 200
    l: int = 8
    M: int = 200
    elite_ratio: float = 0.05
    N_it: int = 3
    a_max: float = A_MAX
    d_switch: float = 5.0
    success_threshold: float = SUCCESS_THRESHOLD
    action_repeat: int = 2
    render_size: int = REFERENCE_SIZE

    def __post_init__(self):
        if not 0 < self.elite_ratio <= 1:
            raise ValueError("elite ratio must lie in (0, 1]")
        for name in ("T_max", "T_s_max", "L", "M_high", "l", "M", "N_it", "action_repeat", "render_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------- CEM

@dataclass
class CEMResult:
    best: np.ndarray
    best_cost: float
    mu: np.ndarray
    sigma: np.ndarray
    best_history: list[float]
    evaluations: int


def cem(sample_dim: int, rollout_fn: Callable, cost_fn: Callable, M: int = 200, r: float = 0.05, N_it: int = 3,
        seed: int | np.random.Generator = 0, clip: float | None = None, mu0=None, sigma0=None,
        include_mean: bool = True) -> CEMResult:
    """Cross-entropy minimization of ``cost_fn(rollout_fn(samples))``.

    Samples ``[M, sample_dim]`` come from a diagonal Gaussian starting at the
    standard normal (or ``mu0``/``sigma0``); each iteration refits it to the
    ``ceil(r M)`` cheapest samples.  With ``clip`` samples are clipped to
    ``[-clip, clip]`` before evaluation.  With ``include_mean`` the first
    sample of every iteration is the current mean, so among equal costs the
    mean wins (stable ordering).  Returns the best sample seen.
    """
    n_elite = math.ceil(r * M)
    if n_elite < 2:
        raise ValueError(f"M*r = {M * r} leaves fewer than 2 elites")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.zeros(sample_dim) if mu0 is None else np.array(mu0, dtype=float)
    sigma = np.ones(sample_dim) if sigma0 is None else np.array(sigma0, dtype=float)
    best, best_cost, history, evals = None, math.inf, [], 0
    for _ in range(N_it):
        x = mu + sigma * rng.standard_normal((M, sample_dim))
        if include_mean:
            x[0] = mu
        if clip is not None:
            x = np.clip(x, -clip, clip)
        costs = np.asarray(cost_fn(rollout_fn(x)), dtype=float).reshape(M)
        evals += M
        costs = np.where(np.isfinite(costs), costs, np.inf)
        if not np.isfinite(costs).any():
            raise FloatingPointError("every CEM sample produced a non-finite cost")
        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_cost:
            best, best_cost = x[order[0]].copy(), float(costs[order[0]])
        history.append(best_cost)
        elite = x[order[:n_elite]]
        mu, sigma = elite.mean(0), elite.std(0)
    return CEMResult(best, best_cost, mu, sigma, history, evals)


# ---------------------------------------------------------------- costs

class CentroidCounter:
    """Counts images in which no puck pixels were found."""

    def __init__(self):
        self.missing = 0


PUCK_MISSES = CentroidCounter()


def puck_centroid(images: np.ndarray, threshold: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Intensity-weighted centroid ``(col, row)`` of puck pixels in ``[..., H, W, 3]`` images.

    A pixel belongs to the puck when red exceeds both other channels by more
    than ``threshold``; its weight is that excess.  Coordinates are scaled to
    a 64-pixel frame.  Also returns a mask of images with any puck pixels.
    """
    img = np.asarray(images, dtype=np.float32)
    H, W = img.shape[-3:-1]
    excess = img[..., 0] - np.maximum(img[..., 1], img[..., 2])
    w = np.where(excess > threshold, excess, 0.0)
    total = w.sum((-2, -1))
    found = total > 0
    safe = np.where(found, total, 1.0)
    cols = (np.arange(W) + 0.5) * (REFERENCE_SIZE / W)
    rows = (np.arange(H) + 0.5) * (REFERENCE_SIZE / H)
    cx = (w.sum(-2) * cols).sum(-1) / safe
    cy = (w.sum(-1) * rows).sum(-1) / safe
    return np.stack([cx, cy], -1), found


def centroid_cost(image, goal_image, horizon: int = 60) -> np.ndarray | float:
    """Pixel distance between puck centroids (batched over leading dims of ``image``).

    Images without puck pixels cost ``horizon * diagonal``.
    """
    c, found = puck_centroid(image)
    g, gfound = puck_centroid(goal_image)
    d = np.linalg.norm(c - g, axis=-1)
    sentinel = horizon * REFERENCE_SIZE * math.sqrt(2)
    ok = found & gfound
    PUCK_MISSES.missing += int(np.size(ok) - np.count_nonzero(ok))
    d = np.where(ok, d, sentinel)
    return float(d) if np.ndim(d) == 0 else d


# ---------------------------------------------------------------- plans

@dataclass
class Plan:
    subgoals: np.ndarray  # [L, H, W, 3]
    latents: np.ndarray
    costs: np.ndarray  # per-subgoal distance to the goal image
    mu: np.ndarray
    sigma: np.ndarray
    best_cost: float
    evaluations: int


def pool_to(frames: np.ndarray, size: int) -> np.ndarray:
    H = frames.shape[-3]
    if H == size:
        return frames
    f = H // size
    shape = frames.shape[:-3] + (size, f, size, f, frames.shape[-1])
    return frames.reshape(shape).mean((-4, -2))


def plan_subgoals(model, current_frame: np.ndarray, goal_image: np.ndarray, config: PlannerConfig,
                  seed: int = 0) -> Plan:
    """CEM over the stacked keyframe latents; cost is the last keyframe's distance to the goal."""
    cfg = model.cfg
    if config.L != cfg.N:
        raise ValueError(f"planner L = {config.L} must equal the model's N = {cfg.N}")
    cond = torch.from_numpy(pool_to(np.asarray(current_frame, np.float32), cfg.image_size)[None, None])
    with torch.no_grad():
        cond_emb = model.encode(cond)

    def rollout(z):
        zt = torch.from_numpy(z.reshape(len(z), cfg.N, cfg.latent_dim).astype(np.float32))
        with torch.no_grad():
            return model.rollout(cond_emb.expand(len(z), -1, -1), z=zt).images.numpy()

    res = cem(cfg.N * cfg.latent_dim, rollout, lambda imgs: centroid_cost(imgs[:, -1], goal_image),
              config.M_high, config.elite_ratio, config.N_it, seed)
    images = rollout(res.best[None])[0]
    return Plan(images, res.best.reshape(cfg.N, cfg.latent_dim), np.atleast_1d(centroid_cost(images, goal_image)),
                res.mu, res.sigma, res.best_cost, res.evaluations)


def subgoal_update(ix: int, current_frame, subgoals: Sequence[np.ndarray], steps_on_subgoal: int,
                   config: PlannerConfig) -> int:
    """Advance to the next subgoal when the current one is reached or timed out.

    ``subgoals`` already ends with the true goal; the index never passes it.
    """
    last = len(subgoals) - 1
    if ix >= last:
        return last
    reached = centroid_cost(current_frame, subgoals[ix]) <= config.d_switch
    if reached or steps_on_subgoal >= config.T_s_max:
        return ix + 1
    return ix


class Simulator:
    """Batched true dynamics and rendering for a fixed wall."""

    def __init__(self, barrier: np.ndarray, config: PlannerConfig):
        self.barrier = np.asarray(barrier, dtype=np.float64)
        self.config = config
        self.renderer = Renderer(config.render_size)

    def step(self, arm, puck, action):
        for _ in range(self.config.action_repeat):
            arm, puck = step_arrays(arm, puck, self.barrier, action, STEP_SCALE, self.config.a_max)
        return arm, puck

    def render(self, arm, puck):
        return self.renderer.render_arrays(arm, puck, self.barrier)


def low_level_mpc(state: Push2DState, target_image, config: PlannerConfig, seed=0, sim: Simulator | None = None):
    """First action of the best ``l``-step action sequence found by CEM against the true dynamics."""
    sim = sim or Simulator(state.barrier, config)
    l = config.l

    def rollout(x):
        acts = x.reshape(len(x), l, 2)
        arm = np.repeat(state.arm[None], len(x), 0)
        puck = np.repeat(state.puck[None], len(x), 0)
        for k in range(l):
            arm, puck = sim.step(arm, puck, acts[:, k])
        return sim.render(arm, puck)

    res = cem(2 * l, rollout, lambda imgs: centroid_cost(imgs, target_image), config.M, config.elite_ratio,
              config.N_it, seed, clip=config.a_max)
    return res.best[:2].copy()


# ---------------------------------------------------------------- execution

@dataclass
class ExecutionTrace:
    variant: str
    states: np.ndarray  # [steps+1, 4] arm and puck positions
    actions: np.ndarray  # [steps, 2]
    subgoal_index: list[int]
    subgoal_distance: list[float]
    final_error: float
    initial_error: float
    success: bool
    steps: int
    subgoals: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {"variant": self.variant, "final_error": self.final_error, "initial_error": self.initial_error,
                "success": self.success, "steps": self.steps, **self.meta}


def goal_image(state: Push2DState, size: int = REFERENCE_SIZE) -> np.ndarray:
    """Frame with the puck at the goal and the arm where it currently is."""
    return Renderer(size).render_arrays(state.arm, state.goal, state.barrier)


def execute(state: Push2DState, goal_img: np.ndarray, subgoals: Sequence[np.ndarray], config: PlannerConfig,
            seed: int = 0, variant: str = "keyin", policy: str = "mpc") -> ExecutionTrace:
    """Run the control loop toward ``subgoals + [goal]`` for at most ``T_max`` steps.

    ``policy`` is ``"mpc"`` (low-level CEM, a fresh seeded search each step)
    or ``"random"`` (uniform actions).
    """
    sim = Simulator(state.barrier, config)
    targets = list(subgoals) + [goal_img]
    arm, puck = state.arm.copy(), state.puck.copy()
    init_err = float(np.linalg.norm(puck - state.goal))
    states, actions, idx_log, dist_log = [np.concatenate([arm, puck])], [], [], []
    ix, on_sub = 0, 0
    rng = np.random.default_rng([seed, 1])
    steps = 0
    while steps < config.T_max and np.linalg.norm(puck - state.goal) > config.success_threshold:
        frame = sim.render(arm, puck)
        new = subgoal_update(ix, frame, targets, on_sub, config)
        if new != ix:
            ix, on_sub = new, 0
        idx_log.append(ix)
        dist_log.append(float(centroid_cost(frame, targets[ix])))
        if policy == "random":
            a = rng.uniform(-config.a_max, config.a_max, 2)
        else:
            cur = Push2DState(arm, puck, state.barrier, state.goal)
            a = low_level_mpc(cur, targets[ix], config, seed=[seed, 0, steps], sim=sim)
        arm, puck = sim.step(arm, puck, a)
        if not (np.all(np.isfinite(arm)) and np.all(np.isfinite(puck))):
            raise FloatingPointError("simulator diverged")
        actions.append(a)
        states.append(np.concatenate([arm, puck]))
        on_sub += 1
        steps += 1
    err = float(np.linalg.norm(puck - state.goal))
    return ExecutionTrace(variant, np.array(states), np.array(actions).reshape(-1, 2), idx_log, dist_log, err,
                          init_err, err <= config.success_threshold, steps,
                          None if not len(subgoals) else np.asarray(subgoals))


@dataclass
class PlanningModels:
    keyin: Any = None
    jumpy: Any = None
    dense: Any = None


def surprise_subgoals(dense, current_frame, goal_img, config: PlannerConfig, seed: int = 0, horizon: int | None = None):
    """Frames at surprise peaks of the dense-predictor rollout that ends closest to the goal."""
    cfg = dense.cfg
    T = horizon or cfg.T
    cond = torch.from_numpy(pool_to(np.asarray(current_frame, np.float32), cfg.image_size)[None, None])

    def rollout(z):
        zt = torch.from_numpy(z.reshape(len(z), T, cfg.latent_dim).astype(np.float32))
        with torch.no_grad():
            return dense(cond.expand(len(z), *cond.shape[1:]), z=zt).frames.numpy()

    res = cem(T * cfg.latent_dim, rollout, lambda f: centroid_cost(f[:, -1], goal_img), config.M_high,
              config.elite_ratio, config.N_it, seed)
    frames = rollout(res.best[None])
    with torch.no_grad():
        s = dense.surprise(cond, torch.from_numpy(frames))[0].numpy()
    peaks = peak_surprise_times(s, min(config.L, T))
    return frames[0, peaks]


def jumpy_subgoals(model, current_frame, goal_img, config: PlannerConfig, seed: int = 0):
    """Keyframes of a fixed-offset model; its keyframes sit at evenly spaced times."""
    if model.cfg.fixed_offset is None:
        raise ValueError("the jumpy planner needs a model trained with a fixed offset")
    return plan_subgoals(model, current_frame, goal_img, config, seed).subgoals


def execute_episode(state: Push2DState, models: PlanningModels, variant: str, config: PlannerConfig, seed: int = 0,
                    oracle_subgoals: Sequence[np.ndarray] | None = None) -> ExecutionTrace:
    if variant not in VARIANTS:
        raise ValueError(f"unknown planner variant {variant!r}; choose from {VARIANTS}")
    renderer = Renderer(config.render_size)
    frame = renderer.render_arrays(state.arm, state.puck, state.barrier)
    goal_img = goal_image(state, config.render_size)
    meta: dict[str, Any] = {}
    subgoals: list[np.ndarray] = []
    if variant == "keyin":
        plan = plan_subgoals(_need(models.keyin, variant), frame, goal_img, config, seed)
        subgoals = list(plan.subgoals)
        meta["plan_cost"] = plan.best_cost
    elif variant == "jumpy":
        subgoals = list(jumpy_subgoals(_need(models.jumpy, variant), frame, goal_img, config, seed))
    elif variant == "surprise":
        subgoals = list(surprise_subgoals(_need(models.dense, variant), frame, goal_img, config, seed))
    elif variant == "oracle":
        if oracle_subgoals is None:
            raise ValueError("the oracle planner needs the demonstrator's subgoal frames")
        subgoals = list(oracle_subgoals)
    policy = "random" if variant == "random" else "mpc"
    trace = execute(state, goal_img, subgoals, config, seed, variant, policy)
    trace.meta.update(meta)
    return trace


def _need(model, variant):
    if model is None:
        raise ValueError(f"the {variant} planner needs a trained model")
    return model


def oracle_frames(episode, size: int = REFERENCE_SIZE) -> list[np.ndarray]:
    """Renders of a demonstration at its annotated keyframes."""
    barrier = np.array(episode.meta["barrier"])
    r = Renderer(size)
    return [r.render_arrays(episode.states[k, :2].astype(np.float64), episode.states[k, 2:4].astype(np.float64), barrier)
            for k in episode.true_keyframes]


def episode_start(episode) -> Push2DState:
    s = episode.states[0].astype(np.float64)
    return Push2DState(s[:2], s[2:4], np.array(episode.meta["barrier"]), np.array(episode.meta["goal"]))


def _run_one(args):
    episode, models, variant, config, seed = args
    oracle = oracle_frames(episode, config.render_size) if variant == "oracle" else None
    return execute_episode(episode_start(episode), models, variant, config, seed, oracle)


def evaluate_planning(episodes, variants: Sequence[str], models: PlanningModels, config: PlannerConfig,
                      seed: int = 0, workers: int = 1, progress: Callable | None = None):
    """Per-variant mean/std final puck-goal distance and success rate, plus an ``initial`` row.

    Episode ``i`` uses seed ``seed + i`` for every variant.
    """
    traces: dict[str, list[ExecutionTrace]] = {}
    for v in variants:
        jobs = [(ep, models, v, config, seed + i) for i, ep in enumerate(episodes)]
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(workers) as pool:
                traces[v] = list(pool.map(_run_one, jobs))
        else:
            traces[v] = []
            for job in jobs:
                traces[v].append(_run_one(job))
                if progress is not None:
                    progress(v, len(traces[v]), traces[v][-1])
    init = np.array([np.linalg.norm(episode_start(ep).puck - episode_start(ep).goal) for ep in episodes])
    rows = [{"variant": "initial", "mean_error": float(init.mean()), "std_error": float(init.std()),
             "success_rate": float(np.mean(init <= config.success_threshold)), "episodes": len(episodes), "seed": seed}]
    for v, tr in traces.items():
        err = np.array([t.final_error for t in tr])
        rows.append({"variant": v, "mean_error": float(err.mean()), "std_error": float(err.std()),
                     "success_rate": float(np.mean([t.success for t in tr])), "episodes": len(tr), "seed": seed})
    return rows, traces


def write_planning(rows, traces, out_dir, config: PlannerConfig, dump_traces: bool = False) -> None:
    from .tensorio import write_tensors

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "planning.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["variant", "mean_error", "std_error", "success_rate", "episodes", "seed"])
        w.writeheader()
        w.writerows(rows)
    per = {v: [t.summary() for t in tr] for v, tr in traces.items()}
    info = {"rows": rows, "config": asdict(config), "success_threshold": config.success_threshold, "episodes": per}
    (out / "planning.json").write_text(json.dumps(info, indent=2, default=float))
    if dump_traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for v, tr in traces.items():
            for i, t in enumerate(tr):
                write_tensors(tdir / f"{v}_{i:04d}.bin", [t.states.astype(np.float32), t.actions.astype(np.float32),
                                                        np.asarray(t.subgoal_index, np.float32)])


def plot_planning(rows, path) -> Path:
    """Bar chart of mean final distance (with std) and success rate per variant."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["variant"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.bar(names, [r["mean_error"] for r in rows], yerr=[r["std_error"] for r in rows], capsize=3)
    a.set_ylabel("final puck-goal distance")
    b.bar(names, [100 * r["success_rate"] for r in rows])
    b.set_ylabel("success rate (%)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
