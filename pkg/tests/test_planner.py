import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from keyin import planner as pl
from keyin.datasets import demo_push2d
from keyin.datasets.push2d import Push2DState, Renderer, sample_layout

FAST = pl.PlannerConfig(T_max=6, M_high=20, M=40, l=3, N_it=2, elite_ratio=0.1)
FAR_WALL = np.array([[0.9, 0.9], [0.95, 0.95]])


def render_px(puck_px, arm=(0.8, 0.2)):
    """Frame with the puck centred at pixel coordinates of a 64-pixel frame."""
    return Renderer(64).render_arrays(np.array(arm), np.asarray(puck_px, float) / 64, FAR_WALL)


# ---------------------------------------------------------------- CEM

def test_cem_quadratic_bowl():
    hits = 0
    for seed in range(20):
        target = np.random.default_rng(1000 + seed).uniform(-1, 1, 4)
        res = pl.cem(4, lambda x: x, lambda x: ((x - target) ** 2).sum(1), M=200, r=0.05, N_it=3, seed=seed)
        hits += np.linalg.norm(res.best - target) < 0.2
    assert hits >= 19


def test_cem_constant_cost_has_no_drift():
    mus = [pl.cem(4, lambda x: x, lambda x: np.zeros(len(x)), 200, 0.05, 3, seed).mu for seed in range(20)]
    assert abs(float(np.mean(mus))) < 0.1


def test_cem_deterministic_and_monotone():
    f = lambda x: np.abs(x - 0.3).sum(1)
    a, b = pl.cem(3, lambda x: x, f, 50, 0.1, 5, seed=4), pl.cem(3, lambda x: x, f, 50, 0.1, 5, seed=4)
    assert np.array_equal(a.best, b.best) and a.best_history == b.best_history
    assert all(y <= x for x, y in zip(a.best_history, a.best_history[1:]))
    assert a.evaluations == 250


def test_cem_errors_and_clipping():
    with pytest.raises(ValueError, match="elites"):
        pl.cem(2, lambda x: x, lambda x: x.sum(1), M=20, r=0.05)
    with pytest.raises(FloatingPointError):
        pl.cem(2, lambda x: x, lambda x: np.full(len(x), np.nan), M=20, r=0.1)
    seen = []
    pl.cem(2, lambda x: seen.append(x) or x, lambda x: x.sum(1), M=50, r=0.1, N_it=2, clip=0.5, sigma0=[5, 5])
    assert all(np.abs(x).max() <= 0.5 for x in seen)


def test_cem_call_counts():
    calls = []
    pl.cem(2, lambda x: calls.append(len(x)) or x, lambda x: x.sum(1), M=30, r=0.1, N_it=4)
    assert calls == [30] * 4


# ---------------------------------------------------------------- centroid cost

def test_centroid_cost_render_oracle():
    d = pl.centroid_cost(render_px((10, 10)), render_px((13, 14)))
    assert abs(d - 5.0) <= 1.0
    img = render_px((30, 40))
    assert pl.centroid_cost(img, img) == 0.0
    assert pl.centroid_cost(img, render_px((20, 20))) == pl.centroid_cost(render_px((20, 20)), img)


def test_centroid_cost_scales_small_frames_to_reference():
    a, b = render_px((16, 16)), render_px((40, 24))
    small = lambda f: pl.pool_to(f, 32)
    assert abs(pl.centroid_cost(small(a), small(b)) - pl.centroid_cost(a, b)) < 1.0


def test_centroid_cost_missing_puck():
    before = pl.PUCK_MISSES.missing
    blank = np.zeros((64, 64, 3), np.float32)
    assert pl.centroid_cost(blank, render_px((10, 10)), horizon=60) == 60 * 64 * math.sqrt(2)
    assert pl.PUCK_MISSES.missing == before + 1


# ---------------------------------------------------------------- subgoal switching

def test_subgoal_update_rules():
    cfg = pl.PlannerConfig()
    near, far = render_px((10, 10)), render_px((60, 60))
    goals = [near, far, far]
    assert pl.subgoal_update(0, near, goals, 0, cfg) == 1  # reached
    assert pl.subgoal_update(0, far, [near, far, far], 10, cfg) == 1  # timed out
    assert pl.subgoal_update(0, far, [near, far, far], 3, cfg) == 0
    assert pl.subgoal_update(2, near, goals, 50, cfg) == 2  # never passes the final goal


# ---------------------------------------------------------------- low-level MPC

def test_low_level_mpc_stays_put_when_target_is_current():
    rng = np.random.default_rng(0)
    cfg = pl.PlannerConfig(M=100, l=4)
    small = 0
    for i in range(50):
        lay = sample_layout(rng)
        s = Push2DState(lay.arm, lay.puck, lay.barrier, lay.goal)
        target = Renderer(64).render_arrays(s.arm, s.puck, s.barrier)
        a = pl.low_level_mpc(s, target, cfg, seed=i)
        assert np.all(np.abs(a) <= cfg.a_max)
        small += np.linalg.norm(a) < 0.2 * cfg.a_max
    assert small >= 40


def test_low_level_mpc_pushes_toward_target():
    cfg = pl.PlannerConfig(M=100, l=6)
    s = Push2DState(np.array([0.3, 0.5]), np.array([0.42, 0.5]), FAR_WALL, np.array([0.7, 0.5]))
    target = Renderer(64).render_arrays(s.arm, np.array([0.6, 0.5]), s.barrier)
    a = pl.low_level_mpc(s, target, cfg, seed=0)
    b = pl.low_level_mpc(s, target, cfg, seed=0)
    assert np.array_equal(a, b) and a[0] > 0


# ---------------------------------------------------------------- execution

@pytest.fixture(scope="module")
def episode():
    return demo_push2d(1, seed=11)[0]


def test_flat_equals_goal_repeated(episode):
    s = pl.episode_start(episode)
    goal = pl.goal_image(s)
    flat = pl.execute(s, goal, [], FAST, seed=3, variant="flat")
    rep = pl.execute(s, goal, [goal] * 6, FAST, seed=3, variant="keyin")
    assert np.array_equal(flat.actions, rep.actions) and np.array_equal(flat.states, rep.states)


def test_trace_invariants(episode):
    s = pl.episode_start(episode)
    tr = pl.execute_episode(s, pl.PlanningModels(), "oracle", FAST, 0, pl.oracle_frames(episode))
    assert tr.steps <= FAST.T_max and len(tr.actions) == tr.steps
    assert all(b >= a for a, b in zip(tr.subgoal_index, tr.subgoal_index[1:]))
    assert tr.initial_error == pytest.approx(np.linalg.norm(s.puck - s.goal))


def test_execute_episode_errors(episode):
    s = pl.episode_start(episode)
    with pytest.raises(ValueError, match="unknown"):
        pl.execute_episode(s, pl.PlanningModels(), "bogus", FAST)
    with pytest.raises(ValueError, match="trained model"):
        pl.execute_episode(s, pl.PlanningModels(), "keyin", FAST)
    with pytest.raises(ValueError, match="oracle"):
        pl.execute_episode(s, pl.PlanningModels(), "oracle", FAST)


class PuckModel(torch.nn.Module):
    """Stand-in keyframe model: keyframe n shows the puck where latent n points."""

    def __init__(self, N=3, size=32):
        super().__init__()
        self.cfg = SimpleNamespace(N=N, latent_dim=2, image_size=size)
        self.renderer = Renderer(size)
        self.calls = []

    def encode(self, x):
        return x.flatten(2)[..., :4]

    def rollout(self, cond_emb, z):
        self.calls.append(len(z))
        pos = 0.5 + 0.25 * np.tanh(z.numpy())
        imgs = np.stack([self.renderer.render_arrays(np.tile([[0.05, 0.05]], (len(z), 1)), pos[:, n], FAR_WALL)
                         for n in range(self.cfg.N)], 1)
        return SimpleNamespace(images=torch.from_numpy(imgs))


def test_plan_subgoals_call_counts_and_determinism():
    model = PuckModel()
    cfg = pl.PlannerConfig(L=3, M_high=60, N_it=3)
    frame = render_px((20, 20))
    goal = render_px((40, 36))
    plan = pl.plan_subgoals(model, frame, goal, cfg, seed=5)
    assert model.calls == [60, 60, 60, 1]
    assert plan.subgoals.shape == (3, 32, 32, 3) and plan.latents.shape == (3, 2)
    assert plan.evaluations == 180 and np.isfinite(plan.best_cost)
    assert plan.best_cost <= cfg.d_switch
    again = pl.plan_subgoals(PuckModel(), frame, goal, cfg, seed=5)
    assert np.array_equal(plan.latents, again.latents)
    with pytest.raises(ValueError, match="must equal"):
        pl.plan_subgoals(model, frame, goal, pl.PlannerConfig(L=4))


def test_evaluate_planning_is_reproducible(tmp_path):
    eps = demo_push2d(3, seed=21)
    rows, traces = pl.evaluate_planning(eps, ["flat", "random"], pl.PlanningModels(), FAST, seed=2)
    rows2, _ = pl.evaluate_planning(eps, ["flat", "random"], pl.PlanningModels(), FAST, seed=2)
    assert rows == rows2
    assert [r["variant"] for r in rows] == ["initial", "flat", "random"]
    start = [np.linalg.norm(pl.episode_start(e).puck - pl.episode_start(e).goal) for e in eps]
    assert rows[0]["mean_error"] == pytest.approx(np.mean(start))
    pl.write_planning(rows, traces, tmp_path, FAST, dump_traces=True)
    header = (tmp_path / "planning.csv").read_text().splitlines()[0]
    assert header == "variant,mean_error,std_error,success_rate,episodes,seed"
    assert len(list((tmp_path / "traces").glob("*.bin"))) == 6
    assert pl.plot_planning(rows, tmp_path / "p.png").exists()


def test_planner_config_validation():
    with pytest.raises(ValueError):
        pl.PlannerConfig(elite_ratio=0)
    with pytest.raises(ValueError):
        pl.PlannerConfig(M=0)
