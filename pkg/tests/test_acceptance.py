"""Acceptance suite: one test per criterion, summarized one line each after the run.

Criteria 4 and 6 evaluate trained desk-preset artifacts found under the
cache root (``$KEYIN_CACHE``, default ``~/.cache/keyin``); they are skipped
when the artifacts are absent.  ``scripts/reproduce_desk.sh`` produces them.
Criterion 5 needs paper-preset artifacts and runs only with
``KEYIN_RELEASE=1``.  ``KEYIN_PLAN_EPISODES`` lowers the episode count of
criterion 6 for quick local runs (the criterion itself requires 100).
"""
import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from keyin import eval as ev
from keyin import planner as pl
from keyin import relax
from keyin.checkpoint import parameter_hash
from keyin.cli import cache_root
from keyin.datasets import gen_sbm, read_dataset
from keyin.models import ModelConfig
from keyin.training import (TrainConfig, Trainer, build_model, keyframer_from_inpainter, load_model,
                            prepare_frames)

D = torch.float64


def random_instance(rng, N, J, T, feat=3):
    delta = rng.dirichlet(np.ones(J) * 0.7, size=N)
    frames = rng.uniform(0.05, 0.95, size=(T, feat))
    pred = rng.uniform(0.05, 0.95, size=(N, J, feat))
    return delta, frames, pred


def kernel(delta, frames, pred, T):
    d = torch.as_tensor(delta, dtype=D)
    p = relax.compose_placements(d, T)
    K, usable = relax.soft_keyframe_targets(p, torch.as_tensor(frames, dtype=D))
    soft = relax.compose_soft_sequence(relax.placement_matrix(d, p, T), torch.as_tensor(pred, dtype=D))
    return p, K, usable, soft


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1)
def test_kernel_matches_enumeration(record_property):
    rng = np.random.default_rng(2024)
    start, worst = time.perf_counter(), 0.0
    for _ in range(500):
        N, J = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        T = int(rng.integers(1, min(8, N * J) + 1))
        delta, frames, pred = random_instance(rng, N, J, T)
        ref = relax.brute_force_targets(delta, frames, pred)
        p, K, _, soft = kernel(delta, frames, pred, T)
        v = ref["valid"]
        assert soft.valid.numpy().tolist() == v.tolist()
        errs = [np.abs(p.c.numpy() - ref["c"]).max(), np.abs(K.numpy() - ref["K"]).max(),
                np.abs(soft.frames.numpy()[v] - ref["I"][v]).max() if v.any() else 0.0,
                np.abs(p.tau.numpy()[:, :T] - enumerate_tau(delta, T)).max()]
        worst = max(worst, *errs)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max abs err {worst:.2e} over 500 instances in {elapsed:.1f}s")
    assert worst <= 1e-6 and elapsed < 60


def enumerate_tau(delta, T):
    N, J = delta.shape
    tau = np.zeros((N, T))
    for offs in itertools.product(range(1, J + 1), repeat=N):
        prob = np.prod([delta[n, o - 1] for n, o in enumerate(offs)])
        for n, t in enumerate(np.cumsum(offs)):
            if t <= T:
                tau[n, t - 1] += prob
    return tau


# ---------------------------------------------------------------- 2

def relaxed_total(logits, pred, frames, K_hat, kl, T):
    delta = torch.softmax(logits, -1)
    p = relax.compose_placements(delta, T)
    K_t, _ = relax.soft_keyframe_targets(p, frames)
    key = relax.keyframe_loss(K_hat, K_t, kl, p.c, 0.5)
    soft = relax.compose_soft_sequence(relax.placement_matrix(delta, p, T), pred)
    return relax.total_loss(key, frames, soft, 1.0)


@pytest.mark.criterion(2)
def test_gradients_match_finite_differences(record_property):
    rng = np.random.default_rng(7)
    h, worst = 1e-4, 0.0
    start = time.perf_counter()
    for _ in range(50):
        N, J = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        T = int(rng.integers(2, min(8, N * J) + 1))
        logits = torch.tensor(rng.normal(0, 1, (N, J)), dtype=D, requires_grad=True)
        pred = torch.tensor(rng.uniform(0.1, 0.9, (N, J, 3)), dtype=D, requires_grad=True)
        frames = torch.tensor(rng.uniform(0.1, 0.9, (T, 3)), dtype=D)
        K_hat = torch.tensor(rng.uniform(0.1, 0.9, (N, 3)), dtype=D)
        kl = torch.tensor(rng.uniform(0, 2, N), dtype=D)
        f = lambda lg, pr: relaxed_total(lg, pr, frames, K_hat, kl, T)
        g_logits, g_pred = torch.autograd.grad(f(logits, pred), (logits, pred))
        for var, grad, other in ((logits, g_logits, 0), (pred, g_pred, 1)):
            fd = torch.zeros_like(var)
            base = var.detach()
            for idx in np.ndindex(*var.shape):
                plus, minus = base.clone(), base.clone()
                plus[idx] += h
                minus[idx] -= h
                args_p = (plus, pred.detach()) if other == 0 else (logits.detach(), plus)
                args_m = (minus, pred.detach()) if other == 0 else (logits.detach(), minus)
                fd[idx] = (f(*args_p) - f(*args_m)) / (2 * h)
            rel = float((grad - fd).norm() / max(float(fd.norm()), 1e-8))
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max relative error {worst:.2e} over 50 instances in {elapsed:.1f}s")
    assert worst <= 1e-3 and elapsed < 300


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3)
def test_one_hot_collapse(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        N, J = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        T = int(rng.integers(1, N * J + 1))
        offsets = [int(o) for o in rng.integers(1, J + 1, N)]
        if offsets[0] > T:
            offsets[0] = int(rng.integers(1, min(J, T) + 1))  # first keyframe in horizon keeps the loss defined
        d = torch.zeros(N, J, dtype=D)
        d[torch.arange(N), torch.tensor(offsets) - 1] = 1
        frames = torch.tensor(rng.uniform(0.1, 0.9, (T, 4)), dtype=D)
        pred = torch.tensor(rng.uniform(0.1, 0.9, (N, J, 4)), dtype=D)
        K_hat = torch.tensor(rng.uniform(0.1, 0.9, (N, 4)), dtype=D)
        kl = torch.tensor(rng.uniform(0, 2, N), dtype=D)
        p = relax.compose_placements(d, T)
        K_t, _ = relax.soft_keyframe_targets(p, frames)
        key = relax.keyframe_loss(K_hat, K_t, kl, p.c, 0.3)
        soft = relax.compose_soft_sequence(relax.placement_matrix(d, p, T), pred)
        relaxed = relax.total_loss(key, frames, soft, 1.0)
        direct = relax.discrete_loss(offsets, frames, K_hat, pred, kl, 0.3, 1.0)
        worst = max(worst, abs(float(relaxed - direct)))
    record_property("detail", f"max |relaxed - discrete| {worst:.2e} over 200 placements")
    assert worst <= 1e-6


# ---------------------------------------------------------------- 4 and 5

def discovery(root: Path, record_property, tag):
    needed = [root / "test", root / "train", root / "stage2" / "checkpoint.zip", root / "dense" / "checkpoint.zip"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        pytest.skip(f"{tag} artifacts missing: {', '.join(missing)}")
    keyin, _ = load_model(root / "stage2" / "checkpoint.zip")
    dense, _ = load_model(root / "dense" / "checkpoint.zip")
    cfg = keyin.cfg
    reports, _ = ev.discovery_table(read_dataset(root / "test"), read_dataset(root / "train"), cfg.N, cfg.T, cfg.C,
                                    keyin=keyin, dense=dense, image_size=cfg.image_size, seed=0, tol=1)
    f = {r.method: r.f1 for r in reports}
    record_property("detail", " ".join(f"{k}={v:.3f}" for k, v in f.items()))
    return f


@pytest.mark.criterion(4)
def test_sbm_discovery_desk(record_property):
    f = discovery(cache_root() / "sbm-desk", record_property, "desk")
    assert f["keyin-posterior"] >= 0.70
    assert f["keyin-posterior"] > f["surprise"] > f["static"] > f["random"]


@pytest.mark.criterion(5)
def test_sbm_discovery_paper(record_property):
    if os.environ.get("KEYIN_RELEASE") != "1":
        pytest.skip("paper-scale training; set KEYIN_RELEASE=1 with sbm-paper artifacts in the cache")
    f = discovery(cache_root() / "sbm-paper", record_property, "paper")
    assert f["keyin-posterior"] >= 0.85
    assert abs(f["random"] - 0.15) <= 0.05
    assert abs(f["static"] - 0.21) <= 0.07


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6)
def test_planning_directional(record_property):
    root = cache_root() / "push-desk"
    needed = [root / "test", root / "stage2" / "checkpoint.zip"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        pytest.skip(f"push artifacts missing: {', '.join(missing)}")
    n = int(os.environ.get("KEYIN_PLAN_EPISODES", "100"))
    episodes = read_dataset(root / "test").episodes[:n]
    model, _ = load_model(root / "stage2" / "checkpoint.zip")
    start = time.perf_counter()
    rows, _ = pl.evaluate_planning(episodes, ["flat", "keyin", "random"], pl.PlanningModels(keyin=model),
                                   pl.PlannerConfig(L=model.cfg.N), seed=0)
    r = {row["variant"]: row for row in rows}
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(episodes)} episodes in {elapsed / 60:.1f} min; " + " ".join(
        f"{k}: err={v['mean_error']:.3f} succ={100 * v['success_rate']:.0f}%" for k, v in r.items()))
    assert len(episodes) >= 100, "criterion requires at least 100 episodes"
    assert r["keyin"]["mean_error"] < r["flat"]["mean_error"]
    assert r["keyin"]["success_rate"] >= r["flat"]["success_rate"] + 0.20
    assert abs(r["random"]["mean_error"] - r["initial"]["mean_error"]) <= 0.05 * r["initial"]["mean_error"]
    assert elapsed <= 2 * 3600


# ---------------------------------------------------------------- 7

TINY = ModelConfig(image_size=8, channels=1, N=2, J=3, T=5, C=2, embed_dim=8, hidden_dim=12, latent_dim=3,
                   inpaint_latent_dim=2, base_channels=4)


@pytest.mark.criterion(7)
def test_training_contracts(tmp_path, record_property):
    frames = prepare_frames(gen_sbm(10, 12, H=16, W=16, radius=2.0, speed=1.5, seed=1), 8)
    cfg1 = TrainConfig(stage=1, iterations=100, batch_size=4, offset_max=3, seed=5, checkpoint_every=0)

    runs = []
    for _ in range(2):
        t = Trainer(build_model("inpainter", TINY, 5), "inpainter", cfg1, frames, tmp_path / f"s1_{len(runs)}")
        log = t.run()
        runs.append(([r["total"] for r in log.rows], parameter_hash(t.model)))
    assert runs[0] == runs[1], "100-iteration runs with one seed differ"

    cfg2 = TrainConfig(stage=2, iterations=0, batch_size=4, seed=5, checkpoint_every=0)
    k = keyframer_from_inpainter(tmp_path / "s1_0" / "checkpoint.zip", cfg2, frames)
    max_frozen = 0.0
    for _ in range(20):
        batch = k.sample_batch()
        k.optimizer.zero_grad(set_to_none=True)
        k.objective(batch)["total"].backward()
        for p in k.model.inpainter.parameters():
            if p.grad is not None:
                max_frozen = max(max_frozen, float(p.grad.abs().max()))
        k.optimizer.step()
    assert max_frozen == 0.0
    assert parameter_hash(k.model.inpainter) == k.extra_meta["inpainter_hash"]

    path = k.save(tmp_path / "k.zip")
    loaded, _ = load_model(path)
    k.model.eval()
    g = torch.Generator().manual_seed(0)
    cond = torch.rand(3, TINY.C, 8, 8, 1, generator=g)
    z = torch.randn(3, TINY.N, TINY.latent_dim, generator=g)
    with torch.no_grad():
        a, b = k.model.generate(cond, z), loaded.generate(cond, z)
    assert torch.equal(a[1], b[1]) and torch.equal(a[0].delta, b[0].delta)
    record_property("detail", "bit-identical 100-iteration runs; frozen grad max 0.0; round-trip outputs equal")


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8)
def test_metric_self_tests(record_property):
    rng = np.random.default_rng(0)
    x = rng.random((4, 16, 16, 3))
    assert ev.ssim(x, x) == 1.0
    base = np.full((2, 8, 8, 1), 0.3)
    p = ev.psnr(base, base + 0.1)
    assert abs(p - 20.0) < 1e-9
    m = ev.f1([3, 10], [4, 20])
    assert (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)
    assert ev.f1([5, 6], [5, 6]).f1 == 1.0
    assert ev.f1([4, 5], [5]).true_positives == 1
    assert ev.f1([3], [5], tol=1).f1 == 0.0
    assert ev.min_distances([0, 10], [4]) == (5.0, 4.0)
    record_property("detail", f"SSIM(x,x)=1, PSNR(+0.1)={p:.12f} dB, F1 hand cases")


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9)
def test_cem_quadratic_bowl(record_property):
    hits = 0
    for seed in range(20):
        target = np.random.default_rng(500 + seed).uniform(-1, 1, 4)
        res = pl.cem(4, lambda x: x, lambda x: ((x - target) ** 2).sum(1), M=200, r=0.05, N_it=3, seed=seed)
        hits += np.linalg.norm(res.best - target) < 0.2
    record_property("detail", f"{hits}/20 trials within 0.2")
    assert hits >= 19
