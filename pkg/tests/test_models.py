import math

import numpy as np
import pytest
import torch

from keyin.models import DenseStochasticPredictor, KeyInModel, ModelConfig, kl_gaussian, preset

TINY = dict(image_size=16, channels=1, N=3, J=4, T=8, C=2, embed_dim=16, hidden_dim=24, latent_dim=4,
            inpaint_latent_dim=3, base_channels=4)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return KeyInModel(ModelConfig(**TINY)).eval()


def frames(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError, match="cover the horizon"):
        ModelConfig(N=2, J=3, T=10)
    with pytest.raises(ValueError):
        ModelConfig(image_size=24)
    with pytest.raises(ValueError):
        ModelConfig(fixed_offset=11, J=10)
    assert ModelConfig(image_size=64).enc_layers == 4 and ModelConfig().enc_layers == 3
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"bogus": 1})
    cfg = preset("sbm-desk")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        preset("nope")


# ---------------------------------------------------------------- encoder / decoder

def test_encode_decode_shapes(model):
    x = frames(5, 2, 16, 16, 1)
    e = model.encode(x)
    assert e.shape == (5, 2, 16)
    y = model.decode(e)
    assert y.shape == x.shape
    assert torch.all(y > 0) and torch.all(y < 1)


def test_encoder_batch_order(model):
    x = frames(4, 16, 16, 1)
    e = model.encode(x)
    e_rev = model.encode(x.flip(0))
    assert torch.allclose(e, e_rev.flip(0), atol=1e-6)


def test_encoder_rejects_wrong_shape(model):
    with pytest.raises(ValueError, match="expected frames"):
        model.encode(frames(2, 32, 32, 1))


# ---------------------------------------------------------------- keyframe predictor

def test_predict_keyframes_shapes_and_determinism(model):
    cond = frames(2, 2, 16, 16, 1)
    z = torch.randn(2, 3, 4, generator=torch.Generator().manual_seed(1))
    a = model.predict_keyframes(cond, z=z)
    b = model.predict_keyframes(cond, z=z)
    assert a.delta_logits.shape == (2, 3, 4) and a.images.shape == (2, 3, 16, 16, 1)
    assert torch.equal(a.images, b.images) and torch.equal(a.delta_logits, b.delta_logits)
    assert torch.allclose(a.delta.sum(-1), torch.ones(2, 3))


def test_predict_keyframes_checks_counts(model):
    with pytest.raises(ValueError, match="conditioning frames"):
        model.predict_keyframes(frames(1, 3, 16, 16, 1), z=torch.zeros(1, 3, 4))
    with pytest.raises(ValueError, match="latents"):
        model.predict_keyframes(frames(1, 2, 16, 16, 1), z=torch.zeros(1, 2, 4))


def test_posterior_kl_and_sigma(model):
    cond, tgt = frames(2, 2, 16, 16, 1), frames(2, 8, 16, 16, 1, seed=1)
    pred = model.predict_keyframes(cond, target_frames=tgt)
    assert torch.all(pred.sigma > 0) and torch.all(pred.kl >= 0)
    assert pred.attention.shape == (2, 3, 8)
    assert torch.allclose(pred.attention.sum(-1), torch.ones(2, 3), atol=1e-6)


def test_attention_is_convex():
    g = torch.Generator().manual_seed(3)
    q, keys = torch.randn(4, 6, generator=g), torch.randn(4, 10, 6, generator=g)
    mu, sig = torch.randn(4, 10, 5, generator=g), torch.rand(4, 10, 5, generator=g) + 0.1
    m, s, w = KeyInModel.attend(q, keys, mu, sig)
    assert torch.all(w > 0)
    assert torch.all(m >= mu.min(1).values - 1e-6) and torch.all(m <= mu.max(1).values + 1e-6)
    assert torch.all(s >= sig.min(1).values - 1e-6) and torch.all(s <= sig.max(1).values + 1e-6)
    same = mu[:, :1].expand_as(mu)
    m2, _, _ = KeyInModel.attend(q, keys * 100, same, sig)  # huge scores hit the clamp, still exact
    assert torch.allclose(m2, same[:, 0], atol=1e-6)


def test_inference_reads_frame_differences():
    torch.manual_seed(4)
    m = KeyInModel(ModelConfig(**TINY)).eval()
    assert m.inf_lstm.inp.in_features == 2 * TINY["embed_dim"]
    cond, tgt = torch.randn(2, 2, 16), torch.randn(2, 8, 16)
    keys, mu, sig = m.inference_outputs(cond, tgt)
    assert keys.shape == (2, 8, 16) and mu.shape == sig.shape == (2, 8, 4)
    # the difference channel starts at zero, so the first step sees only its embedding
    seq = torch.cat([cond, tgt], 1)
    manual = torch.cat([seq, torch.cat([torch.zeros(2, 1, 16), seq[:, 1:] - seq[:, :-1]], 1)], -1)
    out, _ = m.inf_lstm(manual)
    assert torch.allclose(out[:, 2:, :16], keys, atol=1e-6)
    off = KeyInModel(ModelConfig(**TINY, inference_differences=False))
    assert off.inf_lstm.inp.in_features == TINY["embed_dim"]


# ---------------------------------------------------------------- inpainter

def test_inpaint_shapes_and_range(model):
    ka, kb = torch.randn(3, 16), torch.randn(3, 16)
    f, e = model.inpaint(ka, kb, 2)
    assert f.shape == (3, 4, 16, 16, 1) and e.shape == (3, 4, 16)
    f2, _ = model.inpaint(ka, kb, 2)
    assert torch.equal(f, f2)
    onehot = torch.nn.functional.one_hot(torch.tensor(1), 4).float().expand(3, 4)
    f3, _ = model.inpaint(ka, kb, onehot)
    assert torch.allclose(f, f3)
    for bad in (0, 5):
        with pytest.raises(ValueError, match="offset"):
            model.inpaint(ka, kb, bad)


# ---------------------------------------------------------------- KL

def test_kl_gaussian_closed_form():
    assert float(kl_gaussian(torch.zeros(3), torch.ones(3))) == 0.0
    assert math.isclose(float(kl_gaussian(torch.ones(1), torch.ones(1))), 0.5)
    with pytest.raises(ValueError):
        kl_gaussian(torch.zeros(1), torch.zeros(1))


def test_kl_gaussian_monte_carlo():
    g = torch.Generator().manual_seed(0)
    mu_q, sig_q = torch.tensor([0.7, -0.3], dtype=torch.float64), torch.tensor([0.5, 1.6], dtype=torch.float64)
    x = mu_q + sig_q * torch.randn(1_000_000, 2, generator=g, dtype=torch.float64)
    log_q = torch.distributions.Normal(mu_q, sig_q).log_prob(x).sum(-1)
    log_p = torch.distributions.Normal(0.0, 1.0).log_prob(x).sum(-1)
    mc = float((log_q - log_p).mean())
    exact = float(kl_gaussian(mu_q, sig_q))
    assert abs(mc - exact) / exact < 0.01


# ---------------------------------------------------------------- objectives and gradient flow

def test_keyframe_objective_gradient_groups():
    torch.manual_seed(1)
    m = KeyInModel(ModelConfig(**TINY))
    cond, tgt = frames(4, 2, 16, 16, 1), frames(4, 8, 16, 16, 1, seed=2)
    for p in m.inpainter.parameters():
        p.requires_grad_(False)
    out = m.keyframe_objective(cond, tgt, eps=torch.randn(4, 3, 4))
    out["total"].backward()
    for name, params in m.parameter_groups().items():
        grads = [p.grad for p in params]
        if name == "inpainter":
            assert all(g is None for g in grads)
        else:
            assert any(g is not None and torch.any(g != 0) for g in grads), name
    assert torch.isfinite(out["total"])
    assert 0 < float(out["mean_c"].detach()) <= 1


def test_inpainter_loss_masks_past_offset():
    torch.manual_seed(2)
    m = KeyInModel(ModelConfig(**TINY))
    s, e = frames(2, 16, 16, 1), frames(2, 16, 16, 1, seed=1)
    between = frames(2, 4, 16, 16, 1, seed=2)
    offs = torch.tensor([2, 3])
    base = m.inpainter_loss(s, e, between, offs)
    changed = between.clone()
    changed[0, 2:] = 0.5  # frames past offset 2 of sequence 0
    changed[1, 3:] = 0.5
    assert torch.allclose(base["inpaint_recon"], m.inpainter_loss(s, e, changed, offs)["inpaint_recon"])
    assert torch.allclose(base["inpaint_mean_recon"], m.inpainter_loss(s, e, changed, offs)["inpaint_mean_recon"])


def test_inpainter_loss_trains_prior_mean_path():
    torch.manual_seed(3)
    m = KeyInModel(ModelConfig(**TINY))
    s, e = frames(2, 16, 16, 1), frames(2, 16, 16, 1, seed=1)
    between, offs, eps = frames(2, 4, 16, 16, 1, seed=2), torch.tensor([4, 3]), torch.randn(2, 3)
    with_mean = m.inpainter_loss(s, e, between, offs, eps)
    m.cfg.inpaint_mean_weight = 0.0
    without = m.inpainter_loss(s, e, between, offs, eps)
    assert "inpaint_mean_recon" not in without
    assert torch.allclose(with_mean["total"], without["total"] + with_mean["inpaint_mean_recon"])
    # the posterior sample and the prior mean give different reconstructions
    assert not torch.allclose(with_mean["inpaint_recon"], with_mean["inpaint_mean_recon"])
    with pytest.raises(ValueError, match="inpaint_mean_weight"):
        ModelConfig(**TINY, inpaint_mean_weight=-1)


def test_generate_times_are_cumulative(model):
    cond = frames(2, 2, 16, 16, 1)
    z = torch.randn(2, 3, 4, generator=torch.Generator().manual_seed(5))
    pred, seq, times = model.generate(cond, z)
    assert seq.shape == (2, 8, 16, 16, 1)
    offs = pred.delta.argmax(-1) + 1
    assert torch.equal(times, offs.cumsum(-1))


def test_fixed_offset_model_is_one_hot():
    m = KeyInModel(ModelConfig(**{**TINY, "fixed_offset": 3}))
    pred = m.predict_keyframes(frames(1, 2, 16, 16, 1), z=torch.zeros(1, 3, 4))
    assert torch.equal(pred.delta.argmax(-1), torch.full((1, 3), 2))
    assert torch.equal(pred.delta.sum(-1), torch.ones(1, 3))


# ---------------------------------------------------------------- dense predictor

def test_dense_predictor_rollout_and_kl():
    torch.manual_seed(3)
    d = DenseStochasticPredictor(ModelConfig(**TINY)).eval()
    cond, seq = frames(2, 2, 16, 16, 1), frames(2, 8, 16, 16, 1, seed=1)
    post = d(cond, seq)
    assert post.frames.shape == seq.shape and post.kl.shape == (2, 8) and torch.all(post.kl >= 0)
    prior = d(cond, z=torch.zeros(2, 8, 4))
    assert prior.frames.shape == seq.shape
    s = d.surprise(cond, seq)
    assert torch.allclose(s, post.kl, atol=1e-6)
    loss = d.loss(cond, seq)
    assert torch.isfinite(loss["total"])
