import math

import numpy as np
import pytest

from genvit import autodiff as ad
from genvit.diffusion import (
    CrossAttentionParams,
    LatentDiffusion,
    NoiseSchedule,
    SamplerConfig,
    Vae,
    add_noise,
    add_noise_batch,
    cfg_sample,
    cross_attention,
    diffusion_loss,
    sample_latents_batch,
    sample_timesteps,
    scaled_dot_attention,
    unet_predict,
    vae_decode,
    vae_encode,
)
from genvit.errors import InputError
from genvit.genhead import GenerationHead
from genvit.params import ParameterStore
from genvit.vlm import ModelConfig

CFG = ModelConfig(vocab_size=64, n_img=4, n_latents=8, d_u=64, head_layers=2).validate()


@pytest.fixture(scope="module")
def ld():
    store = ParameterStore(init_seed=11)
    return LatentDiffusion(store, CFG), store


def test_schedule_alpha_bar_matches_product_oracle():
    sched = NoiseSchedule()
    assert len(sched.betas) == 200
    # direct product evaluation
    prod = 1.0
    for t in range(1, sched.T + 1):
        prod *= 1.0 - sched.betas[t - 1]
        assert sched.alphas_bar[t] == pytest.approx(prod, rel=1e-12)
    assert sched.alphas_bar[0] == 1.0
    assert sched.alphas_bar[1] == pytest.approx(0.9999, abs=1e-12)
    assert np.all(np.diff(sched.alphas_bar) < 0)
    assert np.all((sched.betas > 0) & (sched.betas < 1))


def test_add_noise_identity_at_t0():
    sched = NoiseSchedule()
    o = np.random.default_rng(0).normal(size=(8, 8, 4)).astype(np.float32)
    eps = np.random.default_rng(1).normal(size=(8, 8, 4)).astype(np.float32)
    np.testing.assert_array_equal(add_noise(o, 0, eps, sched), o)


def test_add_noise_unit_variance_preserved():
    sched = NoiseSchedule()
    rng = np.random.default_rng(2)
    o = rng.normal(size=(64, 64, 4))
    eps = rng.normal(size=(64, 64, 4))
    z = add_noise(o, 120, eps, sched)
    # Var(z) = a_bar + (1 - a_bar) = 1 for independent unit-variance inputs
    assert z.var() == pytest.approx(1.0, abs=0.05)


def test_add_noise_matches_closed_form():
    sched = NoiseSchedule()
    o = np.full((2, 2, 1), 2.0)
    eps = np.full((2, 2, 1), -1.0)
    t = 77
    ab = sched.alphas_bar[t]
    expected = math.sqrt(ab) * 2.0 - math.sqrt(1 - ab)
    np.testing.assert_allclose(add_noise(o, t, eps, sched), expected, rtol=1e-6)


def test_add_noise_range_check():
    sched = NoiseSchedule()
    with pytest.raises(InputError):
        add_noise(np.zeros((2, 2, 1)), sched.T + 1, np.zeros((2, 2, 1)), sched)


def test_attention_identical_keys_average_values():
    out = scaled_dot_attention(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[2.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[3.0]], atol=1e-12)


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(5, 4))
    out = scaled_dot_attention(q, rng.normal(size=(1, 4)), np.array([[7.0, -2.0]]))
    np.testing.assert_allclose(out.data, np.tile([7.0, -2.0], (5, 1)), atol=1e-12)


def test_cross_attention_matches_formula_oracle():
    store = ParameterStore(init_seed=1, dtype=np.float64)
    params = CrossAttentionParams(store, "x", c_q=2, d_u=3, d_attn=2)
    rng = np.random.default_rng(4)
    qt = rng.normal(size=(3, 2))
    u = rng.normal(size=(4, 3))
    out = cross_attention(qt, u, params).data
    # hand-evaluated softmax formula
    q = qt @ params.wq.data
    k = u @ params.wk.data
    v = u @ params.wv.data
    scores = q @ k.T / math.sqrt(2)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    att = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, att @ v, rtol=1e-6, atol=1e-9)
    # rows of the attention matrix sum to 1; output is a convex combination
    assert np.allclose(att.sum(1), 1.0, atol=1e-6)


def test_cross_attention_dim_mismatch():
    store = ParameterStore(init_seed=1)
    params = CrossAttentionParams(store, "x", c_q=2, d_u=3, d_attn=2)
    with pytest.raises(InputError):
        cross_attention(np.zeros((3, 5)), np.zeros((4, 3)), params)


def test_vae_shapes_round_trip(ld):
    model, _ = ld
    img = np.random.default_rng(5).uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    lat = vae_encode(img, model.vae)
    assert lat.shape == (8, 8, 4)
    back = vae_decode(lat, model.vae)
    assert back.shape == (32, 32, 3)
    assert back.min() >= 0.0 and back.max() <= 1.0


def test_vae_zero_decoder_constant_output(ld):
    _, store = ld
    s2 = store.astype(np.float32)
    model2 = LatentDiffusion(s2, CFG)
    for name in s2.names():
        if name.startswith("vae/d"):
            s2.get(name).data[...] = 0.0
    out = vae_decode(np.random.default_rng(0).normal(size=(8, 8, 4)).astype(np.float32), model2.vae)
    assert np.allclose(out, out.reshape(-1)[0])


def test_unet_output_shape_and_conditioning_pathway(ld):
    model, _ = ld
    rng = np.random.default_rng(6)
    z = rng.normal(size=(8, 8, 4)).astype(np.float32)
    u1 = rng.normal(size=(CFG.n_latents, CFG.d_u)).astype(np.float32)
    u2 = u1 + rng.normal(size=u1.shape).astype(np.float32)
    # zero-init head blocks the output; nudge it so conditioning shows up
    model.unet.head.w.data[...] = rng.normal(0, 0.05, size=model.unet.head.w.shape).astype(np.float32)
    e1 = unet_predict(z, 50, u1, model.unet)
    e2 = unet_predict(z, 50, u2, model.unet)
    assert e1.shape == z.shape
    assert not np.allclose(e1, e2)
    model.unet.head.w.data[...] = 0.0


def test_diffusion_loss_zero_when_prediction_equals_noise(ld):
    model, _ = ld
    # with the zero-init head and zero biases, eps_hat == 0; compare to eps == 0
    rng = np.random.default_rng(7)
    latents = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    loss = diffusion_loss(latents, None, model, seed=3, cond_dropout=0.0)
    # eps_hat == 0 here, so loss == mean(eps^2); replicate the draw
    r2 = np.random.default_rng(3)
    r2.integers(1, model.schedule.T + 1, size=2)
    eps = r2.standard_normal(latents.shape).astype(np.float32)
    assert loss.item() == pytest.approx(float((eps**2).mean()), rel=1e-5)


def test_diffusion_loss_near_one_for_zero_prediction(ld):
    model, _ = ld
    rng = np.random.default_rng(8)
    latents = rng.normal(size=(8, 4, 8, 8)).astype(np.float32)
    loss = diffusion_loss(latents, None, model, seed=5, cond_dropout=0.0)
    assert loss.item() == pytest.approx(1.0, abs=0.1)


def test_diffusion_loss_replay_oracle(ld):
    """Two-example batch equals a step-by-step manual replay with the same seed."""
    model, _ = ld
    rng = np.random.default_rng(9)
    latents = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    u = rng.normal(size=(2, CFG.n_latents, CFG.d_u)).astype(np.float32)
    loss = diffusion_loss(latents, ad.Tensor(u), model, seed=21, cond_dropout=0.0)

    r = np.random.default_rng(21)
    t = r.integers(1, model.schedule.T + 1, size=2)
    eps = r.standard_normal(latents.shape).astype(np.float32)
    z = add_noise_batch(latents, t, eps, model.schedule)
    total = 0.0
    for i in range(2):
        eh = unet_predict(z[i].transpose(1, 2, 0), int(t[i]), u[i], model.unet)
        total += float(((eh.transpose(2, 0, 1) - eps[i]) ** 2).mean())
    assert loss.item() == pytest.approx(total / 2, rel=1e-5)


def test_diffusion_loss_empty_batch(ld):
    model, _ = ld
    with pytest.raises(InputError):
        diffusion_loss(np.zeros((0, 4, 8, 8), dtype=np.float32), None, model, seed=0)


def test_condition_dropout_one_equals_unconditional(ld):
    model, _ = ld
    rng = np.random.default_rng(10)
    latents = rng.normal(size=(3, 4, 8, 8)).astype(np.float32)
    u = rng.normal(size=(3, CFG.n_latents, CFG.d_u)).astype(np.float32)
    l_dropped = diffusion_loss(latents, ad.Tensor(u), model, seed=2, cond_dropout=1.0)
    # unconditional branch consumes no dropout draws; replicate by passing null as the condition
    with ad.no_grad():
        null = model.null_batch(3).data
    l_null = diffusion_loss(latents, ad.Tensor(null), model, seed=2, cond_dropout=1.0)
    assert l_dropped.item() == pytest.approx(l_null.item(), rel=1e-6)


def test_grad_flows_through_frozen_unet_to_head(ld):
    """Finite differences through the frozen UNet onto generation-head params."""
    _, store = ld
    s64 = store.astype(np.float64)
    model = LatentDiffusion(s64, CFG)
    head = GenerationHead(s64, CFG)
    # give the zero head conv some signal so the loss depends on conditioning
    rng = np.random.default_rng(12)
    model.unet.head.w.data[...] = rng.normal(0, 0.05, size=model.unet.head.w.shape)
    s64.freeze("unet")
    s64.freeze("vae")
    s64.freeze("null_cond")
    latents = rng.normal(size=(2, 4, 8, 8))
    img_states = rng.normal(size=(2, CFG.n_img, CFG.d_lm))

    def loss_fn():
        u = head(ad.Tensor(img_states))
        return diffusion_loss(latents, u, model, seed=4, cond_dropout=0.0)

    s64.zero_grads()
    loss_fn().backward()
    checked = 0
    eps = 1e-5
    for name, tensor in list(s64.trainable()):
        if not name.startswith("gen_head"):
            continue
        flat = tensor.data.ravel()
        i = int(np.random.default_rng(checked).integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        with ad.no_grad():
            up = loss_fn().item()
        flat[i] = orig - eps
        with ad.no_grad():
            dn = loss_fn().item()
        flat[i] = orig
        fd = (up - dn) / (2 * eps)
        an = tensor.grad.ravel()[i]
        assert an == pytest.approx(fd, rel=1e-4, abs=1e-8), name
        checked += 1
        if checked >= 6:
            break
    assert checked >= 5
    # frozen unet tensors accumulated no gradients
    for name in s64.names():
        if name.startswith("unet"):
            assert s64.get(name).grad is None


def test_cfg_identities_and_determinism(ld):
    model, _ = ld
    rng = np.random.default_rng(13)
    model.unet.head.w.data[...] = rng.normal(0, 0.05, size=model.unet.head.w.shape).astype(np.float32)
    u = rng.normal(size=(1, CFG.n_latents, CFG.d_u)).astype(np.float32)
    cfg1 = SamplerConfig(guidance_scale=1.0, sample_steps=10, seed=7)
    z_w1 = sample_latents_batch(u, cfg1, model)

    # reference conditional-only ancestral loop sharing the rng discipline
    sched = model.schedule
    r = np.random.default_rng(7)
    z = r.standard_normal((1, 4, 8, 8)).astype(np.float32)
    taus = sample_timesteps(sched, 10)
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        eh = unet_predict(z[0].transpose(1, 2, 0), t, u[0], model.unet).transpose(2, 0, 1)[None]
        ab_t, ab_prev = sched.alphas_bar[t], sched.alphas_bar[t_prev]
        x0 = (z - math.sqrt(1 - ab_t) * eh) / math.sqrt(ab_t)
        var = (1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)
        sigma = math.sqrt(max(var, 0.0))
        dirc = math.sqrt(max(1 - ab_prev - sigma**2, 0.0))
        noise = r.standard_normal(z.shape).astype(np.float32)
        z = (math.sqrt(ab_prev) * x0 + dirc * eh).astype(np.float32)
        if t_prev > 0:
            z = z + sigma * noise
    np.testing.assert_array_equal(z_w1, z)

    # w = 0 is bit-identical to unconditional-only
    cfg0 = SamplerConfig(guidance_scale=0.0, sample_steps=10, seed=7)
    z_w0 = sample_latents_batch(u, cfg0, model)
    z_un = sample_latents_batch(None, SamplerConfig(1.0, 10, 7), model, n=1)
    np.testing.assert_array_equal(z_w0, z_un)

    # same seed, same condition -> identical bytes
    img1 = cfg_sample(u[0], SamplerConfig(3.0, 10, 5), model)
    img2 = cfg_sample(u[0], SamplerConfig(3.0, 10, 5), model)
    np.testing.assert_array_equal(img1, img2)
    model.unet.head.w.data[...] = 0.0


def test_freeze_discipline_bytes(ld):
    model, store = ld
    before = store.tensor_bytes("vae") + store.tensor_bytes("unet")
    rng = np.random.default_rng(14)
    latents = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    store.freeze("vae")
    store.freeze("unet")
    store.freeze("null_cond")
    loss = diffusion_loss(latents, None, model, seed=1, cond_dropout=0.0)
    loss.backward()
    assert store.tensor_bytes("vae") + store.tensor_bytes("unet") == before
