import numpy as np
import pytest

from genvit import autodiff as ad
from genvit.errors import InputError, RoutingError
from genvit.genhead import GenerationHead, batch_img_states, extract_img_states, head_forward
from genvit.params import ParameterStore
from genvit.vlm import LMState, ModelConfig

CFG = ModelConfig(vocab_size=64, n_img=4, n_latents=8, d_u=64, head_layers=2).validate()


@pytest.fixture(scope="module")
def head():
    store = ParameterStore(init_seed=3)
    return GenerationHead(store, CFG), store


def test_extract_zero_hidden_gives_embedding():
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(CFG.d_lm,)))
    state = LMState(logits=None, hidden=np.zeros((1, 10, CFG.d_lm)), prefix_len=0)
    out = extract_img_states(state, [2, 3, 4, 5], emb, CFG.n_img)
    np.testing.assert_allclose(out.data, np.tile(emb.data, (4, 1)))


def test_extract_matches_gather_add_oracle():
    rng = np.random.default_rng(4)
    hidden = rng.normal(size=(1, 14, CFG.d_lm))
    emb = rng.normal(size=(CFG.d_lm,))
    positions = [1, 4, 7, 9]
    prefix = 3
    state = LMState(logits=None, hidden=ad.Tensor(hidden), prefix_len=prefix)
    out = extract_img_states(state, positions, ad.Tensor(emb), CFG.n_img)
    expected = np.stack([hidden[0, p + prefix] + emb for p in positions])
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)
    assert out.shape == (CFG.n_img, CFG.d_lm)


def test_extract_wrong_count_raises():
    state = LMState(logits=None, hidden=np.zeros((1, 8, CFG.d_lm)), prefix_len=0)
    with pytest.raises(RoutingError):
        extract_img_states(state, [1, 2], ad.Tensor(np.zeros(CFG.d_lm)), CFG.n_img)


def test_batch_gather_matches_single():
    rng = np.random.default_rng(8)
    hidden = ad.Tensor(rng.normal(size=(2, 14, CFG.d_lm)))
    emb = ad.Tensor(rng.normal(size=(CFG.d_lm,)))
    positions = np.array([[0, 2, 4, 6], [1, 3, 5, 7]])
    out = batch_img_states(hidden, 2, positions, emb).data
    for b in range(2):
        state = LMState(None, ad.Tensor(hidden.data[b : b + 1]), prefix_len=2)
        single = extract_img_states(state, positions[b], emb, CFG.n_img).data
        np.testing.assert_allclose(out[b], single, rtol=1e-6)


def test_head_output_shape(head):
    h, _ = head
    rng = np.random.default_rng(1)
    with ad.no_grad():
        out = head_forward(rng.normal(size=(CFG.n_img, CFG.d_lm)), h)
        assert out.shape == (8, 64)
        out_b = head_forward(rng.normal(size=(3, CFG.n_img, CFG.d_lm)), h)
    assert out_b.shape == (3, 8, 64)


def test_head_input_dim_check(head):
    h, _ = head
    with pytest.raises(InputError):
        head_forward(np.zeros((CFG.n_img + 1, CFG.d_lm)), h)


def test_causal_queries(head):
    """Latent row j is invariant to perturbing learnable queries at positions > j."""
    h, store = head
    rng = np.random.default_rng(2)
    x = rng.normal(size=(CFG.n_img, CFG.d_lm))
    with ad.no_grad():
        base = head_forward(x, h).data.copy()
    j = 3
    orig = h.queries.data.copy()
    h.queries.data[j + 1 :] += rng.normal(size=(CFG.n_latents - j - 1, CFG.d_lm)).astype(h.queries.dtype)
    with ad.no_grad():
        pert = head_forward(x, h).data
    h.queries.data[...] = orig
    np.testing.assert_array_equal(base[: j + 1], pert[: j + 1])
    assert np.abs(base[j + 1 :] - pert[j + 1 :]).max() > 1e-3


def test_non_causal_variant_mixes_all_queries():
    cfg = ModelConfig(vocab_size=64, n_img=4, n_latents=8, head_layers=2, gen_head_causal=False).validate()
    store = ParameterStore(init_seed=3)
    h = GenerationHead(store, cfg)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(cfg.n_img, cfg.d_lm))
    with ad.no_grad():
        base = head_forward(x, h).data.copy()
    h.queries.data[-1] += rng.normal(size=cfg.d_lm).astype(h.queries.dtype)
    with ad.no_grad():
        pert = head_forward(x, h).data
    assert np.abs(base[0] - pert[0]).max() > 1e-4  # earlier rows see later queries


def test_gradient_matches_finite_difference():
    store = ParameterStore(init_seed=5, dtype=np.float64)
    h = GenerationHead(store, CFG)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(CFG.n_img, CFG.d_lm))
    target = rng.normal(size=(CFG.n_latents, CFG.d_u))

    def loss_fn():
        out = head_forward(x, h)
        diff = ad.sub(out, target)
        return ad.mean(ad.mul(diff, diff))

    loss = loss_fn()
    loss.backward()
    w = h.encoder[0].attn.qkv.w
    picks = [(0, 0), (3, 17), (CFG.d_lm - 1, 2)]
    eps = 1e-5
    for i, j in picks:
        orig = w.data[i, j]
        w.data[i, j] = orig + eps
        with ad.no_grad():
            up = loss_fn().item()
        w.data[i, j] = orig - eps
        with ad.no_grad():
            dn = loss_fn().item()
        w.data[i, j] = orig
        fd = (up - dn) / (2 * eps)
        assert w.grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_every_head_parameter_receives_gradient():
    store = ParameterStore(init_seed=9, dtype=np.float64)
    h = GenerationHead(store, CFG)
    x = np.random.default_rng(3).normal(size=(2, CFG.n_img, CFG.d_lm))
    out = head_forward(x, h)
    ad.mean(ad.mul(out, out)).backward()
    for name, t in store.trainable():
        assert t.grad is not None and np.any(t.grad != 0), f"no gradient reached {name}"
