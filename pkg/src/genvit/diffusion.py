"""Toy latent diffusion decoder: VAE, UNet with one cross-attention layer
conditioned on the visual latent set, closed-form forward noising, noise
prediction loss with condition dropout, and a strided ancestral sampler with
classifier-free guidance.

Pretrained once, then frozen; during instruction tuning gradients flow
*through* the frozen UNet into the conditioning latents.

Public single-example tensors are (h, w, c); batched internals are NCHW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ModelStateError
from .nn import Conv2d, LayerNorm, Linear, sinusoidal_embedding
from .params import ParameterStore
from .vlm import ModelConfig

TEMB_DIM = 64


@dataclass
class NoiseSchedule:
    steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps, dtype=np.float64)
        # alphas_bar[0] = 1 by convention; alphas_bar[t] = prod_{s<=t}(1 - beta_s)
        self.alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @property
    def T(self) -> int:
        return self.steps


@dataclass
class SamplerConfig:
    guidance_scale: float = 3.0
    sample_steps: int = 50
    seed: int = 0


def add_noise(o: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward process z_t = sqrt(a_bar) o + sqrt(1 - a_bar) eps."""
    if not 0 <= t <= schedule.T:
        raise InputError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule.alphas_bar[t]
    return (math.sqrt(ab) * o + math.sqrt(1.0 - ab) * eps).astype(o.dtype)


def add_noise_batch(o: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alphas_bar[t].reshape(-1, 1, 1, 1)
    return (np.sqrt(ab) * o + np.sqrt(1.0 - ab) * eps).astype(o.dtype)


# -- VAE ------------------------------------------------------------------------


class Vae:
    """Conv encoder to a 4x-downsampled latent (mu, logvar) and conv decoder."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "vae"):
        self.cfg = cfg
        c = cfg.latent_channels
        self.e1 = Conv2d(store, f"{prefix}/e1", 3, 24)
        self.e2 = Conv2d(store, f"{prefix}/e2", 24, 32, stride=2)
        self.e3 = Conv2d(store, f"{prefix}/e3", 32, 48, stride=2)
        self.e4 = Conv2d(store, f"{prefix}/e4", 48, 2 * c, k=1, padding=0)
        self.d1 = Conv2d(store, f"{prefix}/d1", c, 48)
        self.d2 = Conv2d(store, f"{prefix}/d2", 48, 32)
        self.d3 = Conv2d(store, f"{prefix}/d3", 32, 24)
        self.d4 = Conv2d(store, f"{prefix}/d4", 24, 3)
        self.latent_scale = store.param(f"{prefix}/latent_scale", (1,), lambda rng: np.ones(1))

    def encode(self, images_nchw) -> tuple[Tensor, Tensor]:
        x = images_nchw if isinstance(images_nchw, Tensor) else Tensor(np.asarray(images_nchw))
        if x.shape[-1] != self.cfg.image_size or x.shape[1] != 3:
            raise InputError(f"vae.encode expects (B,3,{self.cfg.image_size},{self.cfg.image_size}), got {tuple(x.shape)}")
        h = ad.gelu(self.e1(x))
        h = ad.gelu(self.e2(h))
        h = ad.gelu(self.e3(h))
        both = self.e4(h)
        c = self.cfg.latent_channels
        return both[:, 0:c], both[:, c : 2 * c]

    def decode(self, z) -> Tensor:
        """Raw decoder output (pre-clamp), NCHW."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        h = ad.gelu(self.d1(z))
        h = ad.gelu(self.d2(ad.upsample_nearest_2x(h)))
        h = ad.gelu(self.d3(ad.upsample_nearest_2x(h)))
        return self.d4(h)


def vae_encode(image_hwc: np.ndarray, vae: Vae) -> np.ndarray:
    """Single image (H,W,3) -> latent mean (h,w,c), deterministic."""
    with ad.no_grad():
        mu, _ = vae.encode(image_hwc.transpose(2, 0, 1)[None])
    return mu.data[0].transpose(1, 2, 0)


def vae_decode(latent_hwc: np.ndarray, vae: Vae) -> np.ndarray:
    """Latent (h,w,c) -> image (H,W,3), clamped to [0,1]."""
    c = vae.cfg.latent_channels
    if latent_hwc.shape != (vae.cfg.latent_size, vae.cfg.latent_size, c):
        raise InputError(f"latent must be {(vae.cfg.latent_size, vae.cfg.latent_size, c)}, got {latent_hwc.shape}")
    with ad.no_grad():
        img = vae.decode(latent_hwc.transpose(2, 0, 1)[None])
    return np.clip(img.data[0].transpose(1, 2, 0), 0.0, 1.0)


# -- Eq.3 cross-attention ----------------------------------------------------------


def scaled_dot_attention(q, k, v):
    """softmax(Q K^T / sqrt(key_dim)) V on 2-D or batched operands."""
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    k = k if isinstance(k, Tensor) else Tensor(np.asarray(k, dtype=q.dtype))
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=q.dtype))
    scale = 1.0 / math.sqrt(k.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class CrossAttentionParams:
    def __init__(self, store: ParameterStore, name: str, c_q: int, d_u: int, d_attn: int):
        std = 0.02
        self.wq = store.param(f"{name}/wq", (c_q, d_attn), lambda rng: rng.normal(0, std, (c_q, d_attn)))
        self.wk = store.param(f"{name}/wk", (d_u, d_attn), lambda rng: rng.normal(0, std, (d_u, d_attn)))
        self.wv = store.param(f"{name}/wv", (d_u, d_attn), lambda rng: rng.normal(0, std, (d_u, d_attn)))


def cross_attention(q_tokens, latent_set, params: CrossAttentionParams):
    """Q = q_tokens Wq, K = U Wk, V = U Wv, then scaled-dot attention.

    q_tokens: (M, c) flattened latent tokens (or batched (B, M, c));
    latent_set: (L, d_u) or (B, L, d_u).
    """
    q_tokens = q_tokens if isinstance(q_tokens, Tensor) else Tensor(np.asarray(q_tokens))
    latent_set = latent_set if isinstance(latent_set, Tensor) else Tensor(np.asarray(latent_set))
    if q_tokens.shape[-1] != params.wq.shape[0]:
        raise InputError(f"query token dim {q_tokens.shape[-1]} != Wq rows {params.wq.shape[0]}")
    if latent_set.shape[-1] != params.wk.shape[0]:
        raise InputError(f"latent set dim {latent_set.shape[-1]} != Wk rows {params.wk.shape[0]}")
    q = ad.matmul(q_tokens, params.wq)
    k = ad.matmul(latent_set, params.wk)
    v = ad.matmul(latent_set, params.wv)
    return scaled_dot_attention(q, k, v)


# -- UNet ---------------------------------------------------------------------------


class ResBlock:
    def __init__(self, store, name, c_in: int, c_out: int):
        self.conv1 = Conv2d(store, f"{name}/conv1", c_in, c_out)
        self.conv2 = Conv2d(store, f"{name}/conv2", c_out, c_out)
        self.temb = Linear(store, f"{name}/temb", TEMB_DIM, c_out)
        self.skip = Conv2d(store, f"{name}/skip", c_in, c_out, k=1, padding=0) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(x)
        bias = ad.reshape(self.temb(temb), (temb.shape[0], h.shape[1], 1, 1))
        h = self.conv2(ad.gelu(ad.add(h, bias)))
        res = self.skip(x) if self.skip is not None else x
        return ad.add(res, h)


class UNet:
    """2 conv down blocks, a middle block with one cross-attention layer over
    the visual latent set, 2 conv up blocks with skip connections."""

    CH = (32, 48, 64)

    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "unet"):
        self.cfg = cfg
        c = cfg.latent_channels
        c0, c1, c2 = self.CH
        self.t1 = Linear(store, f"{prefix}/temb1", TEMB_DIM, TEMB_DIM)
        self.t2 = Linear(store, f"{prefix}/temb2", TEMB_DIM, TEMB_DIM)
        self.stem = Conv2d(store, f"{prefix}/stem", c, c0)
        self.res_d1 = ResBlock(store, f"{prefix}/res_d1", c0, c0)
        self.down1 = Conv2d(store, f"{prefix}/down1", c0, c1, stride=2)
        self.res_d2 = ResBlock(store, f"{prefix}/res_d2", c1, c1)
        self.down2 = Conv2d(store, f"{prefix}/down2", c1, c2, stride=2)
        self.res_m1 = ResBlock(store, f"{prefix}/res_m1", c2, c2)
        self.ln_attn = LayerNorm(store, f"{prefix}/ln_attn", c2)
        self.cross = CrossAttentionParams(store, f"{prefix}/cross", c2, cfg.d_u, c2)
        self.cross_out = Linear(store, f"{prefix}/cross_out", c2, c2)
        self.res_m2 = ResBlock(store, f"{prefix}/res_m2", c2, c2)
        self.res_u2 = ResBlock(store, f"{prefix}/res_u2", c2 + c1, c1)
        self.res_u1 = ResBlock(store, f"{prefix}/res_u1", c1 + c0, c0)
        # zero-init head: the untrained UNet predicts zero noise
        self.head = Conv2d(store, f"{prefix}/head", c0, c, init_std=0.0)

    def __call__(self, z, t, latent_set) -> Tensor:
        """z (B,c,h,w); t (B,) ints; latent_set (B,L,d_u) Tensor or array."""
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        u = latent_set if isinstance(latent_set, Tensor) else Tensor(np.asarray(latent_set))
        b = z.shape[0]
        if u.ndim != 3 or u.shape[0] != b or u.shape[-1] != self.cfg.d_u:
            raise InputError(f"latent set must be (B,L,{self.cfg.d_u}), got {tuple(u.shape)}")
        temb = Tensor(sinusoidal_embedding(np.asarray(t).reshape(-1), TEMB_DIM, dtype=z.dtype))
        temb = self.t2(ad.gelu(self.t1(temb)))

        h0 = self.stem(z)
        s1 = self.res_d1(h0, temb)
        h = self.down1(s1)
        s2 = self.res_d2(h, temb)
        h = self.down2(s2)

        h = self.res_m1(h, temb)
        bb, cc, hh, ww = h.shape
        tokens = ad.transpose(ad.reshape(h, (bb, cc, hh * ww)), (0, 2, 1))
        att = cross_attention(self.ln_attn(tokens), u, self.cross)
        att = self.cross_out(att)
        h = ad.add(h, ad.reshape(ad.transpose(att, (0, 2, 1)), (bb, cc, hh, ww)))
        h = self.res_m2(h, temb)

        h = ad.upsample_nearest_2x(h)
        h = self.res_u2(ad.concat([h, s2], axis=1), temb)
        h = ad.upsample_nearest_2x(h)
        h = self.res_u1(ad.concat([h, s1], axis=1), temb)
        return self.head(h)


def unet_predict(z_hwc: np.ndarray, t: int, latent_set: np.ndarray, unet: UNet) -> np.ndarray:
    """Single-example noise prediction, (h,w,c) in and out."""
    with ad.no_grad():
        out = unet(z_hwc.transpose(2, 0, 1)[None], np.array([t]), np.asarray(latent_set)[None])
    return out.data[0].transpose(1, 2, 0)


# -- bundle, loss, sampler -------------------------------------------------------------


class LatentDiffusion:
    def __init__(self, store: ParameterStore, cfg: ModelConfig, schedule: NoiseSchedule | None = None):
        self.cfg = cfg
        self.vae = Vae(store, cfg)
        self.unet = UNet(store, cfg)
        self.null_cond = store.param(
            "null_cond/embedding",
            (cfg.n_latents, cfg.d_u),
            lambda rng: rng.normal(0, 0.02, (cfg.n_latents, cfg.d_u)),
        )
        self.schedule = schedule or NoiseSchedule()

    def encode_scaled(self, images_hwc: np.ndarray) -> np.ndarray:
        """Batched deterministic latents scaled to ~unit variance, NCHW."""
        with ad.no_grad():
            mu, _ = self.vae.encode(np.transpose(images_hwc, (0, 3, 1, 2)))
        return (mu.data / self.vae.latent_scale.data[0]).astype(mu.dtype)

    def decode_scaled(self, z_nchw: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            img = self.vae.decode(z_nchw * self.vae.latent_scale.data[0])
        return np.clip(np.transpose(img.data, (0, 2, 3, 1)), 0.0, 1.0)

    def null_batch(self, b: int):
        null = ad.reshape(self.null_cond, (1, self.cfg.n_latents, self.cfg.d_u))
        return ad.add(null, Tensor(np.zeros((b, 1, 1), dtype=null.dtype)))


def diffusion_loss(
    latents: np.ndarray,
    latent_sets,
    ld: LatentDiffusion,
    seed: int,
    cond_dropout: float = 0.1,
) -> Tensor:
    """Mean squared noise-prediction error over a batch.

    latents: (B,c,h,w) clean (scaled) latents; latent_sets: (B,L,d_u) Tensor
    or None for unconditional. Per-example timesteps, noise, and dropout are
    drawn from `seed` in that order.
    """
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise InputError("diffusion_loss expects a non-empty (B,c,h,w) batch")
    b = latents.shape[0]
    rng = np.random.default_rng(seed)
    t = rng.integers(1, ld.schedule.T + 1, size=b)
    eps = rng.standard_normal(latents.shape).astype(latents.dtype)
    z = add_noise_batch(latents, t, eps, ld.schedule)
    if latent_sets is None:
        u_eff = ld.null_batch(b)
    else:
        u = latent_sets if isinstance(latent_sets, Tensor) else Tensor(np.asarray(latent_sets))
        if cond_dropout > 0.0:
            m = (rng.uniform(size=b) < cond_dropout).astype(latents.dtype).reshape(b, 1, 1)
            keep = ad.mul(u, 1.0 - m)
            dropped = ad.mul(ld.null_batch(b), m)
            u_eff = ad.add(keep, dropped)
        else:
            u_eff = u
    eps_hat = ld.unet(z, t, u_eff)
    diff = ad.sub(eps_hat, Tensor(eps))
    return ad.mean(ad.mul(diff, diff))


def sample_timesteps(schedule: NoiseSchedule, steps: int) -> list[int]:
    """Evenly strided descending subset of [1, T]."""
    if steps > schedule.T:
        raise InputError(f"sample_steps {steps} > schedule steps {schedule.T}")
    taus = np.unique(np.linspace(1, schedule.T, steps).round().astype(int))[::-1]
    return [int(t) for t in taus]


def sample_latents_batch(latent_sets: np.ndarray | None, cfg: SamplerConfig, ld: LatentDiffusion, n: int | None = None) -> np.ndarray:
    """Ancestral sampling with classifier-free guidance; returns (B,c,h,w).

    Noise draws: one initial standard normal plus one per step, independent of
    the guidance branch, so w=1.0 is bit-identical to conditional-only
    sampling and w=0.0 to unconditional-only.
    """
    if cfg.guidance_scale < 0:
        raise InputError("guidance scale must be >= 0")
    if latent_sets is None and ld.null_cond is None:
        raise ModelStateError("unconditional sampling requires the learned null embedding")
    b = n if latent_sets is None else np.asarray(latent_sets).shape[0]
    sched = ld.schedule
    c, hw = ld.cfg.latent_channels, ld.cfg.latent_size
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((b, c, hw, hw)).astype(np.float32)
    taus = sample_timesteps(sched, cfg.sample_steps)
    w = cfg.guidance_scale

    with ad.no_grad():
        null = ld.null_batch(b).data
        cond = None if latent_sets is None else np.asarray(latent_sets, dtype=np.float32)
        for i, t in enumerate(taus):
            t_prev = taus[i + 1] if i + 1 < len(taus) else 0
            tb = np.full(b, t)
            if latent_sets is None or w == 0.0:
                eps_hat = ld.unet(z, tb, null).data
            elif w == 1.0:
                eps_hat = ld.unet(z, tb, cond).data
            else:
                both = ld.unet(np.concatenate([z, z]), np.concatenate([tb, tb]), np.concatenate([null, cond])).data
                e_null, e_cond = both[:b], both[b:]
                eps_hat = e_null + w * (e_cond - e_null)
            ab_t = sched.alphas_bar[t]
            ab_prev = sched.alphas_bar[t_prev]
            x0 = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
            sigma = math.sqrt(max(var, 0.0))
            dir_coef = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
            noise = rng.standard_normal(z.shape).astype(np.float32)
            z = (math.sqrt(ab_prev) * x0 + dir_coef * eps_hat).astype(np.float32)
            if t_prev > 0:
                z = z + sigma * noise
    return z


def cfg_sample(latent_set: np.ndarray, cfg: SamplerConfig, ld: LatentDiffusion) -> np.ndarray:
    """One conditioned sample decoded to an (H,W,3) image in [0,1]."""
    z0 = sample_latents_batch(np.asarray(latent_set)[None], cfg, ld)
    return ld.decode_scaled(z0)[0]
