"""Vision-language core: patch encoder, 2-layer GELU MLP projector, and a
decoder-only language model with the visual prefix placed before the text.

The training path builds an autodiff graph; decoding uses a parallel numpy
path with a KV cache (verified equal to the graph path by tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InputError, NumericError
from .nn import (
    LayerNorm,
    Linear,
    TransformerBlock,
    causal_mask,
    masked_cross_entropy,
)
from .params import ParameterStore


@dataclass
class ModelConfig:
    # vision tower
    image_size: int = 32
    patch: int = 8
    d_vis: int = 64
    n_vis_layers: int = 3
    n_vis_heads: int = 4
    # language model
    d_lm: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 512
    context_len: int = 256
    # visual generation
    n_img: int = 16  # number of [IMG] tokens
    img_slot_embeddings: bool = False  # per-slot [IMG] embeddings instead of one shared
    head_layers: int = 4
    gen_head_causal: bool = True
    n_latents: int = 8  # L
    d_u: int = 64
    # contrastive embedding dim
    d_clip: int = 64
    # latent diffusion decoder
    latent_size: int = 8
    latent_channels: int = 4

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def validate(self):
        if self.d_lm % self.n_heads:
            raise ConfigurationError("d_lm must be divisible by n_heads")
        if self.d_vis % self.n_vis_heads:
            raise ConfigurationError("d_vis must be divisible by n_vis_heads")
        if self.n_img < 1:
            raise ConfigurationError("n_img must be >= 1")
        if self.image_size % self.patch:
            raise ConfigurationError("image size must be divisible by patch size")
        if self.image_size // 4 != self.latent_size:
            raise ConfigurationError("latent_size must be image_size / 4 (two conv downsamples)")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for k, f in cls.__dataclass_fields__.items():
            if k in d:
                raw = d[k]
                kind = f.type if isinstance(f.type, type) else {"int": int, "bool": bool}.get(f.type, str)
                kwargs[k] = (str(raw).lower() in ("1", "true")) if kind is bool else kind(raw)
        return cls(**kwargs).validate()


@dataclass
class LMState:
    logits: object  # (B,T,V) Tensor or array
    hidden: object  # (B,T,d) final layer, pre LM head
    prefix_len: int = 0
    kv_cache: object = None


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B,H,W,3) -> (B, P, patch*patch*3), raster order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


class VisionEncoder:
    """ViT over image patches; downstream consumers read the penultimate block."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "vision"):
        self.cfg = cfg
        p = prefix
        d_in = cfg.patch * cfg.patch * 3
        self.embed = Linear(store, f"{p}/embed", d_in, cfg.d_vis)
        self.pos = store.param(f"{p}/pos", (cfg.n_patches, cfg.d_vis), lambda rng: rng.normal(0, 0.02, (cfg.n_patches, cfg.d_vis)))
        self.blocks = [TransformerBlock(store, f"{p}/block{i}", cfg.d_vis, cfg.n_vis_heads) for i in range(cfg.n_vis_layers)]
        self.ln_final = LayerNorm(store, f"{p}/ln_final", cfg.d_vis)

    def _run(self, images: np.ndarray, depth: int) -> Tensor:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise InputError(f"expected (B,{cfg.image_size},{cfg.image_size},3) images, got {images.shape}")
        x = self.embed(Tensor(patchify(images.astype(np.float32), cfg.patch)))
        x = ad.add(x, self.pos)
        for blk in self.blocks[:depth]:
            x = blk(x)
        return x

    def patch_features(self, images: np.ndarray) -> Tensor:
        """Penultimate-block patch outputs, (B, P, d_vis)."""
        return self._run(images, len(self.blocks) - 1)

    def pooled(self, images: np.ndarray) -> Tensor:
        """Full-depth, layer-normed, mean-pooled features, (B, d_vis)."""
        x = self._run(images, len(self.blocks))
        return ad.mean(self.ln_final(x), axis=1)


def encode_image(image: np.ndarray, encoder: VisionEncoder) -> np.ndarray:
    """Single image -> (P, d_vis) penultimate patch features (frozen use)."""
    with ad.no_grad():
        feats = encoder.patch_features(image[None])
    return feats.data[0]


class Projector:
    """Per-patch map into the LM embedding space: Linear, GELU, Linear."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "projector"):
        self.cfg = cfg
        self.fc1 = Linear(store, f"{prefix}/fc1", cfg.d_vis, cfg.d_lm)
        self.fc2 = Linear(store, f"{prefix}/fc2", cfg.d_lm, cfg.d_lm)

    def __call__(self, feats) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.fc1.w.dtype))
        if feats.shape[-1] != self.cfg.d_vis:
            raise InputError(f"projector expects feature dim {self.cfg.d_vis}, got {feats.shape[-1]}")
        return self.fc2(ad.gelu(self.fc1(feats)))


def project(features, projector: Projector) -> Tensor:
    return projector(features)


class LanguageModel:
    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "lm"):
        self.cfg = cfg
        p = prefix
        d = cfg.d_lm
        self.tok_emb = store.param(f"{p}/tok_emb", (cfg.vocab_size, d), lambda rng: rng.normal(0, 0.02, (cfg.vocab_size, d)))
        self.pos_emb = store.param(f"{p}/pos_emb", (cfg.context_len, d), lambda rng: rng.normal(0, 0.02, (cfg.context_len, d)))
        self.blocks = [TransformerBlock(store, f"{p}/block{i}", d, cfg.n_heads) for i in range(cfg.n_layers)]
        self.ln_final = LayerNorm(store, f"{p}/ln_final", d)
        self.head = Linear(store, f"{p}/head", d, cfg.vocab_size)
        self.img_slot_emb = (
            store.param(f"{p}/img_slot_emb", (cfg.n_img, d), lambda rng: rng.normal(0, 0.02, (cfg.n_img, d)))
            if cfg.img_slot_embeddings
            else None
        )

    # -- training / full-graph path ------------------------------------------

    def forward(self, token_ids: np.ndarray, vis_embeds: Tensor | None = None, img_id: int | None = None) -> LMState:
        """token_ids (B,Ttok) int; vis_embeds (B,P,d_lm) placed before the text."""
        token_ids = np.asarray(token_ids)
        b, t_tok = token_ids.shape
        prefix = 0 if vis_embeds is None else vis_embeds.shape[1]
        total = prefix + t_tok
        if total > self.cfg.context_len:
            raise InputError(f"sequence length {total} exceeds context_len {self.cfg.context_len}")
        tok = ad.take(self.tok_emb, token_ids)
        if self.img_slot_emb is not None and img_id is not None:
            padded = ad.concat([self.img_slot_emb, Tensor(np.zeros((1, self.cfg.d_lm), dtype=self.img_slot_emb.dtype))], axis=0)
            tok = ad.add(tok, ad.take(padded, self._slot_index(token_ids, img_id)))
        x = ad.concat([vis_embeds, tok], axis=1) if vis_embeds is not None else tok
        x = ad.add(x, self.pos_emb[0:total])
        mask = causal_mask(total, dtype=x.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        hidden = self.ln_final(x)
        logits = self.head(hidden)
        return LMState(logits=logits, hidden=hidden, prefix_len=prefix)

    def _slot_index(self, token_ids: np.ndarray, img_id: int) -> np.ndarray:
        """(B,Ttok) row index into the padded slot table; n_img means 'no slot'."""
        n = self.cfg.n_img
        idx = np.full(token_ids.shape, n, dtype=np.int64)
        for row in range(token_ids.shape[0]):
            slots = np.flatnonzero(token_ids[row] == img_id)
            idx[row, slots[:n]] = np.arange(min(len(slots), n))
        return idx

    # -- numpy decode path with KV cache ----------------------------------------

    def _np_ln(self, x, ln: LayerNorm):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * ln.g.data + ln.b.data

    def _np_attn(self, x, blk, k_cache, v_cache, causal_from: int):
        """x (T,d) new rows; cache arrays (H, Tc, dh). Returns out, new caches."""
        cfg = self.cfg
        h, dh = cfg.n_heads, cfg.d_lm // cfg.n_heads
        qkv = x @ blk.attn.qkv.w.data + blk.attn.qkv.b.data
        q, k, v = np.split(qkv, 3, axis=-1)
        t = x.shape[0]
        q = q.reshape(t, h, dh).transpose(1, 0, 2)
        k = k.reshape(t, h, dh).transpose(1, 0, 2)
        v = v.reshape(t, h, dh).transpose(1, 0, 2)
        k_all = k if k_cache is None else np.concatenate([k_cache, k], axis=1)
        v_all = v if v_cache is None else np.concatenate([v_cache, v], axis=1)
        scores = q @ k_all.transpose(0, 2, 1) / math.sqrt(dh)
        t_all = k_all.shape[1]
        if t > 1:
            # rows attend causally within the new chunk
            col = np.arange(t_all)[None]
            row = causal_from + np.arange(t)[:, None]
            scores = np.where(col[None] <= row[None], scores, -np.inf)
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(-1, keepdims=True)
        out = (att @ v_all).transpose(1, 0, 2).reshape(t, cfg.d_lm)
        return out @ blk.attn.proj.w.data + blk.attn.proj.b.data, k_all, v_all

    def _np_mlp(self, x, blk):
        zx = x @ blk.mlp.fc1.w.data + blk.mlp.fc1.b.data
        c, a = 0.7978845608028654, 0.044715
        zx = 0.5 * zx * (1.0 + np.tanh(c * (zx + a * zx**3)))
        return zx @ blk.mlp.fc2.w.data + blk.mlp.fc2.b.data

    def prefill(self, token_ids: list | np.ndarray, vis_embeds_np: np.ndarray | None = None, img_id: int | None = None):
        """Run the prompt once, return (logits_last, hidden_all, cache)."""
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        prefix = 0 if vis_embeds_np is None else vis_embeds_np.shape[0]
        total = prefix + ids.size
        if total > self.cfg.context_len:
            raise InputError(f"sequence length {total} exceeds context_len {self.cfg.context_len}")
        tok = self.tok_emb.data[ids]
        if self.img_slot_emb is not None and img_id is not None:
            padded = np.concatenate([self.img_slot_emb.data, np.zeros((1, self.cfg.d_lm), dtype=self.img_slot_emb.dtype)])
            tok = tok + padded[self._slot_index(ids[None], img_id)[0]]
        x = tok if vis_embeds_np is None else np.concatenate([vis_embeds_np, tok], axis=0)
        x = x + self.pos_emb.data[:total]
        cache = []
        for blk in self.blocks:
            a_out, k_all, v_all = self._np_attn(self._np_ln(x, blk.ln1), blk, None, None, causal_from=0)
            x = x + a_out
            x = x + self._np_mlp(self._np_ln(x, blk.ln2), blk)
            cache.append([k_all, v_all])
        hidden = self._np_ln(x, self.ln_final)
        logits = hidden @ self.head.w.data + self.head.b.data
        return logits[-1], hidden, {"layers": cache, "length": total, "prefix": prefix}

    def decode_step(self, cache: dict, token_id: int, img_slot: int | None = None):
        """Feed one token; returns (logits (V,), hidden (d,)) and grows the cache."""
        pos = cache["length"]
        if pos >= self.cfg.context_len:
            raise InputError("decode exceeded context_len")
        x = self.tok_emb.data[token_id][None].copy()
        if self.img_slot_emb is not None and img_slot is not None:
            x = x + self.img_slot_emb.data[img_slot][None]
        x = x + self.pos_emb.data[pos][None]
        for blk, layer_cache in zip(self.blocks, cache["layers"]):
            a_out, k_all, v_all = self._np_attn(self._np_ln(x, blk.ln1), blk, layer_cache[0], layer_cache[1], causal_from=pos)
            layer_cache[0], layer_cache[1] = k_all, v_all
            x = x + a_out
            x = x + self._np_mlp(self._np_ln(x, blk.ln2), blk)
        hidden = self._np_ln(x, self.ln_final)
        logits = hidden @ self.head.w.data + self.head.b.data
        cache["length"] = pos + 1
        return logits[0], hidden[0]


def lm_loss_parts(state: LMState, token_ids: np.ndarray, loss_mask: np.ndarray):
    """(sum, count) of masked next-token cross-entropy; prefix rows never count."""
    b, t_tok = token_ids.shape
    prefix = state.prefix_len
    total = prefix + t_tok
    targets = np.zeros((b, total), dtype=np.int64)
    mask = np.zeros((b, total), dtype=bool)
    if prefix > 0:
        targets[:, prefix - 1 : total - 1] = token_ids
        mask[:, prefix - 1 : total - 1] = loss_mask
    else:
        targets[:, : t_tok - 1] = token_ids[:, 1:]
        mask[:, : t_tok - 1] = loss_mask[:, 1:]
    return masked_cross_entropy(state.logits, targets, mask)


def lm_loss(state: LMState, token_ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean masked cross-entropy for one batch."""
    loss_sum, count = lm_loss_parts(state, np.asarray(token_ids), np.asarray(loss_mask, dtype=bool))
    if count == 0:
        raise NumericError("lm_loss: loss mask selects no positions (undefined mean)")
    return ad.mul(loss_sum, 1.0 / count)
