"""Contrastive image-text twin towers ("toy clip").

The vision tower is THE vision encoder of the composite model; contrastive
pretraining is what gives it useful features before it is frozen. The text
tower doubles as the conditioning encoder for diffusion pretraining: its
token-level head emits an (L, d_u) matrix shaped exactly like the generation
head's output, which is why the two can share one frozen UNet.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .nn import LayerNorm, Linear, TransformerBlock
from .params import ParameterStore
from .tokenizer import Vocabulary, encode
from .vlm import ModelConfig, VisionEncoder


class TextEncoder:
    """Small transformer over a fixed context of n_latents tokens."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "clip_text"):
        self.cfg = cfg
        d = cfg.d_vis
        self.ctx = cfg.n_latents
        self.tok_emb = store.param(f"{prefix}/tok_emb", (cfg.vocab_size, d), lambda rng: rng.normal(0, 0.02, (cfg.vocab_size, d)))
        self.pos = store.param(f"{prefix}/pos", (self.ctx, d), lambda rng: rng.normal(0, 0.02, (self.ctx, d)))
        self.blocks = [TransformerBlock(store, f"{prefix}/block{i}", d, cfg.n_vis_heads) for i in range(2)]
        self.ln_final = LayerNorm(store, f"{prefix}/ln_final", d)
        self.cond_head = Linear(store, f"{prefix}/cond_head", d, cfg.d_u)

    def _run(self, ids: np.ndarray) -> Tensor:
        x = ad.add(ad.take(self.tok_emb, ids), self.pos)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_final(x)

    def pooled(self, ids: np.ndarray, pad_id: int) -> Tensor:
        """Mean over non-pad positions, (B, d_vis)."""
        x = self._run(ids)
        keep = (ids != pad_id).astype(x.dtype)[..., None]
        denom = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
        return ad.sum_(ad.mul(x, keep / denom), axis=1)

    def cond_features(self, ids: np.ndarray) -> Tensor:
        """Token-level conditioning matrix, (B, L, d_u)."""
        return self.cond_head(self._run(ids))


class ToyClip:
    def __init__(self, store: ParameterStore, cfg: ModelConfig, vision: VisionEncoder | None = None):
        self.cfg = cfg
        self.vision = vision or VisionEncoder(store, cfg)
        self.text = TextEncoder(store, cfg)
        self.img_head = Linear(store, "clip/img_head", cfg.d_vis, cfg.d_clip)
        self.txt_head = Linear(store, "clip/txt_head", cfg.d_vis, cfg.d_clip)
        self.logit_scale = store.param("clip/logit_scale", (1,), lambda rng: np.full(1, math.log(1 / 0.07)))

    def image_features(self, images: np.ndarray) -> Tensor:
        """(B, d_clip), not normalized; also the metric-harness feature extractor."""
        return self.img_head(self.vision.pooled(images))

    def text_features(self, ids: np.ndarray, pad_id: int) -> Tensor:
        return self.txt_head(self.text.pooled(ids, pad_id))

    def embed_images(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return unit_normalize(self.image_features(images)).data

    def embed_texts(self, captions: list[str], vocab: Vocabulary) -> np.ndarray:
        ids = caption_ids(captions, vocab, self.text.ctx)
        with ad.no_grad():
            return unit_normalize(self.text_features(ids, vocab.specials.pad)).data


def caption_ids(captions: list[str], vocab: Vocabulary, ctx: int) -> np.ndarray:
    """Pad / truncate whitespace-tokenized captions to the fixed text context."""
    pad = vocab.specials.pad
    out = np.full((len(captions), ctx), pad, dtype=np.int64)
    for i, caption in enumerate(captions):
        ids = encode(caption, vocab).ids[:ctx]
        out[i, : len(ids)] = ids
    return out


def unit_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    norm2 = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    if np.any(norm2.data <= 0.0):
        raise NumericError("zero-norm embedding cannot be normalized")
    return ad.div(x, ad.sqrt(ad.add(norm2, eps)))


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, scale) -> Tensor:
    """Symmetric in-batch InfoNCE over unit-normalized embeddings.

    scale multiplies the cosine logits; scale -> 0 gives the uniform-softmax
    limit ln(batch). Accepts a Tensor (trainable log-scale already
    exponentiated) or a plain float.
    """
    b = img_emb.shape[0]
    if b < 2:
        raise ConfigurationError("contrastive loss needs a batch of at least 2 pairs")
    ii = unit_normalize(img_emb)
    tt = unit_normalize(txt_emb)
    logits = ad.mul(ad.matmul(ii, ad.transpose(tt, (1, 0))), scale)
    labels = np.arange(b)
    logp_i = ad.log_softmax(logits, axis=-1)
    logp_t = ad.log_softmax(ad.transpose(logits, (1, 0)), axis=-1)
    picked_i = ad.take(logp_i, (labels, labels))
    picked_t = ad.take(logp_t, (labels, labels))
    return ad.mul(ad.add(ad.mean(picked_i), ad.mean(picked_t)), -0.5)


def retrieval_top1(img_emb: np.ndarray, txt_emb: np.ndarray) -> float:
    """Fraction of texts whose nearest image is their own pair."""
    sims = txt_emb @ img_emb.T
    return float((sims.argmax(axis=1) == np.arange(len(sims))).mean())
