"""Generation head: a small encoder-decoder transformer that translates the
N [IMG]-token features (word embedding + final hidden state) into the visual
latent set used to condition the diffusion decoder.

The decoder runs one pass over L learnable query embeddings with causal
self-attention (a parallel non-causal variant sits behind a config switch),
plus cross-attention into the encoded [IMG] features.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, RoutingError
from .nn import DecoderBlock, LayerNorm, Linear, TransformerBlock, causal_mask
from .params import ParameterStore
from .vlm import LMState, ModelConfig


def extract_img_states(state: LMState, img_positions, img_embedding: Tensor, n_img: int):
    """Rows e_img + hidden[position] for each of the N [IMG] positions.

    img_positions are token-relative; the visual prefix offset is added here.
    Returns (N, d_lm) for a single sequence.
    """
    if len(img_positions) != n_img:
        raise RoutingError(f"expected {n_img} [IMG] positions, found {len(img_positions)}")
    rows = np.asarray(img_positions, dtype=np.int64) + state.prefix_len
    hidden = state.hidden
    if isinstance(hidden, Tensor):
        picked = ad.take(hidden, (0, rows)) if hidden.ndim == 3 else ad.take(hidden, rows)
        return ad.add(picked, img_embedding)
    picked = hidden[0][rows] if hidden.ndim == 3 else hidden[rows]
    emb = img_embedding.data if isinstance(img_embedding, Tensor) else img_embedding
    return Tensor(picked + emb)


def batch_img_states(hidden: Tensor, prefix_len: int, positions: np.ndarray, img_embedding: Tensor):
    """Batched gather: hidden (B,T,d), positions (B,N) token-relative."""
    b, n = positions.shape
    rows = np.repeat(np.arange(b), n)
    cols = (positions + prefix_len).reshape(-1)
    picked = ad.take(hidden, (rows, cols))
    picked = ad.reshape(picked, (b, n, hidden.shape[-1]))
    return ad.add(picked, img_embedding)


class GenerationHead:
    def __init__(self, store: ParameterStore, cfg: ModelConfig, prefix: str = "gen_head"):
        self.cfg = cfg
        d, heads = cfg.d_lm, cfg.n_heads
        self.queries = store.param(
            f"{prefix}/queries", (cfg.n_latents, d), lambda rng: rng.normal(0, 0.02, (cfg.n_latents, d))
        )
        self.encoder = [TransformerBlock(store, f"{prefix}/enc{i}", d, heads) for i in range(cfg.head_layers)]
        self.decoder = [DecoderBlock(store, f"{prefix}/dec{i}", d, d, heads) for i in range(cfg.head_layers)]
        self.ln_mem = LayerNorm(store, f"{prefix}/ln_mem", d)
        self.ln_out = LayerNorm(store, f"{prefix}/ln_out", d)
        self.out = Linear(store, f"{prefix}/out", d, cfg.d_u)

    def __call__(self, img_states) -> Tensor:
        """(B,N,d_lm) or (N,d_lm) -> (B,L,d_u) or (L,d_u) visual latent set."""
        x = img_states if isinstance(img_states, Tensor) else Tensor(np.asarray(img_states))
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + tuple(x.shape))
        if x.shape[-1] != self.cfg.d_lm or x.shape[1] != self.cfg.n_img:
            raise InputError(f"generation head expects (B,{self.cfg.n_img},{self.cfg.d_lm}), got {tuple(x.shape)}")
        for blk in self.encoder:
            x = blk(x)
        mem = self.ln_mem(x)

        b = x.shape[0]
        q = ad.reshape(self.queries, (1, self.cfg.n_latents, self.cfg.d_lm))
        q = ad.add(q, Tensor(np.zeros((b, 1, 1), dtype=q.dtype)))  # broadcast to batch
        mask = causal_mask(self.cfg.n_latents, dtype=q.dtype) if self.cfg.gen_head_causal else None
        for blk in self.decoder:
            q = blk(q, mem, mask)
        latents = self.out(self.ln_out(q))
        return ad.reshape(latents, (self.cfg.n_latents, self.cfg.d_u)) if squeeze else latents


def head_forward(img_states, head: GenerationHead) -> Tensor:
    return head(img_states)
