"""Task-token routed inference.

[I2T] prompts decode text with the visual-block ids masked out; [T2I] and
editing prompts decode under block constraints: once [SOI] appears the next
N tokens are forced to [IMG] and then [EOI], [EOS] is disallowed until the
block exists, and the block is forced before the budget runs out. The [IMG]
hidden states then drive generation head -> guided diffusion sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import SamplerConfig, sample_latents_batch
from .errors import RoutingError
from .genhead import head_forward
from .model import GenVit
from .params import seed_from
from .templates import ASSISTANT_MARKER, USER_MARKER, apply_prompt_template
from .tokenizer import decode, encode

NEG = -1e30


@dataclass
class DecodeConfig:
    max_new_tokens: int = 40
    temperature: float = 0.0  # 0 = greedy
    seed: int = 0


@dataclass
class Response:
    text: str
    image: np.ndarray | None
    route: str  # "text" | "image"
    tokens: list = None
    unconstrained_soi: bool = False  # diagnostic: model emitted [SOI] by itself


def _prompt_ids(model: GenVit, prompt: str):
    vocab = model.vocab
    s = vocab.specials
    head = prompt.split(maxsplit=1)
    if not head or head[0] not in ("[T2I]", "[I2T]"):
        raise RoutingError("prompt must begin with [T2I] or [I2T]")
    task_id = s.t2i if head[0] == "[T2I]" else s.i2t
    body = head[1] if len(head) > 1 else ""
    ids = [s.bos, task_id]
    ids += encode(f"{USER_MARKER} {body} {ASSISTANT_MARKER}", vocab).ids
    return task_id, ids


def _pick(logits: np.ndarray, rng, temperature: float) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = (logits - logits.max()) / temperature
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def respond(
    prompt: str,
    model: GenVit,
    image: np.ndarray | None = None,
    sampler: SamplerConfig | None = None,
    decode_cfg: DecodeConfig | None = None,
    constrained: bool = True,
) -> Response:
    """Route a task-token prompt to text decoding or image synthesis."""
    sampler = sampler or SamplerConfig()
    dc = decode_cfg or DecodeConfig()
    vocab = model.vocab
    s = vocab.specials
    n_img = model.cfg.n_img
    task_id, ids = _prompt_ids(model, prompt)
    rng = np.random.default_rng(seed_from(dc.seed, "decode"))

    vis = None
    if image is not None:
        with ad.no_grad():
            vis = model.visual_prefix(image[None]).data[0]
    logits, _, cache = model.lm.prefill(ids, vis, img_id=s.img)

    structural = [s.bos, s.pad, s.t2i, s.i2t]
    generated: list[int] = []
    img_hiddens: list[np.ndarray] = []
    soi_done = False
    soi_unconstrained = False
    forced: list[int] = []
    budget = max(dc.max_new_tokens, n_img + 3)

    for step_i in range(budget):
        if forced:
            tok = forced.pop(0)
        else:
            masked = logits.copy()
            masked[structural] = NEG
            if task_id == s.i2t or not constrained:
                if task_id == s.i2t:
                    masked[[s.soi, s.img, s.eoi]] = NEG
            else:
                masked[[s.img, s.eoi]] = NEG  # block body only ever forced
                if soi_done:
                    masked[s.soi] = NEG
                else:
                    masked[s.eos] = NEG  # the response must contain the block
                    remaining = budget - step_i
                    if remaining <= n_img + 2:
                        tok = s.soi  # out of room: force the block now
                        generated.append(tok)
                        forced = [s.img] * n_img + [s.eoi]
                        _, hidden = model.lm.decode_step(cache, tok)
                        continue
            tok = _pick(masked, rng, dc.temperature)
        if tok == s.soi and not forced and not soi_done and task_id == s.t2i and constrained:
            soi_unconstrained = True
            forced = [s.img] * n_img + [s.eoi]
        generated.append(tok)
        if tok == s.eos:
            break
        in_slot = len(img_hiddens) if tok == s.img else None
        logits, hidden = model.lm.decode_step(cache, tok, img_slot=in_slot)
        if tok == s.img:
            img_hiddens.append(hidden)
        if tok == s.eoi:
            soi_done = True

    text = decode([t for t in generated], vocab)
    if task_id == s.i2t or (constrained is False and len(img_hiddens) != n_img):
        return Response(text=text, image=None, route="text", tokens=generated, unconstrained_soi=soi_unconstrained)

    if len(img_hiddens) != n_img:
        raise RoutingError(f"image route produced {len(img_hiddens)} [IMG] states, expected {n_img}")
    with ad.no_grad():
        e_img = model.img_embedding().data
        states = np.stack(img_hiddens) + e_img
        latent_set = head_forward(states.astype(np.float32), model.gen_head).data
    z0 = sample_latents_batch(latent_set[None].astype(np.float32), sampler, model.diffusion)
    img = model.diffusion.decode_scaled(z0)[0]
    return Response(text=text, image=img, route="image", tokens=generated, unconstrained_soi=soi_unconstrained)


def generate_image(caption: str, model: GenVit, sampler: SamplerConfig | None = None, decode_cfg: DecodeConfig | None = None) -> np.ndarray:
    """Format the caption with the canonical generation template and run the
    text-to-image route."""
    prompt = apply_prompt_template("generation", description=caption)
    resp = respond(prompt, model, sampler=sampler, decode_cfg=decode_cfg)
    return resp.image


def edit_image(image: np.ndarray, instruction: str, model: GenVit, sampler: SamplerConfig | None = None, decode_cfg: DecodeConfig | None = None) -> np.ndarray:
    """Editing route: the source image enters as the visual prefix and the
    instruction rides the [T2I] editing template."""
    prompt = apply_prompt_template("editing", description=instruction)
    resp = respond(prompt, model, image=image, sampler=sampler, decode_cfg=decode_cfg)
    return resp.image


def ask(question_prompt: str, model: GenVit, image: np.ndarray | None = None, decode_cfg: DecodeConfig | None = None) -> str:
    """Understanding route; returns the text answer."""
    resp = respond(question_prompt, model, image=image, decode_cfg=decode_cfg)
    return resp.text
