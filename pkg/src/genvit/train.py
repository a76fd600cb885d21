"""Training: contrastive and diffusion pretraining phases (stand-ins for the
off-the-shelf perception and decoding models) followed by single-stage
generative instruction tuning of projector + language model + generation
head. Plus the finite-difference gradient-check harness.

Determinism contract: every stochastic draw is a pure function of (seed,
step index), so resuming from a checkpoint replays the exact trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clip import caption_ids, contrastive_loss, retrieval_top1
from .diffusion import diffusion_loss
from .errors import ConfigurationError, DependencyError, NumericError
from .genhead import batch_img_states
from .mixture import InstructionDataset, InstructionRecord
from .model import GenVit, TUNABLE_PREFIXES, save_model_with_vocab
from .params import ParameterStore, seed_from
from .vlm import lm_loss_parts

MAX_LOGIT_SCALE = math.log(100.0)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_grad_norm: float = 1.0
    weight_decay: float = 0.1
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.03
    steps: int = 500
    seed: int = 0
    lambda_lm: float = 1.0
    lambda_diff: float = 1.0
    cond_dropout: float = 0.0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigurationError("warmup_ratio must lie in [0, 1)")
        if self.lambda_lm < 0 or self.lambda_diff < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size/steps out of range")
        return self


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine decay to ~0."""
    warmup = max(1, int(round(cfg.warmup_ratio * cfg.steps)))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    progress = (step - warmup) / max(1, cfg.steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay over a filtered parameter
    set; moment buffers live in the store under `opt_prefix` so checkpoints
    carry optimizer state."""

    def __init__(self, store: ParameterStore, param_filter=None, opt_prefix: str = "opt", betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.filter = param_filter or (lambda name: True)
        self.prefix = opt_prefix
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.step_count = int(store.config.get(f"{opt_prefix}.step", "0"))

    def _moments(self, name: str, shape):
        m_name, v_name = f"{self.prefix}/m/{name}", f"{self.prefix}/v/{name}"
        if m_name not in self.store:
            self.store.set_array(m_name, np.zeros(shape, dtype=self.store.dtype), frozen=True)
            self.store.set_array(v_name, np.zeros(shape, dtype=self.store.dtype), frozen=True)
        return self.store.get(m_name), self.store.get(v_name)

    def params(self):
        return [(n, t) for n, t in self.store.trainable() if self.filter(n) and not n.startswith(("opt", "_"))]

    def step(self, lr: float):
        self.step_count += 1
        b1c = 1.0 - self.b1**self.step_count
        b2c = 1.0 - self.b2**self.step_count
        for name, t in self.params():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self._moments(name, t.data.shape)
            m.data[...] = self.b1 * m.data + (1.0 - self.b1) * g
            v.data[...] = self.b2 * v.data + (1.0 - self.b2) * g * g
            update = (m.data / b1c) / (np.sqrt(v.data / b2c) + self.eps)
            if self.wd:
                update = update + self.wd * t.data
            t.data[...] = t.data - np.asarray(lr, dtype=t.data.dtype) * update
        self.store.config[f"{self.prefix}.step"] = str(self.step_count)


def global_grad_norm(pairs) -> float:
    total = 0.0
    for _, t in pairs:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients(pairs, max_norm: float) -> float:
    """Scale gradients so the global norm is at most max_norm; returns pre-clip norm."""
    norm = global_grad_norm(pairs)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, t in pairs:
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


# -- batch assembly ---------------------------------------------------------------


def pad_token_batch(records: list[InstructionRecord], pad_id: int):
    t_max = max(len(r.tokens.ids) for r in records)
    ids = np.full((len(records), t_max), pad_id, dtype=np.int64)
    mask = np.zeros((len(records), t_max), dtype=bool)
    for i, r in enumerate(records):
        n = len(r.tokens.ids)
        ids[i, :n] = r.tokens.ids
        mask[i, :n] = r.tokens.loss_mask
    return ids, mask


def composite_loss(model: GenVit, records: list[InstructionRecord], image_loader, seed: int, lambda_lm: float = 1.0, lambda_diff: float = 1.0, cond_dropout: float = 0.0):
    """Weighted LM + diffusion loss over a mixed-task batch.

    Returns (total Tensor, report dict). Pure function of (parameters,
    records order, seed): the same inputs give bit-identical losses.
    """
    with_img = [r for r in records if r.input_image is not None]
    text_only = [r for r in records if r.input_image is None]
    pad = model.vocab.specials.pad
    img_emb = model.img_embedding()

    lm_sums, lm_counts = [], 0
    diff_states, diff_targets = [], []

    def handle_group(group, use_prefix):
        nonlocal lm_counts
        if not group:
            return
        ids, mask = pad_token_batch(group, pad)
        if use_prefix:
            imgs = np.stack([image_loader(r.input_image) for r in group])
            vis = model.visual_prefix(imgs)
            state = model.lm.forward(ids, vis, img_id=model.vocab.specials.img)
        else:
            state = model.lm.forward(ids, img_id=model.vocab.specials.img)
        s, c = lm_loss_parts(state, ids, mask)
        lm_sums.append(s)
        lm_counts += c
        rows = [i for i, r in enumerate(group) if r.target_image is not None]
        if rows:
            positions = np.stack([np.asarray(group[i].tokens.img_positions) for i in rows])
            hidden_rows = ad.take(state.hidden, np.asarray(rows))
            diff_states.append(batch_img_states(hidden_rows, state.prefix_len, positions, img_emb))
            diff_targets.extend(group[i].target_image for i in rows)

    handle_group(with_img, True)
    handle_group(text_only, False)

    if lm_counts == 0:
        raise NumericError("batch has no supervised token positions")
    lm_total = lm_sums[0] if len(lm_sums) == 1 else ad.add(lm_sums[0], lm_sums[1])
    lm_mean = ad.mul(lm_total, 1.0 / lm_counts)

    report = {"lm": float(lm_mean.data), "count_lm": lm_counts, "count_diff": len(diff_targets)}
    if diff_targets:
        img_states = diff_states[0] if len(diff_states) == 1 else ad.concat(diff_states, axis=0)
        latent_sets = model.gen_head(img_states)
        targets = np.stack([image_loader(ref) for ref in diff_targets])
        latents = model.diffusion.encode_scaled(targets)
        d_loss = diffusion_loss(latents, latent_sets, model.diffusion, seed=seed, cond_dropout=cond_dropout)
        report["diff"] = float(d_loss.data)
        total = ad.add(ad.mul(lm_mean, lambda_lm), ad.mul(d_loss, lambda_diff))
    else:
        report["diff"] = 0.0
        total = ad.mul(lm_mean, lambda_lm)
    report["loss"] = float(total.data)
    return total, report


def evaluation_loss(model: GenVit, records, image_loader, seed: int) -> dict:
    """Fixed-seed loss measurement without updates (same noise draws each call)."""
    with ad.no_grad():
        _, report = composite_loss(model, records, image_loader, seed=seed)
    return report


# -- the instruction-tuning loop -----------------------------------------------------


def batch_for_step(dataset_len: int, step: int, cfg: TrainConfig) -> np.ndarray:
    """Record indices for one step; pure function of (seed, step)."""
    bpe = max(1, math.ceil(dataset_len / cfg.batch_size))
    epoch, k = divmod(step, bpe)
    order = np.random.default_rng(seed_from(cfg.seed, "epoch", epoch)).permutation(dataset_len)
    return order[k * cfg.batch_size : (k + 1) * cfg.batch_size]


def train_step(records: list[InstructionRecord], model: GenVit, opt: AdamW, cfg: TrainConfig, step: int, image_loader) -> dict:
    model.store.zero_grads()
    total, report = composite_loss(
        model,
        records,
        image_loader,
        seed=seed_from(cfg.seed, "step", step),
        lambda_lm=cfg.lambda_lm,
        lambda_diff=cfg.lambda_diff,
        cond_dropout=cfg.cond_dropout,
    )
    if not np.isfinite(total.data):
        ids = [r.record_id for r in records]
        raise NumericError(f"non-finite loss at step {step}; offending record ids: {ids}")
    total.backward()
    norm = clip_gradients(opt.params(), cfg.max_grad_norm)
    lr = lr_at(step, cfg)
    opt.step(lr)
    report.update({"step": step, "lr": lr, "grad_norm": round(norm, 8)})
    return report


class ImageCache:
    def __init__(self, dataset: InstructionDataset):
        self.dataset = dataset
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, ref: str) -> np.ndarray:
        if ref not in self._cache:
            self._cache[ref] = self.dataset.load_image(ref)
        return self._cache[ref]


def run_training(dataset: InstructionDataset, model: GenVit, cfg: TrainConfig, out_dir=None, image_loader=None, stop_at_step: int | None = None) -> list[dict]:
    """Seeded shuffled epochs with periodic checkpointing and a metrics log.

    stop_at_step simulates an interruption: training halts there (checkpoint
    still written) while the lr schedule keeps its cfg.steps horizon, so a
    resumed run replays the exact trajectory of an uninterrupted one.
    """
    cfg.validate()
    if dataset.manifest.get("n_img_tokens") != model.cfg.n_img:
        raise ConfigurationError(
            f"dataset built with n_img={dataset.manifest.get('n_img_tokens')} but model expects {model.cfg.n_img}"
        )
    loader = image_loader or ImageCache(dataset)
    model.freeze_pretrained()
    opt = AdamW(
        model.store,
        param_filter=lambda n: n.startswith(TUNABLE_PREFIXES),
        opt_prefix="opt_tune",
        weight_decay=cfg.weight_decay,
    )
    start = opt.step_count
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "metrics.jsonl", "a", encoding="utf-8")
    end = cfg.steps if stop_at_step is None else min(cfg.steps, stop_at_step)
    reports = []
    try:
        for step in range(start, end):
            idx = batch_for_step(len(dataset), step, cfg)
            records = [dataset.records[i] for i in idx]
            report = train_step(records, model, opt, cfg, step, loader)
            reports.append(report)
            if log_f is not None:
                log_f.write(json.dumps(report, sort_keys=True) + "\n")
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model_with_vocab(model, out, name=f"checkpoint_{step + 1}.bin")
        if out is not None:
            save_model_with_vocab(model, out, name="checkpoint.bin")
    finally:
        if log_f is not None:
            log_f.close()
    return reports


# -- pretraining phase 1: contrastive encoders ------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warmup_ratio: float = 0.03
    seed: int = 0
    # diffusion phase extras
    vae_steps: int = 400
    unet_steps: int = 900
    kl_weight: float = 1e-4
    cond_dropout: float = 0.1


def pretrain_clip(pairs: list, images: dict, model: GenVit, cfg: PretrainConfig, heldout_pairs: list | None = None) -> dict:
    """Symmetric contrastive pretraining of the vision + text towers.

    pairs: (caption, image_ref); images: ref -> (H,W,3). Freezes the towers
    afterwards. Returns a report with the final loss and, when held-out pairs
    are given, retrieval accuracy against random chance.
    """
    if cfg.batch_size < 2:
        raise ConfigurationError("contrastive pretraining needs batch_size >= 2")
    # distinct pairs only: duplicate images inside a batch make the in-batch
    # labels contradictory and stall the objective
    seen, distinct = set(), []
    for caption, ref in pairs:
        if ref not in seen:
            seen.add(ref)
            distinct.append((caption, ref))
    pairs = distinct
    if len(pairs) < 2:
        raise ConfigurationError("contrastive pretraining needs at least 2 distinct pairs")
    clip_prefixes = ("vision/", "clip_text/", "clip/")
    opt = AdamW(model.store, param_filter=lambda n: n.startswith(clip_prefixes), opt_prefix="opt_clip", weight_decay=cfg.weight_decay)
    sched = TrainConfig(steps=cfg.steps, learning_rate=cfg.learning_rate, warmup_ratio=cfg.warmup_ratio, batch_size=cfg.batch_size, seed=cfg.seed)
    vocab = model.vocab
    losses = []
    for step in range(cfg.steps):
        idx = batch_for_step(len(pairs), step, sched)
        if len(idx) < 2:
            continue
        batch = [pairs[i] for i in idx]
        imgs = np.stack([images[ref] for _, ref in batch])
        ids = caption_ids([c for c, _ in batch], vocab, model.clip.text.ctx)
        model.store.zero_grads()
        scale = ad.exp(model.clip.logit_scale)
        loss = contrastive_loss(model.clip.image_features(imgs), model.clip.text_features(ids, vocab.specials.pad), scale)
        loss.backward()
        clip_gradients(opt.params(), cfg.max_grad_norm)
        opt.step(lr_at(step, sched))
        model.clip.logit_scale.data[...] = np.minimum(model.clip.logit_scale.data, MAX_LOGIT_SCALE)
        losses.append(float(loss.data))
    for prefix in clip_prefixes:
        model.store.freeze(prefix)
    report = {"final_loss": losses[-1] if losses else None, "steps": len(losses)}
    if heldout_pairs:
        img_emb = model.clip.embed_images(np.stack([images[ref] for _, ref in heldout_pairs]))
        txt_emb = model.clip.embed_texts([c for c, _ in heldout_pairs], vocab)
        report["retrieval_top1"] = retrieval_top1(img_emb, txt_emb)
        report["matched_cosine"] = float((img_emb * txt_emb).sum(axis=1).mean())
        off = txt_emb @ img_emb.T
        report["mismatched_cosine"] = float((off.sum() - np.trace(off)) / (off.size - len(off)))
    return report


# -- pretraining phase 2: latent diffusion decoder ------------------------------------------


def pretrain_diffusion(image_refs: list, captions: list, images: dict, model: GenVit, cfg: PretrainConfig) -> dict:
    """VAE (reconstruction + small KL), latent rescaling, then conditional
    noise-prediction training of the UNet against the frozen text encoder."""
    if not model.store.is_frozen("clip_text/tok_emb"):
        raise DependencyError("pretrain_diffusion requires a pretrained (frozen) text encoder")
    vocab = model.vocab
    ld = model.diffusion
    report = {}

    # stage 1: VAE
    opt_v = AdamW(model.store, param_filter=lambda n: n.startswith("vae/") and "latent_scale" not in n, opt_prefix="opt_vae", weight_decay=0.0)
    sched_v = TrainConfig(steps=cfg.vae_steps, learning_rate=cfg.learning_rate, warmup_ratio=cfg.warmup_ratio, batch_size=cfg.batch_size, seed=seed_from(cfg.seed, "vae"))
    vae_losses = []
    for step in range(cfg.vae_steps):
        idx = batch_for_step(len(image_refs), step, sched_v)
        imgs = np.stack([images[image_refs[i]] for i in idx]).transpose(0, 3, 1, 2)
        rng = np.random.default_rng(seed_from(cfg.seed, "vae-noise", step))
        model.store.zero_grads()
        mu, logvar = ld.vae.encode(imgs)
        z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(rng.standard_normal(mu.shape).astype(np.float32))))
        recon = ld.vae.decode(z)
        diff = ad.sub(recon, Tensor(imgs.astype(np.float32)))
        rec_loss = ad.mean(ad.mul(diff, diff))
        kl = ad.mul(ad.mean(ad.sub(ad.add(ad.mul(logvar, 1.0), 1.0), ad.add(ad.mul(mu, mu), ad.exp(logvar)))), -0.5)
        loss = ad.add(rec_loss, ad.mul(kl, cfg.kl_weight))
        loss.backward()
        clip_gradients(opt_v.params(), cfg.max_grad_norm)
        opt_v.step(lr_at(step, sched_v))
        vae_losses.append(float(rec_loss.data))
    report["vae_first_loss"] = vae_losses[0] if vae_losses else None
    report["vae_final_loss"] = vae_losses[-1] if vae_losses else None

    # latent rescale so diffusion sees ~unit-variance latents
    sample_refs = image_refs[: min(len(image_refs), 512)]
    with ad.no_grad():
        mu, _ = ld.vae.encode(np.stack([images[r] for r in sample_refs]).transpose(0, 3, 1, 2))
    std = float(mu.data.std())
    ld.vae.latent_scale.data[...] = max(std, 1e-6)
    report["latent_scale"] = float(ld.vae.latent_scale.data[0])
    model.store.freeze("vae/")

    # stage 2: UNet, conditioned on frozen text-encoder features
    opt_u = AdamW(model.store, param_filter=lambda n: n.startswith(("unet/", "null_cond/")), opt_prefix="opt_unet", weight_decay=0.0)
    sched_u = TrainConfig(steps=cfg.unet_steps, learning_rate=cfg.learning_rate, warmup_ratio=cfg.warmup_ratio, batch_size=cfg.batch_size, seed=seed_from(cfg.seed, "unet"))
    unet_losses = []
    for step in range(cfg.unet_steps):
        idx = batch_for_step(len(image_refs), step, sched_u)
        imgs = np.stack([images[image_refs[i]] for i in idx])
        ids = caption_ids([captions[i] for i in idx], vocab, model.clip.text.ctx)
        with ad.no_grad():
            cond = model.clip.text.cond_features(ids)
        latents = ld.encode_scaled(imgs)
        model.store.zero_grads()
        loss = diffusion_loss(latents, Tensor(cond.data), ld, seed=seed_from(cfg.seed, "unet-noise", step), cond_dropout=cfg.cond_dropout)
        loss.backward()
        clip_gradients(opt_u.params(), cfg.max_grad_norm)
        opt_u.step(lr_at(step, sched_u))
        unet_losses.append(float(loss.data))
    report["unet_first_loss"] = unet_losses[0] if unet_losses else None
    report["unet_final_loss"] = unet_losses[-1] if unet_losses else None
    k = max(1, min(20, len(unet_losses) // 10))
    if unet_losses:
        report["unet_initial_mean"] = float(np.mean(unet_losses[:k]))
        report["unet_final_mean"] = float(np.mean(unet_losses[-k:]))
    model.store.freeze("unet/")
    model.store.freeze("null_cond/")
    return report


# -- gradient checking -------------------------------------------------------------------


GRAD_COMPONENTS = {
    "projector": ("projector/",),
    "lm": ("lm/",),
    "gen_head": ("gen_head/",),
    "cross": ("projector/", "lm/", "gen_head/"),
}


def grad_check(component: str, records: list[InstructionRecord], model: GenVit, image_loader, seed: int = 0, n_params: int = 20, fd_step: float = 1e-4) -> dict:
    """Central finite differences vs analytic gradients in float64.

    component 'cross' checks the diffusion-conditioning path alone (the LM
    loss switched off), so gradients reach the LM and projector only through
    the frozen UNet. Frozen parameters that get sampled are reported skipped.
    """
    if component not in GRAD_COMPONENTS:
        raise ConfigurationError(f"unknown component {component!r}; choose from {sorted(GRAD_COMPONENTS)}")
    prefixes = GRAD_COMPONENTS[component]
    lam_lm = 0.0 if component == "cross" else 1.0
    m64 = model.astype(np.float64)

    def loss_fn():
        total, _ = composite_loss(m64, records, image_loader, seed=seed_from(seed, "gradcheck"), lambda_lm=lam_lm, lambda_diff=1.0)
        return total

    m64.store.zero_grads()
    loss_fn().backward()

    names = [n for n in m64.store.names() if n.startswith(prefixes) and not n.startswith(("opt", "_"))]
    rng = np.random.default_rng(seed_from(seed, "gradcheck-pick", component))
    entries = []
    max_rel = 0.0
    checked = 0
    attempts = 0
    while checked < n_params and names and attempts < 50 * n_params:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        tensor = m64.store.get(name)
        flat = tensor.data.ravel()
        i = int(rng.integers(flat.size))
        if m64.store.is_frozen(name):
            entries.append({"name": name, "index": i, "status": "skipped (frozen)"})
            continue
        orig = flat[i]
        flat[i] = orig + fd_step
        with ad.no_grad():
            up = loss_fn().item()
        flat[i] = orig - fd_step
        with ad.no_grad():
            dn = loss_fn().item()
        flat[i] = orig
        fd = (up - dn) / (2.0 * fd_step)
        analytic = float(tensor.grad.ravel()[i]) if tensor.grad is not None else 0.0
        denom = max(abs(analytic), abs(fd))
        if denom > 1e-6:
            err = abs(analytic - fd) / denom
            ok = err < 1e-4
        else:
            err = abs(analytic - fd)
            ok = err < 1e-6
        max_rel = max(max_rel, err)
        entries.append({"name": name, "index": i, "analytic": analytic, "fd": fd, "error": err, "status": "ok" if ok else "FAIL"})
        checked += 1
    return {
        "component": component,
        "checked": checked,
        "max_error": max_rel,
        "passed": all(e.get("status") != "FAIL" for e in entries),
        "entries": entries,
    }
