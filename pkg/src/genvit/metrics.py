"""Metric harness: Fréchet distance over pooled encoder features, cosine
similarity metrics, prompt templates, and the evaluation orchestrator.

All feature extraction uses the frozen contrastive encoders, never the
tuned model's trainable parts. FID runs in float64 with the matrix square
root taken by eigendecomposition of the symmetric product form.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import SamplerConfig, sample_latents_batch
from .errors import ConfigurationError, InputError, NumericError
from .genhead import head_forward
from .images import ppm_write, uniform_noise_images
from .infer import NEG, DecodeConfig, _prompt_ids, respond
from .mixture import InstructionDataset
from .model import GenVit
from .params import seed_from
from .templates import apply_prompt_template, parse_prompt_template
from .tokenizer import decode

EXTRACTOR_ID = "toy-clip-vision-pooled/v1"
EIG_CLAMP = 1e-10
RANK_TOL = 1e-10
DIAG_LOAD = 1e-6

__all__ = [
    "FeatureSet",
    "EvalReport",
    "fid",
    "clip_similarity",
    "dino_score",
    "apply_prompt_template",
    "parse_prompt_template",
    "evaluate",
    "extract_features",
]


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d)
    source: str = "real"  # "real" | "generated"
    extractor: str = EXTRACTOR_ID

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InputError("feature set must be a (n, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("feature set contains non-finite values")


def extract_features(images: np.ndarray, model: GenVit, source: str = "real") -> FeatureSet:
    """Pooled frozen-encoder features for a stack of images."""
    feats = []
    for lo in range(0, len(images), 64):
        from . import autodiff as ad

        with ad.no_grad():
            feats.append(model.clip.image_features(np.asarray(images[lo : lo + 64])).data)
    return FeatureSet(np.concatenate(feats, axis=0), source=source)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.where(vals < EIG_CLAMP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _stats(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    x = fs.features
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    if np.linalg.eigvalsh(cov).min() < RANK_TOL:
        warnings.warn(
            f"rank-deficient covariance (n={len(x)}, d={x.shape[1]}): applying diagonal loading {DIAG_LOAD}",
            stacklevel=3,
        )
        cov = cov + DIAG_LOAD * np.eye(cov.shape[0])
    return mu, cov


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.features.shape[1] != b.features.shape[1]:
        raise InputError("feature sets must share a dimension")
    mu_a, cov_a = _stats(a)
    mu_b, cov_b = _stats(b)
    a_half = _sqrt_psd(cov_a)
    inner = a_half @ cov_b @ a_half
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    tr_sqrt = np.sqrt(np.where(vals < EIG_CLAMP, 0.0, vals)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm embedding in similarity computation")
    return x / norms


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (_unit_rows(a) * _unit_rows(b)).sum(axis=-1)


def clip_similarity(images: np.ndarray, texts: list[str], model: GenVit) -> float:
    """Mean cosine between paired image and text embeddings."""
    if len(images) != len(texts):
        raise InputError("images and texts must pair up")
    img_emb = model.clip.embed_images(np.asarray(images))
    txt_emb = model.clip.embed_texts(list(texts), model.vocab)
    return float(cosine_rows(img_emb, txt_emb).mean())


def dino_score(outputs: np.ndarray, references: np.ndarray, model: GenVit) -> float:
    """Feature-similarity proxy: mean cosine of pooled vision features."""
    if len(outputs) != len(references):
        raise InputError("outputs and references must pair up")
    fa = extract_features(np.asarray(outputs), model).features
    fb = extract_features(np.asarray(references), model).features
    return float(cosine_rows(fa, fb).mean())


@dataclass
class EvalReport:
    entries: dict  # metric name -> {"value", "n", "extractor", "config_hash"}

    def write(self, out_dir, name: str = "report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for metric in sorted(self.entries):
                entry = dict(self.entries[metric])
                entry["metric"] = metric
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        width = max(len(m) for m in self.entries) + 2
        lines = ["metric".ljust(width) + "value        n", "-" * (width + 15)]
        for metric in sorted(self.entries):
            e = self.entries[metric]
            lines.append(f"{metric.ljust(width)}{e['value']:<13.6f}{e['n']}")
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def value(self, metric: str) -> float:
        return self.entries[metric]["value"]


def _record_prompt(record, vocab) -> str:
    """Rebuild the inference prompt from a stored record: task token + user body."""
    ids = record.tokens.ids
    s = vocab.specials
    task_tok = "[T2I]" if record.task in ("t2i", "edit") else "[I2T]"
    user_id = vocab.entries["user:"]
    asst_id = vocab.entries["assistant:"]
    lo = ids.index(user_id) + 1
    hi = ids.index(asst_id)
    return f"{task_tok} {decode(ids[lo:hi], vocab)}"


def _record_answer(record, vocab) -> str:
    ids = record.tokens.ids
    asst_id = vocab.entries["assistant:"]
    lo = ids.index(asst_id) + 1
    hi = len(ids) - 1  # drop [EOS]
    return decode(ids[lo:hi], vocab)


KNOWN_METRICS = ("fid", "clip_sim", "dino_proxy", "vqa_exact_match")


def evaluate(
    model: GenVit,
    evalset: InstructionDataset,
    metric_list: list[str],
    sampler: SamplerConfig | None = None,
    seed: int = 0,
    out_dir=None,
    noise_baselines: bool = True,
) -> EvalReport:
    """Run the generation / editing / understanding passes needed by the
    requested metrics and assemble a report (plus images on disk)."""
    sampler = sampler or SamplerConfig()
    for m in metric_list:
        if m not in KNOWN_METRICS:
            raise ConfigurationError(f"unknown metric {m!r}; known: {KNOWN_METRICS}")
    vocab = model.vocab
    gen_records = [r for r in evalset.records if r.task == "t2i"]
    edit_records = [r for r in evalset.records if r.task == "edit"]
    und_records = [r for r in evalset.records if r.task == "i2t"]
    entries: dict[str, dict] = {}
    config_hash = evalset.manifest.get("config_hash", "")
    out = Path(out_dir) if out_dir is not None else None

    def put(metric, value, n):
        entries[metric] = {"value": float(value), "n": int(n), "extractor": EXTRACTOR_ID, "config_hash": config_hash}

    needs_generation = any(m in metric_list for m in ("fid", "clip_sim"))
    if needs_generation:
        if not gen_records:
            raise ConfigurationError("fid/clip_sim need t2i records with target images in the evalset")
        captions, real = [], []
        latent_sets = []
        from . import autodiff as ad

        for rec in gen_records:
            prompt = _record_prompt(rec, vocab)
            body = prompt.split(" ", 1)[1]
            caption = parse_prompt_template("generation", f"[T2I] {body}")["description"]
            captions.append(caption)
            real.append(evalset.load_image(rec.target_image))
            resp_latents = _latents_for_prompt(model, prompt)
            latent_sets.append(resp_latents)
        z0 = sample_latents_batch(
            np.stack(latent_sets).astype(np.float32),
            SamplerConfig(sampler.guidance_scale, sampler.sample_steps, seed_from(seed, "gen-noise")),
            model.diffusion,
        )
        generated = model.diffusion.decode_scaled(z0)
        real = np.stack(real)
        if out is not None:
            img_dir = out / "generated"
            img_dir.mkdir(parents=True, exist_ok=True)
            for rec, img in zip(gen_records, generated):
                ppm_write(img_dir / f"{rec.record_id}.ppm", img)
        if "clip_sim" in metric_list:
            k = min(64, len(captions))
            img_emb = model.clip.embed_images(generated[:k])
            txt_emb = model.clip.embed_texts(captions[:k], vocab)
            sims = cosine_rows(img_emb, txt_emb)
            shuffle = np.random.default_rng(seed_from(seed, "clip-shuffle")).permutation(k)
            sims_shuffled = cosine_rows(img_emb, txt_emb[shuffle])
            diffs = sims - sims_shuffled
            se = diffs.std(ddof=1) / np.sqrt(k)
            put("clip_sim", sims.mean(), k)
            put("clip_sim_shuffled", sims_shuffled.mean(), k)
            put("clip_sim_gain_se", diffs.mean() / se if se > 0 else np.inf, k)
        if "fid" in metric_list:
            real_fs = extract_features(real, model, "real")
            gen_fs = extract_features(generated, model, "generated")
            put("fid", fid(gen_fs, real_fs), len(generated))
            if noise_baselines:
                noise = uniform_noise_images(len(real), model.cfg.image_size, seed_from(seed, "noise"))
                noise_fs = extract_features(noise, model, "generated")
                put("fid_noise_baseline", fid(noise_fs, real_fs), len(noise))

    if "dino_proxy" in metric_list:
        if not edit_records:
            raise ConfigurationError("dino_proxy needs edit records with ground-truth targets")
        outputs, truths = [], []
        for rec in edit_records:
            prompt = _record_prompt(rec, vocab)
            source = evalset.load_image(rec.input_image)
            latents = _latents_for_prompt(model, prompt, image=source)
            outputs.append(latents)
            truths.append(evalset.load_image(rec.target_image))
        z0 = sample_latents_batch(
            np.stack(outputs).astype(np.float32),
            SamplerConfig(sampler.guidance_scale, sampler.sample_steps, seed_from(seed, "edit-noise")),
            model.diffusion,
        )
        edited = model.diffusion.decode_scaled(z0)
        truths = np.stack(truths)
        if out is not None:
            img_dir = out / "edited"
            img_dir.mkdir(parents=True, exist_ok=True)
            for rec, img in zip(edit_records, edited):
                ppm_write(img_dir / f"{rec.record_id}.ppm", img)
        put("dino_proxy", dino_score(edited, truths, model), len(edited))
        unrelated = np.roll(truths, 1, axis=0)  # deterministic derangement
        put("dino_proxy_unrelated", dino_score(edited, unrelated, model), len(edited))

    if "vqa_exact_match" in metric_list:
        if not und_records:
            raise ConfigurationError("vqa_exact_match needs i2t records in the evalset")
        hits = 0
        for rec in und_records:
            prompt = _record_prompt(rec, vocab)
            img = evalset.load_image(rec.input_image)
            resp = respond(prompt, model, image=img, decode_cfg=DecodeConfig(max_new_tokens=8, seed=seed))
            answer = resp.text.replace(" [EOS]", "").strip()
            hits += int(answer == _record_answer(rec, vocab))
        put("vqa_exact_match", hits / len(und_records), len(und_records))

    report = EvalReport(entries=entries)
    if out is not None:
        report.write(out)
    return report


def _latents_for_prompt(model: GenVit, prompt: str, image: np.ndarray | None = None) -> np.ndarray:
    """Constrained-decode the prompt and return the generation head's latent
    set (diffusion sampling is batched by the caller for speed)."""
    from . import autodiff as ad

    s = model.vocab.specials
    task_id, ids = _prompt_ids(model, prompt)
    vis = None
    if image is not None:
        with ad.no_grad():
            vis = model.visual_prefix(image[None]).data[0]
    logits, _, cache = model.lm.prefill(ids, vis, img_id=s.img)
    n_img = model.cfg.n_img
    img_hiddens = []
    # greedy decode with the block constraint, text budget small
    structural = [s.bos, s.pad, s.t2i, s.i2t, s.img, s.eoi]
    budget = n_img + 6
    forced = []
    for step_i in range(budget):
        if forced:
            tok = forced.pop(0)
        else:
            masked = logits.copy()
            masked[structural] = NEG
            masked[s.eos] = NEG
            if budget - step_i <= n_img + 2:
                tok = s.soi
            else:
                tok = int(np.argmax(masked))
        if tok == s.soi and not forced:
            forced = [s.img] * n_img + [s.eoi]
        slot = len(img_hiddens) if tok == s.img else None
        logits, hidden = model.lm.decode_step(cache, tok, img_slot=slot)
        if tok == s.img:
            img_hiddens.append(hidden)
        if tok == s.eoi:
            break
    with ad.no_grad():
        states = np.stack(img_hiddens) + model.img_embedding().data
        return head_forward(states.astype(np.float32), model.gen_head).data
