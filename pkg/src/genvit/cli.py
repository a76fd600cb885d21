"""Operator surface: one binary, ten subcommands, deterministic runs.

Every subcommand resolves a flat key=value configuration (file < GENVIT_*
environment < flags), routes all randomness through --seed, and writes the
resolved config plus its hash next to its outputs. Exit codes: 0 success,
1 usage/configuration error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import resolve_config, write_resolved
from .corpus import FAMILIES, CorpusSpec, corpus_vocab_texts, generate_synthetic_corpus, load_sources, save_corpus
from .diffusion import NoiseSchedule, SamplerConfig
from .errors import ConfigurationError, GenvitError, UsageError
from .images import ppm_read, ppm_write
from .infer import DecodeConfig, edit_image, generate_image, respond
from .metrics import evaluate
from .mixture import MixtureConfig, build_mixture, invert_captions, load_dataset, save_dataset
from .model import GenVit, load_model, save_model_with_vocab
from .params import ParameterStore
from .templates import GENERATION_PREFIXES, template_vocab_texts
from .tokenizer import Vocabulary, build_vocab
from .train import (
    ImageCache,
    PretrainConfig,
    TrainConfig,
    grad_check,
    pretrain_clip,
    pretrain_diffusion,
    run_training,
)
from .vlm import ModelConfig

MODEL_KEYS = {
    "d_vis": (int, 64),
    "n_vis_layers": (int, 3),
    "n_vis_heads": (int, 4),
    "d_lm": (int, 128),
    "n_layers": (int, 4),
    "n_heads": (int, 4),
    "context_len": (int, 256),
    "n_img_tokens": (int, 16),
    "head_layers": (int, 4),
    "n_latents": (int, 8),
    "d_u": (int, 64),
    "d_clip": (int, 64),
    "patch": (int, 8),
    "image_size": (int, 32),
    "gen_head_causal": (bool, True),
    "img_slot_embeddings": (bool, False),
    "sched_steps": (int, 200),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 0.06),
}

SCHEMAS: dict[str, dict[str, tuple]] = {
    "synth-corpus": {
        "seed": (int, 0),
        "canvas": (int, 32),
        "count_natural_language": (int, 300),
        "count_editing": (int, 600),
        "count_generation": (int, 1500),
        "count_understanding": (int, 1800),
        "holdout_scenes": (int, 96),
        "eval_generation": (int, 96),
        "eval_editing": (int, 64),
        "eval_understanding": (int, 64),
    },
    "build-data": {
        "seed": (int, 0),
        "total": (int, 5000),
        "max_tokens": (int, 2048),
        "n_img_tokens": (int, 16),
        "vocab_size": (int, 512),
        "ratio_natural_language": (float, 0.0193),
        "ratio_editing": (float, 0.0963),
        "ratio_generation": (float, 0.2688),
        "ratio_understanding": (float, 0.6156),
        "mask_user_turns": (bool, True),
        "img_ids_in_lm_loss": (bool, False),
    },
    "pretrain-clip": {
        "seed": (int, 0),
        "init_seed": (int, 0),
        "steps": (int, 800),
        "batch_size": (int, 64),
        "lr": (float, 1e-3),
        "weight_decay": (float, 0.01),
        "warmup": (float, 0.03),
        **MODEL_KEYS,
    },
    "pretrain-diffusion": {
        "seed": (int, 0),
        "vae_steps": (int, 700),
        "unet_steps": (int, 1500),
        "batch_size": (int, 32),
        "lr": (float, 2e-3),
        "warmup": (float, 0.03),
        "cond_dropout": (float, 0.1),
        "kl_weight": (float, 1e-4),
    },
    "train": {
        "seed": (int, 0),
        "steps": (int, 1200),
        "batch_size": (int, 16),
        "lr": (float, 1e-3),
        "weight_decay": (float, 0.1),
        "warmup": (float, 0.03),
        "max_grad_norm": (float, 1.0),
        "lambda_lm": (float, 1.0),
        "lambda_diff": (float, 1.0),
        "cond_dropout": (float, 0.0),
        "checkpoint_every": (int, 0),
    },
    "generate": {
        "seed": (int, 0),
        "guidance_scale": (float, 3.0),
        "sample_steps": (int, 50),
        "max_new_tokens": (int, 40),
    },
    "edit": {
        "seed": (int, 0),
        "guidance_scale": (float, 3.0),
        "sample_steps": (int, 50),
        "max_new_tokens": (int, 40),
    },
    "ask": {
        "seed": (int, 0),
        "max_new_tokens": (int, 16),
        "temperature": (float, 0.0),
    },
    "evaluate": {
        "seed": (int, 0),
        "metrics": (str, "fid,clip_sim,dino_proxy,vqa_exact_match"),
        "guidance_scale": (float, 3.0),
        "sample_steps": (int, 50),
    },
    "grad-check": {
        "seed": (int, 0),
        "components": (str, "projector,lm,gen_head,cross"),
        "n_params": (int, 20),
        "batch_size": (int, 4),
    },
}

PATH_FLAGS = {
    "synth-corpus": ["out"],
    "build-data": ["corpus", "out"],
    "pretrain-clip": ["corpus", "data", "out"],
    "pretrain-diffusion": ["model", "corpus", "out"],
    "train": ["model", "data", "out"],
    "generate": ["model", "prompt", "out"],
    "edit": ["model", "image", "instruction", "out"],
    "ask": ["model", "prompt", "image?", "out?"],
    "evaluate": ["model", "data", "out"],
    "grad-check": ["model", "data", "out"],
}

ALL_KEYS = {k for schema in SCHEMAS.values() for k in schema}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}error: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="genvit", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"{name} (see --help)", add_help=True)
        p.add_argument("--config", default=None, help="key=value config file (default: none)")
        for flag in PATH_FLAGS[name]:
            required = not flag.endswith("?")
            flag = flag.rstrip("?")
            helptext = {
                "out": "output file or directory",
                "corpus": "corpus directory from synth-corpus",
                "data": "dataset directory or records file from build-data",
                "model": "checkpoint file",
                "prompt": "prompt / caption text",
                "image": "input image (binary PPM)",
                "instruction": "edit instruction text",
            }[flag]
            p.add_argument(f"--{flag}", required=required, help=helptext + (" (required)" if required else " (default: none)"))
        for key, (kind, default) in schema.items():
            p.add_argument(
                f"--{key.replace('_', '-')}",
                dest=key,
                default=None,
                help=f"{key} (default: {default})",
            )
    return parser


def _resolved(args, name: str) -> dict:
    schema = SCHEMAS[name]
    flag_values = {k: getattr(args, k) for k in schema}
    return resolve_config(schema, args.config, flag_values, all_known_keys=ALL_KEYS)


# -- handlers -------------------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    cfg = _resolved(args, "synth-corpus")
    spec = CorpusSpec(
        canvas=cfg["canvas"],
        counts={f: cfg[f"count_{f}"] for f in FAMILIES},
        holdout_scenes=cfg["holdout_scenes"],
        eval_generation=cfg["eval_generation"],
        eval_editing=cfg["eval_editing"],
        eval_understanding=cfg["eval_understanding"],
    )
    corpus = generate_synthetic_corpus(spec, seed=cfg["seed"])
    save_corpus(corpus, args.out)
    write_resolved(cfg, args.out)
    total = sum(len(v) for v in corpus.sources.values())
    print(f"wrote corpus with {total} source records, {len(corpus.images)} images to {args.out}")
    return 0


def _gen_pairs(sources) -> list:
    return [(r.text_turns[0][1], r.target_image_ref) for r in sources.get("generation", [])]


def cmd_build_data(args) -> int:
    cfg = _resolved(args, "build-data")
    corpus_dir = Path(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sources = load_sources(corpus_dir / "sources.jsonl")
    eval_sources = load_sources(corpus_dir / "eval_sources.jsonl")
    sources["generation"] = invert_captions(_gen_pairs(sources), seed=cfg["seed"])
    # the eval split uses the canonical generation phrasing so captions are
    # recoverable for the similarity metrics
    eval_sources["generation"] = invert_captions(_gen_pairs(eval_sources), templates=[GENERATION_PREFIXES[0]], seed=cfg["seed"])

    vocab = build_vocab(corpus_vocab_texts(sources, template_vocab_texts()), max_size=cfg["vocab_size"])
    vocab.save(out / "vocab.tsv")

    ratios = {f: cfg[f"ratio_{f}"] for f in FAMILIES}
    mix_cfg = MixtureConfig(
        ratios=ratios, total=cfg["total"], max_tokens=cfg["max_tokens"], seed=cfg["seed"],
        mask_user_turns=cfg["mask_user_turns"], img_ids_in_lm_loss=cfg["img_ids_in_lm_loss"],
    )
    train_ds = build_mixture(sources, mix_cfg, vocab, n_img=cfg["n_img_tokens"])
    image_rel = os.path.relpath(corpus_dir / "images", out)
    save_dataset(train_ds, out / "train.records", vocab, cfg["n_img_tokens"], cfg["max_tokens"], image_root_rel=image_rel)

    eval_counts = {f: len(eval_sources.get(f, [])) for f in ("editing", "generation", "understanding")}
    eval_total = sum(eval_counts.values())
    if eval_total:
        eval_ratios = {f: n / eval_total for f, n in eval_counts.items() if n}
        eval_cfg = MixtureConfig(
            ratios=eval_ratios, total=eval_total, max_tokens=cfg["max_tokens"], seed=cfg["seed"],
            mask_user_turns=cfg["mask_user_turns"], img_ids_in_lm_loss=cfg["img_ids_in_lm_loss"],
        )
        eval_ds = build_mixture(eval_sources, eval_cfg, vocab, n_img=cfg["n_img_tokens"], held_out=True)
        save_dataset(eval_ds, out / "eval.records", vocab, cfg["n_img_tokens"], cfg["max_tokens"], image_root_rel=image_rel)
    write_resolved(cfg, out)
    print(f"wrote {train_ds.manifest['total']} train records (families {train_ds.manifest['families']}) to {out}")
    return 0


def _model_config_from(cfg: dict, vocab_size: int) -> tuple[ModelConfig, NoiseSchedule]:
    mc = ModelConfig(
        image_size=cfg["image_size"],
        patch=cfg["patch"],
        d_vis=cfg["d_vis"],
        n_vis_layers=cfg["n_vis_layers"],
        n_vis_heads=cfg["n_vis_heads"],
        d_lm=cfg["d_lm"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        vocab_size=vocab_size,
        context_len=cfg["context_len"],
        n_img=cfg["n_img_tokens"],
        img_slot_embeddings=cfg["img_slot_embeddings"],
        head_layers=cfg["head_layers"],
        gen_head_causal=cfg["gen_head_causal"],
        n_latents=cfg["n_latents"],
        d_u=cfg["d_u"],
        d_clip=cfg["d_clip"],
    ).validate()
    sched = NoiseSchedule(steps=cfg["sched_steps"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"])
    return mc, sched


def cmd_pretrain_clip(args) -> int:
    cfg = _resolved(args, "pretrain-clip")
    corpus_dir = Path(args.corpus)
    vocab = Vocabulary.load(Path(args.data) / "vocab.tsv")
    mc, sched = _model_config_from(cfg, vocab.size)
    model = GenVit(ParameterStore(init_seed=cfg["init_seed"]), mc, vocab, sched)
    sources = load_sources(corpus_dir / "sources.jsonl")
    eval_sources = load_sources(corpus_dir / "eval_sources.jsonl")
    images = _corpus_images(corpus_dir)
    pcfg = PretrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        weight_decay=cfg["weight_decay"], warmup_ratio=cfg["warmup"], seed=cfg["seed"],
    )
    report = pretrain_clip(_gen_pairs(sources), images, model, pcfg, heldout_pairs=_gen_pairs(eval_sources))
    save_model_with_vocab(model, args.out, extra_config={"phase": "clip"})
    write_resolved(cfg, args.out)
    (Path(args.out) / "clip_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"pretrained contrastive encoders: {report}")
    return 0


def _corpus_images(corpus_dir: Path) -> dict:
    images = {}
    for p in sorted((corpus_dir / "images").iterdir()):
        if p.suffix == ".ppm":
            images[p.name] = ppm_read(p)
    return images


def cmd_pretrain_diffusion(args) -> int:
    cfg = _resolved(args, "pretrain-diffusion")
    model = load_model(args.model)
    corpus_dir = Path(args.corpus)
    sources = load_sources(corpus_dir / "sources.jsonl")
    images = _corpus_images(corpus_dir)
    pairs = _gen_pairs(sources)
    pcfg = PretrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["lr"], warmup_ratio=cfg["warmup"],
        seed=cfg["seed"], vae_steps=cfg["vae_steps"], unet_steps=cfg["unet_steps"],
        kl_weight=cfg["kl_weight"], cond_dropout=cfg["cond_dropout"],
    )
    report = pretrain_diffusion([r for _, r in pairs], [c for c, _ in pairs], images, model, pcfg)
    save_model_with_vocab(model, args.out, extra_config={"phase": "diffusion"})
    write_resolved(cfg, args.out)
    (Path(args.out) / "diffusion_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"pretrained diffusion decoder: {report}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(args, "train")
    model = load_model(args.model)
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "train.records"
    dataset = load_dataset(data_path, model.vocab)
    tc = TrainConfig(
        batch_size=cfg["batch_size"], max_grad_norm=cfg["max_grad_norm"], weight_decay=cfg["weight_decay"],
        learning_rate=cfg["lr"], warmup_ratio=cfg["warmup"], steps=cfg["steps"], seed=cfg["seed"],
        lambda_lm=cfg["lambda_lm"], lambda_diff=cfg["lambda_diff"], cond_dropout=cfg["cond_dropout"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    reports = run_training(dataset, model, tc, out_dir=args.out, image_loader=ImageCache(dataset))
    write_resolved(cfg, args.out)
    last = reports[-1] if reports else {}
    print(f"instruction tuning done: {len(reports)} steps, final loss {last.get('loss')}")
    return 0


def cmd_generate(args) -> int:
    cfg = _resolved(args, "generate")
    model = load_model(args.model)
    sampler = SamplerConfig(cfg["guidance_scale"], cfg["sample_steps"], cfg["seed"])
    img = generate_image(args.prompt, model, sampler, DecodeConfig(max_new_tokens=cfg["max_new_tokens"], seed=cfg["seed"]))
    ppm_write(args.out, img)
    write_resolved(cfg, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _resolved(args, "edit")
    model = load_model(args.model)
    source = ppm_read(args.image)
    sampler = SamplerConfig(cfg["guidance_scale"], cfg["sample_steps"], cfg["seed"])
    img = edit_image(source, args.instruction, model, sampler, DecodeConfig(max_new_tokens=cfg["max_new_tokens"], seed=cfg["seed"]))
    ppm_write(args.out, img)
    write_resolved(cfg, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_ask(args) -> int:
    cfg = _resolved(args, "ask")
    model = load_model(args.model)
    image = ppm_read(args.image) if args.image else None
    prompt = args.prompt if args.prompt.startswith(("[I2T]", "[T2I]")) else f"[I2T] {args.prompt}"
    resp = respond(prompt, model, image=image, decode_cfg=DecodeConfig(max_new_tokens=cfg["max_new_tokens"], temperature=cfg["temperature"], seed=cfg["seed"]))
    answer = resp.text.replace(" [EOS]", "").strip()
    print(answer)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(answer + "\n", encoding="utf-8")
        write_resolved(cfg, args.out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolved(args, "evaluate")
    model = load_model(args.model)
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "eval.records"
    evalset = load_dataset(data_path, model.vocab)
    metric_list = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    sampler = SamplerConfig(cfg["guidance_scale"], cfg["sample_steps"], cfg["seed"])
    report = evaluate(model, evalset, metric_list, sampler=sampler, seed=cfg["seed"], out_dir=args.out)
    write_resolved(cfg, args.out)
    for metric in sorted(report.entries):
        print(f"{metric}: {report.value(metric):.6f}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _resolved(args, "grad-check")
    model = load_model(args.model)
    data_path = Path(args.data)
    if data_path.is_dir():
        data_path = data_path / "train.records"
    dataset = load_dataset(data_path, model.vocab)
    loader = ImageCache(dataset)
    with_target = [r for r in dataset.records if r.target_image is not None]
    without = [r for r in dataset.records if r.target_image is None]
    half = max(1, cfg["batch_size"] // 2)
    batch = with_target[:half] + without[: cfg["batch_size"] - half]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    with open(out / "grad_check.jsonl", "w", encoding="utf-8") as f:
        for component in [c.strip() for c in cfg["components"].split(",") if c.strip()]:
            report = grad_check(component, batch, model, loader, seed=cfg["seed"], n_params=cfg["n_params"])
            ok = ok and report["passed"]
            f.write(json.dumps(report, sort_keys=True) + "\n")
            print(f"{component}: checked {report['checked']} params, max error {report['max_error']:.3e} -> {'pass' if report['passed'] else 'FAIL'}")
    write_resolved(cfg, args.out)
    return 0 if ok else 2


HANDLERS = {
    "synth-corpus": cmd_synth_corpus,
    "build-data": cmd_build_data,
    "pretrain-clip": cmd_pretrain_clip,
    "pretrain-diffusion": cmd_pretrain_diffusion,
    "train": cmd_train,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "ask": cmd_ask,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage() + "error: a subcommand is required")
        return HANDLERS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (ConfigurationError, GenvitError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - internal failure boundary
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main(sys.argv[1:]))
