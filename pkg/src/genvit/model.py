"""The composite model: frozen-after-pretraining perception and decoding
around a trainable projector + language model + generation head."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clip import ToyClip
from .diffusion import LatentDiffusion, NoiseSchedule
from .genhead import GenerationHead
from .params import ParameterStore
from .tokenizer import Vocabulary
from .vlm import LanguageModel, ModelConfig, Projector, VisionEncoder

PRETRAINED_PREFIXES = ("vision/", "clip_text/", "clip/", "vae/", "unet/", "null_cond/")
TUNABLE_PREFIXES = ("projector/", "lm/", "gen_head/")


class GenVit:
    def __init__(self, store: ParameterStore, cfg: ModelConfig, vocab: Vocabulary, schedule: NoiseSchedule | None = None):
        cfg.validate()
        if cfg.vocab_size != vocab.size:
            raise ValueError(f"config vocab_size {cfg.vocab_size} != vocabulary size {vocab.size}")
        self.store = store
        self.cfg = cfg
        self.vocab = vocab
        self.vision = VisionEncoder(store, cfg)
        self.projector = Projector(store, cfg)
        self.lm = LanguageModel(store, cfg)
        self.gen_head = GenerationHead(store, cfg)
        self.diffusion = LatentDiffusion(store, cfg, schedule)
        self.clip = ToyClip(store, cfg, vision=self.vision)

    def img_embedding(self):
        """The [IMG] word-embedding row (trainable through the LM table)."""
        return ad.take(self.lm.tok_emb, self.vocab.specials.img)

    def freeze_pretrained(self):
        for prefix in PRETRAINED_PREFIXES:
            self.store.freeze(prefix)

    def visual_prefix(self, images: np.ndarray):
        """(B,H,W,3) -> (B,P,d_lm) embeddings; encoder output is detached when
        the encoder is frozen (its gradients are never needed then)."""
        if self.store.is_frozen("vision/embed/w"):
            with ad.no_grad():
                feats = self.vision.patch_features(images)
            return self.projector(ad.Tensor(feats.data))
        return self.projector(self.vision.patch_features(images))

    def save(self, path, extra_config: dict | None = None):
        self.store.config.update({f"model.{k}": str(v) for k, v in self.cfg.to_dict().items()})
        sched = self.diffusion.schedule
        self.store.config.update(
            {"sched.steps": str(sched.steps), "sched.beta_start": repr(sched.beta_start), "sched.beta_end": repr(sched.beta_end)}
        )
        if extra_config:
            self.store.config.update({k: str(v) for k, v in extra_config.items()})
        self.store.save(path)

    @classmethod
    def from_checkpoint(cls, path, vocab: Vocabulary, dtype=np.float32) -> "GenVit":
        store = ParameterStore.load(path, dtype=dtype)
        cfg_dict = {k[len("model.") :]: v for k, v in store.config.items() if k.startswith("model.")}
        cfg = ModelConfig.from_dict(cfg_dict)
        schedule = None
        if "sched.steps" in store.config:
            schedule = NoiseSchedule(
                steps=int(store.config["sched.steps"]),
                beta_start=float(store.config["sched.beta_start"]),
                beta_end=float(store.config["sched.beta_end"]),
            )
        return cls(store, cfg, vocab, schedule)

    def astype(self, dtype) -> "GenVit":
        return GenVit(self.store.astype(dtype), self.cfg, self.vocab, self.diffusion.schedule)


def save_model_with_vocab(model: GenVit, out_dir, name: str = "checkpoint.bin", extra_config: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.vocab.save(out / "vocab.tsv")
    path = out / name
    model.save(path, extra_config)
    return path


def load_model(checkpoint_path, dtype=np.float32) -> GenVit:
    path = Path(checkpoint_path)
    vocab = Vocabulary.load(path.parent / "vocab.tsv")
    return GenVit.from_checkpoint(path, vocab, dtype=dtype)
