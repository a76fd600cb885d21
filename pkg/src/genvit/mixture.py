"""Instruction-mixture pipeline: invert captions, format with task tokens,
filter, truncate, dedup, mix at configured ratios, serialize.

Every record's text field is self-describing: role-marker words ("user:",
"assistant:") delimit turns, so the loss mask is derived from the tokens
alone and the on-disk schema stays flat.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FAMILIES, RawSourceRecord
from .errors import ConfigurationError, InputError
from .params import seed_from
from .templates import (
    ASSISTANT_MARKER,
    GENERATION_PREFIXES,
    IMAGE_MARKER,
    USER_MARKER,
    apply_prompt_template,
)
from .tokenizer import TokenSequence, Vocabulary, decode, encode

TASKS = ("i2t", "t2i", "edit", "text_only")
FAMILY_TO_TASK = {
    "natural_language": "text_only",
    "editing": "edit",
    "generation": "t2i",
    "understanding": "i2t",
}
PAPER_RATIOS = {
    "natural_language": 0.0193,
    "editing": 0.0963,
    "generation": 0.2688,
    "understanding": 0.6156,
}


@dataclass
class MixtureConfig:
    ratios: dict = field(default_factory=lambda: dict(PAPER_RATIOS))
    total: int = 1000
    max_tokens: int = 2048
    seed: int = 0
    mask_user_turns: bool = True
    # supervise the [IMG] ids themselves in the LM loss; off by default because
    # the constant predict-next-[IMG] target collapses the very hidden states
    # the generation head consumes (the block delimiters stay supervised)
    img_ids_in_lm_loss: bool = False

    def validate(self):
        if self.total <= 0:
            raise ConfigurationError("mixture total must be > 0")
        if self.max_tokens <= 0:
            raise ConfigurationError("max_tokens must be > 0")
        if abs(sum(self.ratios.values()) - 1.0) > 1e-9:
            raise ConfigurationError(f"ratios sum to {sum(self.ratios.values())}, expected 1")
        for family in self.ratios:
            if family not in FAMILIES:
                raise ConfigurationError(f"unknown family {family}")


@dataclass
class InstructionRecord:
    task: str
    text: str
    tokens: TokenSequence
    input_image: str | None
    target_image: str | None
    record_id: str = ""

    def content_key(self) -> str:
        ids = ",".join(str(i) for i in self.tokens.ids)
        return f"{self.task}|{ids}|{self.input_image}|{self.target_image}"


@dataclass
class InstructionDataset:
    records: list
    manifest: dict
    images_root: Path | None = None

    def __len__(self):
        return len(self.records)

    def load_image(self, ref: str) -> np.ndarray:
        from .images import ppm_read

        if self.images_root is None:
            raise ConfigurationError("dataset has no images_root")
        return ppm_read(self.images_root / ref)


# -- caption inversion ------------------------------------------------------------


def invert_captions(pairs: list, templates: list | tuple = GENERATION_PREFIXES, seed: int = 0) -> list:
    """Turn (caption, image_ref) pairs into generation-family source records."""
    if not templates:
        raise ConfigurationError("invert_captions: no templates given")
    for t in templates:
        if "{caption}" not in t:
            raise ConfigurationError(f"template {t!r} is missing the {{caption}} slot")
    rng = np.random.default_rng(seed_from(seed, "invert-captions"))
    out = []
    for caption, image_ref in pairs:
        template = templates[rng.integers(len(templates))]
        out.append(
            RawSourceRecord(
                "generation",
                [("user", template.format(caption=caption))],
                target_image_ref=image_ref,
            )
        )
    return out


# -- formatting -------------------------------------------------------------------


def img_block(n_img: int) -> str:
    return "[SOI] " + " ".join(["[IMG]"] * n_img) + " [EOI]"


def format_source(rec: RawSourceRecord, n_img: int) -> tuple[str, str]:
    """(task, text) for one source record; text carries bracket specials."""
    task = FAMILY_TO_TASK[rec.family]
    if task == "text_only":
        body = " ".join(f"{USER_MARKER} {q} {ASSISTANT_MARKER} {a}" for (_, q), (_, a) in zip(rec.text_turns[::2], rec.text_turns[1::2]))
        return task, f"[BOS] [I2T] {body} [EOS]"
    if task == "i2t":
        question = rec.text_turns[0][1]
        answer = rec.text_turns[1][1]
        user_body = apply_prompt_template("short-vqa", question=question).split(" ", 1)[1]
        return task, f"[BOS] [I2T] {USER_MARKER} {user_body} {ASSISTANT_MARKER} {answer} [EOS]"
    if task == "t2i":
        prompt = rec.text_turns[0][1]
        return task, f"[BOS] [T2I] {USER_MARKER} {prompt} {ASSISTANT_MARKER} {img_block(n_img)} [EOS]"
    # edit
    instruction = rec.text_turns[0][1]
    user_body = apply_prompt_template("editing", description=instruction).split(" ", 1)[1]
    return task, f"[BOS] [T2I] {USER_MARKER} {user_body} {ASSISTANT_MARKER} {img_block(n_img)} [EOS]"


def derive_loss_mask(ids: list, vocab: Vocabulary, mask_user_turns: bool = True, img_ids_in_lm_loss: bool = False) -> list:
    """True over assistant-turn tokens: answer text, block delimiters, [EOS].

    The [IMG] ids inside the block are excluded unless img_ids_in_lm_loss is
    set (their prediction target is constant, which erases the caption signal
    from the hidden states the generation head reads)."""
    if not mask_user_turns:
        mask = [t != vocab.specials.pad for t in ids]
    else:
        user_id = vocab.entries.get(USER_MARKER, -1)
        asst_id = vocab.entries.get(ASSISTANT_MARKER, -1)
        mask, in_assistant = [], False
        for t in ids:
            if t == asst_id:
                mask.append(False)
                in_assistant = True
            elif t == user_id:
                mask.append(False)
                in_assistant = False
            else:
                mask.append(in_assistant)
    if not img_ids_in_lm_loss:
        img = vocab.specials.img
        mask = [m and t != img for m, t in zip(mask, ids)]
    return mask


def tokenize_record(task: str, text: str, vocab: Vocabulary, mask_user_turns: bool = True, img_ids_in_lm_loss: bool = False) -> TokenSequence:
    seq = encode(text, vocab)
    seq.loss_mask = derive_loss_mask(seq.ids, vocab, mask_user_turns, img_ids_in_lm_loss)
    return seq


def default_turn_filter(rec: RawSourceRecord) -> bool:
    """Drop records containing empty or whitespace-only turns."""
    return all(text.strip() for _, text in rec.text_turns)


# -- validation -------------------------------------------------------------------


def validate_record(rec: InstructionRecord, vocab: Vocabulary, n_img: int, max_tokens: int):
    s = vocab.specials
    ids = rec.tokens.ids
    if rec.task not in TASKS:
        raise InputError(f"unknown task {rec.task}")
    if len(rec.tokens.loss_mask) != len(ids):
        raise InputError("loss_mask length mismatch")
    if len(ids) > max_tokens:
        raise InputError(f"record has {len(ids)} tokens > max {max_tokens}")
    if rec.tokens.img_positions != [i for i, t in enumerate(ids) if t == s.img]:
        raise InputError("img_positions out of sync with ids")
    n_t2i, n_i2t = ids.count(s.t2i), ids.count(s.i2t)
    n_soi, n_eoi, n_imgs = ids.count(s.soi), ids.count(s.eoi), ids.count(s.img)
    if rec.task in ("t2i", "edit"):
        if n_t2i != 1 or n_i2t != 0:
            raise InputError(f"{rec.task} record must contain exactly one [T2I]")
        if n_soi != 1 or n_eoi != 1 or n_imgs != n_img:
            raise InputError(f"{rec.task} record must contain one [SOI] [IMG]x{n_img} [EOI] block")
        lo, hi = ids.index(s.soi), ids.index(s.eoi)
        if hi - lo != n_img + 1 or any(t != s.img for t in ids[lo + 1 : hi]):
            raise InputError("image block is not contiguous [SOI] [IMG]... [EOI]")
    else:
        if n_i2t != 1 or n_t2i != 0:
            raise InputError(f"{rec.task} record must contain exactly one [I2T]")
        if n_soi or n_eoi or n_imgs:
            raise InputError(f"{rec.task} record must not contain visual-block tokens")
    needs = {"i2t": (True, False), "t2i": (False, True), "edit": (True, True), "text_only": (False, False)}[rec.task]
    if (rec.input_image is not None, rec.target_image is not None) != needs:
        raise InputError(f"{rec.task} record has wrong image refs")


# -- filter / truncate / dedup ------------------------------------------------------


def filter_and_truncate(drafts: list, max_tokens: int, vocab: Vocabulary, n_img: int, mask_user_turns: bool = True, img_ids_in_lm_loss: bool = False):
    """Truncate from the end (whole [SOI]..[EOI] block dropped if it would be
    cut), drop empties/invalids with counts, dedup by content hash."""
    s = vocab.specials
    kept, stats = [], {"dropped_empty": 0, "dropped_invalid": 0, "dropped_duplicate": 0, "truncated": 0}
    seen = set()
    for rec in drafts:
        ids = rec.tokens.ids
        if len(ids) > max_tokens:
            cut = max_tokens
            if s.soi in ids:
                lo = ids.index(s.soi)
                hi = ids.index(s.eoi) if s.eoi in ids else len(ids) - 1
                if lo < cut <= hi + 1:
                    cut = lo  # never split the visual block
            ids = ids[:cut]
            stats["truncated"] += 1
            text = decode(ids, vocab)
            rec = InstructionRecord(rec.task, text, tokenize_record(rec.task, text, vocab, mask_user_turns, img_ids_in_lm_loss), rec.input_image, rec.target_image)
        if not ids or not any(rec.tokens.loss_mask):
            stats["dropped_empty"] += 1
            continue
        try:
            validate_record(rec, vocab, n_img, max_tokens)
        except InputError:
            stats["dropped_invalid"] += 1
            continue
        key = hashlib.sha256(rec.content_key().encode()).hexdigest()
        if key in seen:
            stats["dropped_duplicate"] += 1
            continue
        seen.add(key)
        kept.append(rec)
    return kept, stats


# -- largest-remainder allocation -----------------------------------------------------


def family_quotas(ratios: dict, total: int) -> dict:
    """Integer counts per family by largest remainder; ties broken by larger
    ratio, then family declaration order."""
    families = [f for f in FAMILIES if ratios.get(f, 0.0) > 0.0]
    raw = {f: total * ratios[f] for f in families}
    base = {f: int(np.floor(raw[f])) for f in families}
    left = total - sum(base.values())
    order = sorted(
        families,
        key=lambda f: (-(raw[f] - base[f]), -ratios[f], FAMILIES.index(f)),
    )
    for f in order[:left]:
        base[f] += 1
    return base


# -- the mixture builder ---------------------------------------------------------------


def build_mixture(
    sources: dict,
    config: MixtureConfig,
    vocab: Vocabulary,
    n_img: int,
    turn_filter=default_turn_filter,
    held_out: bool = False,
) -> InstructionDataset:
    config.validate()
    quotas = family_quotas(config.ratios, config.total)
    pools = {}
    all_stats = {}
    for family, quota in quotas.items():
        family_sources = [r for r in sources.get(family, []) if turn_filter(r)]
        if quota > 0 and not family_sources:
            raise ConfigurationError(f"family {family} has ratio > 0 but no source records")
        drafts = []
        for src in family_sources:
            task, text = format_source(src, n_img)
            drafts.append(
                InstructionRecord(
                    task,
                    text,
                    tokenize_record(task, text, vocab, config.mask_user_turns, config.img_ids_in_lm_loss),
                    src.input_image_ref,
                    src.target_image_ref,
                )
            )
        pool, stats = filter_and_truncate(drafts, config.max_tokens, vocab, n_img, config.mask_user_turns, config.img_ids_in_lm_loss)
        if quota > 0 and not pool:
            raise ConfigurationError(f"family {family}: no records survived filtering")
        pools[family] = pool
        all_stats[family] = stats

    records = []
    for family in FAMILIES:
        if family not in quotas:
            continue
        pool, quota = pools[family], quotas[family]
        rng = np.random.default_rng(seed_from(config.seed, "sample", family))
        replace = quota > len(pool)  # oversample with replacement only when needed
        idx = rng.choice(len(pool), size=quota, replace=replace)
        records.extend(pool[i] for i in idx)

    shuffle_rng = np.random.default_rng(seed_from(config.seed, "shuffle"))
    order = shuffle_rng.permutation(len(records))
    records = [records[i] for i in order]

    # assign ids; oversampled repeats of one source get distinct replica hashes
    rebuilt, replicas = [], {}
    for rec in records:
        key = rec.content_key()
        n = replicas.get(key, 0)
        replicas[key] = n + 1
        rid = hashlib.sha256(f"{key}#{n}".encode()).hexdigest()[:32]
        rebuilt.append(InstructionRecord(rec.task, rec.text, rec.tokens, rec.input_image, rec.target_image, rid))

    per_family = {f: sum(1 for r in rebuilt if r.task == FAMILY_TO_TASK[f]) for f in quotas}
    manifest = {
        "total": len(rebuilt),
        "families": per_family,
        "seed": config.seed,
        "config_hash": mixture_config_hash(config, n_img),
        "n_img_tokens": n_img,
        "mask_user_turns": config.mask_user_turns,
        "img_ids_in_lm_loss": config.img_ids_in_lm_loss,
        "held_out": held_out,
        "filter_stats": all_stats,
    }
    return InstructionDataset(records=rebuilt, manifest=manifest)


def mixture_config_hash(config: MixtureConfig, n_img: int) -> str:
    parts = [f"total={config.total}", f"max_tokens={config.max_tokens}", f"seed={config.seed}", f"n_img={n_img}", f"mask_user_turns={config.mask_user_turns}", f"img_ids_in_lm_loss={config.img_ids_in_lm_loss}"]
    parts += [f"ratio.{f}={config.ratios[f]!r}" for f in sorted(config.ratios)]
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


# -- serialization -----------------------------------------------------------------------


def save_dataset(ds: InstructionDataset, path, vocab: Vocabulary, n_img: int, max_tokens: int, image_root_rel: str = "images"):
    """Write line-delimited records plus the sidecar manifest; validates on write."""
    path = Path(path)
    ids_seen = set()
    with open(path, "w", encoding="utf-8") as f:
        for rec in ds.records:
            validate_record(rec, vocab, n_img, max_tokens)
            if rec.record_id in ids_seen:
                raise InputError(f"duplicate record_id {rec.record_id}")
            ids_seen.add(rec.record_id)
            f.write(
                json.dumps(
                    {
                        "record_id": rec.record_id,
                        "task": rec.task,
                        "text": rec.text,
                        "input_image": rec.input_image,
                        "target_image": rec.target_image,
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
    manifest = dict(ds.manifest)
    manifest["image_root"] = image_root_rel
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(path, vocab: Vocabulary) -> InstructionDataset:
    """Read records, re-tokenize, validate every invariant on read."""
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    n_img = manifest["n_img_tokens"]
    mask_user = manifest.get("mask_user_turns", True)
    img_in_loss = manifest.get("img_ids_in_lm_loss", False)
    records, ids_seen = [], set()
    with open(path, encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            tokens = tokenize_record(obj["task"], obj["text"], vocab, mask_user, img_in_loss)
            rec = InstructionRecord(obj["task"], obj["text"], tokens, obj["input_image"], obj["target_image"], obj["record_id"])
            validate_record(rec, vocab, n_img, max_tokens=10**9)
            if rec.record_id in ids_seen:
                raise InputError(f"duplicate record_id {rec.record_id}")
            ids_seen.add(rec.record_id)
            records.append(rec)
    images_root = (path.parent / manifest["image_root"]).resolve()
    return InstructionDataset(records=records, manifest=manifest, images_root=images_root)
