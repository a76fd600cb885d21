"""Deterministic word-level tokenizer with atomic task and visual tokens.

Text is split on whitespace; the special tokens keep their bracket surface
forms ("[T2I]", "[SOI]", ...) and always tokenize to a single id. Unknown
words map to a reserved unknown id that sits outside the max_size budget.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigurationError, DecodeError

SPECIAL_SURFACES = {
    "bos": "[BOS]",
    "eos": "[EOS]",
    "pad": "[PAD]",
    "t2i": "[T2I]",
    "i2t": "[I2T]",
    "soi": "[SOI]",
    "eoi": "[EOI]",
    "img": "[IMG]",
}
UNK_SURFACE = "[UNK]"
N_SPECIALS = 8


@dataclass(frozen=True)
class SpecialTokens:
    bos: int = 0
    eos: int = 1
    pad: int = 2
    t2i: int = 3
    i2t: int = 4
    soi: int = 5
    eoi: int = 6
    img: int = 7
    unk: int = 8  # reserved ninth entry, outside the max_size budget


@dataclass
class Vocabulary:
    entries: dict[str, int]  # word -> id, specials included
    specials: SpecialTokens
    id_to_word: list[str] = field(init=False)

    def __post_init__(self):
        self.id_to_word = [""] * len(self.entries)
        for word, idx in self.entries.items():
            self.id_to_word[idx] = word

    @property
    def size(self) -> int:
        return len(self.entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for idx, word in enumerate(self.id_to_word):
                f.write(f"{word}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                word, idx = line.rstrip("\n").split("\t")
                entries[word] = int(idx)
        ids = sorted(entries.values())
        if ids != list(range(len(ids))):
            raise ConfigurationError(f"{path}: vocabulary ids are not contiguous from 0")
        return cls(entries=entries, specials=SpecialTokens())


@dataclass
class TokenSequence:
    ids: list[int]
    loss_mask: list[bool]
    img_positions: list[int]

    def __len__(self):
        return len(self.ids)


def build_vocab(corpus: list[str], max_size: int) -> Vocabulary:
    """Frequency vocabulary: 8 specials, the reserved unknown id, then the
    top (max_size - 8) words, ties broken lexicographically."""
    if not corpus or not any(text.split() for text in corpus):
        raise ConfigurationError("build_vocab: corpus is empty")
    if max_size < N_SPECIALS:
        raise ConfigurationError(f"build_vocab: max_size {max_size} < {N_SPECIALS} specials")
    counts = Counter()
    for text in corpus:
        counts.update(w for w in text.split() if w not in SPECIAL_SURFACES.values())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max_size - N_SPECIALS]]

    specials = SpecialTokens()
    entries = {SPECIAL_SURFACES[name]: getattr(specials, name) for name in SPECIAL_SURFACES}
    entries[UNK_SURFACE] = specials.unk
    for offset, word in enumerate(kept):
        entries[word] = N_SPECIALS + 1 + offset
    return Vocabulary(entries=entries, specials=specials)


def encode(text: str, vocab: Vocabulary) -> TokenSequence:
    unk = vocab.specials.unk
    ids = [vocab.entries.get(w, unk) for w in text.split()]
    img = vocab.specials.img
    return TokenSequence(
        ids=ids,
        loss_mask=[True] * len(ids),
        img_positions=[i for i, t in enumerate(ids) if t == img],
    )


def decode(seq: TokenSequence | list[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    words = []
    for t in ids:
        if not 0 <= t < vocab.size:
            raise DecodeError(f"token id {t} out of range for vocabulary of size {vocab.size}")
        words.append(vocab.id_to_word[t])
    return " ".join(words)
