import random
from collections import Counter

import pytest

from genvit.errors import ConfigurationError, DecodeError
from genvit.tokenizer import (
    N_SPECIALS,
    SPECIAL_SURFACES,
    Vocabulary,
    build_vocab,
    decode,
    encode,
)


def test_build_contains_words_and_specials():
    v = build_vocab(["a red circle"], max_size=512)
    for w in ("a", "red", "circle"):
        assert w in v.entries
    for surface in SPECIAL_SURFACES.values():
        assert surface in v.entries
    assert v.entries["[UNK]"] == 8


def test_build_is_deterministic():
    corpus = ["b a a c", "c c b"]
    v1, v2 = build_vocab(corpus, 64), build_vocab(corpus, 64)
    assert v1.entries == v2.entries


def test_top_words_by_frequency_then_lexicographic():
    # brute-force frequency oracle over 1000 distinct words
    rng = random.Random(7)
    words = [f"w{i:04d}" for i in range(1000)]
    corpus = []
    counts = Counter()
    for w in words:
        reps = rng.randint(1, 5)
        counts[w] += reps
        corpus.append(" ".join([w] * reps))
    v = build_vocab(corpus, max_size=108)
    kept = [w for w in v.entries if w not in SPECIAL_SURFACES.values() and w != "[UNK]"]
    assert len(kept) == 100
    expected = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:100]]
    assert sorted(kept) == sorted(expected)
    # ids contiguous from 0
    assert sorted(v.entries.values()) == list(range(v.size))


def test_empty_corpus_rejected():
    with pytest.raises(ConfigurationError):
        build_vocab([], 64)
    with pytest.raises(ConfigurationError):
        build_vocab(["   "], 64)


@pytest.fixture()
def vocab():
    return build_vocab(["generate a red circle at top left make blue square"], 128)


def test_specials_encode_atomically(vocab):
    seq = encode("[T2I]", vocab)
    assert seq.ids == [vocab.specials.t2i]
    assert seq.img_positions == []


def test_img_block_positions(vocab):
    seq = encode("[SOI] [IMG] [IMG] [EOI]", vocab)
    s = vocab.specials
    assert seq.ids == [s.soi, s.img, s.img, s.eoi]
    assert seq.img_positions == [1, 2]
    assert seq.loss_mask == [True] * 4


def test_round_trip(vocab):
    text = "generate a red circle"
    assert decode(encode(text, vocab), vocab) == text


def test_decode_specials(vocab):
    s = vocab.specials
    assert decode([s.bos, s.eos], vocab) == "[BOS] [EOS]"
    assert decode([s.img] * 3, vocab) == "[IMG] [IMG] [IMG]"


def test_decode_out_of_range(vocab):
    with pytest.raises(DecodeError):
        decode([vocab.size], vocab)


def test_unknown_maps_to_unk(vocab):
    seq = encode("zebra", vocab)
    assert seq.ids == [vocab.specials.unk]


def test_fuzz_round_trip(vocab):
    # 1000 random token strings over the vocabulary alphabet round-trip exactly
    rng = random.Random(123)
    alphabet = [w for w in vocab.entries]
    for _ in range(1000):
        text = " ".join(rng.choices(alphabet, k=rng.randint(1, 30)))
        seq = encode(text, vocab)
        assert decode(seq, vocab) == text
        assert seq.img_positions == [i for i, t in enumerate(seq.ids) if t == vocab.specials.img]


def test_save_load_round_trip(tmp_path, vocab):
    p = tmp_path / "vocab.tsv"
    vocab.save(p)
    loaded = Vocabulary.load(p)
    assert loaded.entries == vocab.entries
    # specials listed first with bracket forms
    first = p.read_text(encoding="utf-8").splitlines()[:N_SPECIALS]
    assert all(line.split("\t")[0].startswith("[") for line in first)
