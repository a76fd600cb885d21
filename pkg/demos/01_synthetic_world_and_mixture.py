"""The synthetic shape world and the instruction mixture.

Renders a few scenes, shows caption / QA / edit source records, then builds
a mixture at the production ratios and inspects the largest-remainder
allocation and one serialized record.
"""

from pathlib import Path

from genvit.corpus import CorpusSpec, corpus_vocab_texts, generate_synthetic_corpus, save_corpus
from genvit.images import ppm_write
from genvit.mixture import MixtureConfig, build_mixture, family_quotas, invert_captions, save_dataset
from genvit.templates import template_vocab_texts
from genvit.tokenizer import build_vocab

out = Path("runs/demo01")
out.mkdir(parents=True, exist_ok=True)

spec = CorpusSpec(
    counts={"natural_language": 40, "editing": 80, "generation": 200, "understanding": 200},
    holdout_scenes=48,
)
corpus = generate_synthetic_corpus(spec, seed=7)
print(f"{len(corpus.images)} distinct renders, {len(corpus.train_scenes)} train scenes, "
      f"{len(corpus.holdout_scenes)} held-out scenes")

# a caption and its render
gen = corpus.sources["generation"][0]
print("caption:", gen.text_turns[0][1])
ppm_write(out / "sample_render.ppm", corpus.images[gen.target_image_ref])

# an edit triple: source, instruction, target
edit = corpus.sources["editing"][0]
print("edit instruction:", edit.text_turns[0][1])
ppm_write(out / "edit_source.ppm", corpus.images[edit.input_image_ref])
ppm_write(out / "edit_target.ppm", corpus.images[edit.target_image_ref])

# a QA pair
qa = corpus.sources["understanding"][0]
print("question:", qa.text_turns[0][1], "-> answer:", qa.text_turns[1][1])

# caption inversion turns (caption, image) pairs into generation prompts
pairs = [(r.text_turns[0][1], r.target_image_ref) for r in corpus.sources["generation"]]
sources = dict(corpus.sources)
sources["generation"] = invert_captions(pairs, seed=7)
print("inverted prompt:", sources["generation"][0].text_turns[0][1])

vocab = build_vocab(corpus_vocab_texts(sources, template_vocab_texts()), max_size=512)
print("vocabulary size:", vocab.size)

# largest-remainder allocation at the production ratios
cfg = MixtureConfig(total=1000, seed=7)
print("quotas for total=1000:", family_quotas(cfg.ratios, 1000))

ds = build_mixture(sources, cfg, vocab, n_img=16)
save_corpus(corpus, out / "corpus")
save_dataset(ds, out / "train.records", vocab, 16, cfg.max_tokens, image_root_rel="corpus/images")
rec = ds.records[0]
print("first record:", rec.task, "|", rec.text[:90], "...")
print(f"dataset written under {out}")
