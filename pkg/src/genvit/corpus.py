"""Synthetic shape world: renders, captions, QA, edit triples, chat snippets.

The world is a closed grid of scenes (size x color x shape x position). A
scene renders to one 32x32 image and captions deterministically, so every
downstream artifact is a pure function of (spec, seed). Scenes are split into
a train pool and a held-out pool; all evaluation data comes from the held-out
pool only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .images import ppm_write

COLORS = {
    "red": (0.88, 0.12, 0.12),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.92, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.78, 0.85),
}
SHAPES = ("circle", "square", "triangle")
SIZES = {"small": 3, "large": 5}
GRID = {
    "top left": (6, 6),
    "top center": (16, 6),
    "top right": (26, 6),
    "middle left": (6, 16),
    "center": (16, 16),
    "middle right": (26, 16),
    "bottom left": (6, 26),
    "bottom center": (16, 26),
    "bottom right": (26, 26),
}
BACKGROUND = 1.0

FAMILIES = ("natural_language", "editing", "generation", "understanding")


@dataclass(frozen=True)
class Scene:
    size: str
    color: str
    shape: str
    position: str

    def caption(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at {self.position}"

    def key(self) -> str:
        return f"{self.size}_{self.color}_{self.shape}_{self.position.replace(' ', '_')}"


def all_scenes() -> list[Scene]:
    return [
        Scene(sz, c, sh, p)
        for sz in SIZES
        for c in COLORS
        for sh in SHAPES
        for p in GRID
    ]


def shape_mask(shape: str, cx: int, cy: int, r: int, canvas: int) -> np.ndarray:
    y, x = np.mgrid[0:canvas, 0:canvas]
    if shape == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if shape == "square":
        return np.maximum(np.abs(x - cx), np.abs(y - cy)) <= r
    if shape == "triangle":
        return (y >= cy - r) & (y <= cy + r) & (np.abs(x - cx) <= (y - cy + r) / 2.0)
    raise ConfigurationError(f"unknown shape {shape}")


def render(scene: Scene, canvas: int = 32) -> np.ndarray:
    img = np.full((canvas, canvas, 3), BACKGROUND, dtype=np.float32)
    cx, cy = GRID[scene.position]
    mask = shape_mask(scene.shape, cx, cy, SIZES[scene.size], canvas)
    img[mask] = np.asarray(COLORS[scene.color], dtype=np.float32)
    return img


# -- question/answer and chat material ------------------------------------------

QA_FORMS = (
    ("what color is the shape", lambda s: s.color),
    ("what shape is shown", lambda s: s.shape),
    ("where is the shape", lambda s: s.position),
    ("what size is the shape", lambda s: s.size),
)

CHAT_FORMS = (
    ("name one color you know", lambda rng: rng.choice(sorted(COLORS))),
    ("name one shape you know", lambda rng: rng.choice(SHAPES)),
    ("how many shapes are there", lambda rng: "three"),
    ("how many colors are there", lambda rng: "six"),
    ("what sizes can a shape have", lambda rng: "small or large"),
    ("how many grid positions are there", lambda rng: "nine"),
)


@dataclass
class CorpusSpec:
    canvas: int = 32
    counts: dict = field(
        default_factory=lambda: {
            "natural_language": 300,
            "editing": 600,
            "generation": 1200,
            "understanding": 1500,
        }
    )
    holdout_scenes: int = 96
    eval_generation: int = 96
    eval_editing: int = 64
    eval_understanding: int = 64


@dataclass
class RawSourceRecord:
    family: str
    text_turns: list  # [(role, text), ...]
    input_image_ref: str | None = None
    target_image_ref: str | None = None

    def validate(self):
        has_in, has_tgt = self.input_image_ref is not None, self.target_image_ref is not None
        expected = {
            "natural_language": (False, False),
            "editing": (True, True),
            "generation": (False, True),
            "understanding": (True, False),
        }[self.family]
        if (has_in, has_tgt) != expected:
            raise ConfigurationError(
                f"{self.family} record has image refs (input={has_in}, target={has_tgt})"
            )


@dataclass
class SyntheticCorpus:
    sources: dict  # family -> list[RawSourceRecord]
    images: dict  # ref -> (H,W,3) float array
    train_scenes: list
    holdout_scenes: list
    eval_sources: dict  # family -> list[RawSourceRecord], from held-out scenes
    spec: CorpusSpec
    seed: int


def split_scenes(spec: CorpusSpec, seed: int) -> tuple[list[Scene], list[Scene]]:
    scenes = all_scenes()
    if not 0 < spec.holdout_scenes < len(scenes):
        raise ConfigurationError(f"holdout_scenes must be in (0, {len(scenes)})")
    order = np.random.default_rng(seed_mix(seed, "scene-split")).permutation(len(scenes))
    held = [scenes[i] for i in order[: spec.holdout_scenes]]
    train = [scenes[i] for i in order[spec.holdout_scenes :]]
    return train, held


def seed_mix(seed: int, tag: str) -> int:
    from .params import seed_from

    return seed_from(seed, tag)


def _scene_ref(scene: Scene) -> str:
    return scene.key() + ".ppm"


def _edit_pair(rng: np.random.Generator, pool: list[Scene]) -> tuple[Scene, str, Scene]:
    src = pool[rng.integers(len(pool))]
    new_color = sorted(c for c in COLORS if c != src.color)[rng.integers(len(COLORS) - 1)]
    tgt = Scene(src.size, new_color, src.shape, src.position)
    instruction = f"make the {src.shape} {new_color}"
    return src, instruction, tgt


def _qa_record(rng: np.random.Generator, pool: list[Scene]) -> tuple[Scene, str, str]:
    scene = pool[rng.integers(len(pool))]
    q, answer_fn = QA_FORMS[rng.integers(len(QA_FORMS))]
    return scene, q, answer_fn(scene)


def generate_synthetic_corpus(spec: CorpusSpec, seed: int) -> SyntheticCorpus:
    """Deterministic stand-in corpus for the four source families."""
    for family in spec.counts:
        if family not in FAMILIES:
            raise ConfigurationError(f"unknown family {family}")
    train, held = split_scenes(spec, seed)
    images: dict[str, np.ndarray] = {}

    def ref_for(scene: Scene) -> str:
        ref = _scene_ref(scene)
        if ref not in images:
            images[ref] = render(scene, spec.canvas)
        return ref

    def make_family(family: str, n: int, pool: list[Scene], tag: str) -> list[RawSourceRecord]:
        rng = np.random.default_rng(seed_mix(seed, f"{tag}:{family}"))
        out = []
        for _ in range(n):
            if family == "natural_language":
                n_turns = int(rng.integers(1, 3))
                turns = []
                for _ in range(n_turns):
                    q, a_fn = CHAT_FORMS[rng.integers(len(CHAT_FORMS))]
                    answer = a_fn(rng) if callable(a_fn) else a_fn
                    turns += [("user", q), ("assistant", answer)]
                out.append(RawSourceRecord(family, turns))
            elif family == "editing":
                src, instruction, tgt = _edit_pair(rng, pool)
                out.append(
                    RawSourceRecord(
                        family,
                        [("user", instruction)],
                        input_image_ref=ref_for(src),
                        target_image_ref=ref_for(tgt),
                    )
                )
            elif family == "generation":
                scene = pool[rng.integers(len(pool))]
                # caption-only turn; caption inversion happens in the mixture step
                out.append(
                    RawSourceRecord(family, [("caption", scene.caption())], target_image_ref=ref_for(scene))
                )
            else:  # understanding
                scene, q, a = _qa_record(rng, pool)
                out.append(
                    RawSourceRecord(family, [("user", q), ("assistant", a)], input_image_ref=ref_for(scene))
                )
        for rec in out:
            rec.validate()
        return out

    sources = {f: make_family(f, spec.counts.get(f, 0), train, "train") for f in FAMILIES}
    eval_counts = {
        "generation": spec.eval_generation,
        "editing": spec.eval_editing,
        "understanding": spec.eval_understanding,
    }
    eval_sources = {f: make_family(f, n, held, "eval") for f, n in eval_counts.items()}
    return SyntheticCorpus(
        sources=sources,
        images=images,
        train_scenes=train,
        holdout_scenes=held,
        eval_sources=eval_sources,
        spec=spec,
        seed=seed,
    )


# -- disk io ---------------------------------------------------------------------


def save_corpus(corpus: SyntheticCorpus, out_dir):
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for ref in sorted(corpus.images):
        ppm_write(img_dir / ref, corpus.images[ref])

    def dump(records_by_family, path):
        with open(path, "w", encoding="utf-8") as f:
            for family in FAMILIES:
                for rec in records_by_family.get(family, []):
                    f.write(
                        json.dumps(
                            {
                                "family": rec.family,
                                "turns": rec.text_turns,
                                "input_image": rec.input_image_ref,
                                "target_image": rec.target_image_ref,
                            },
                            sort_keys=True,
                            separators=(",", ":"),
                        )
                        + "\n"
                    )

    dump(corpus.sources, out / "sources.jsonl")
    dump(corpus.eval_sources, out / "eval_sources.jsonl")
    manifest = {
        "seed": corpus.seed,
        "spec": asdict(corpus.spec),
        "counts": {f: len(corpus.sources.get(f, [])) for f in FAMILIES},
        "eval_counts": {f: len(corpus.eval_sources.get(f, [])) for f in corpus.eval_sources},
        "train_scenes": [s.key() for s in corpus.train_scenes],
        "holdout_scenes": [s.key() for s in corpus.holdout_scenes],
    }
    with open(out / "corpus_manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_sources(path) -> dict:
    by_family: dict[str, list[RawSourceRecord]] = {f: [] for f in FAMILIES}
    with open(path, encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            rec = RawSourceRecord(
                family=obj["family"],
                text_turns=[tuple(t) for t in obj["turns"]],
                input_image_ref=obj["input_image"],
                target_image_ref=obj["target_image"],
            )
            rec.validate()
            by_family[rec.family].append(rec)
    return by_family


def corpus_vocab_texts(sources: dict, extra: list[str] = ()) -> list[str]:
    """Every text that must be coverable by the vocabulary."""
    texts = []
    for family in FAMILIES:
        for rec in sources.get(family, []):
            texts += [t for _, t in rec.text_turns]
    texts.extend(extra)
    return texts
