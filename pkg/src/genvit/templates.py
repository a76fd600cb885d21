"""Prompt templates for the five task families.

Each template fills named slots between fixed delimiter phrases, so a filled
prompt can be parsed back into its slots. "<IMAGE>" is a literal marker word
standing where the visual prefix enters the sequence; the pixels themselves
travel out of band.
"""

from __future__ import annotations

from .errors import TemplateError

IMAGE_MARKER = "<IMAGE>"
USER_MARKER = "user:"
ASSISTANT_MARKER = "assistant:"

TEMPLATES = {
    "short-vqa": "[I2T] <IMAGE> Question: {question} Answer briefly.",
    "long-vqa": "[I2T] <IMAGE> Question: {question} Options: {options} Answer with the best option.",
    "advanced": "[I2T] <IMAGE> Problem: {question} Reason carefully and answer.",
    "generation": "[T2I] Please generate an image of {description}",
    "editing": "[T2I] <IMAGE> Apply this edit: {description}",
}

_SLOTS = {
    "short-vqa": ("question",),
    "long-vqa": ("question", "options"),
    "advanced": ("question",),
    "generation": ("description",),
    "editing": ("description",),
}

# caption-inversion prefixes for text-to-image training records; the first is
# also the canonical evaluation phrasing
GENERATION_PREFIXES = (
    "Please generate an image of {caption}",
    "Create a picture of {caption}",
    "Draw {caption}",
    "I want an image of {caption}",
)


def apply_prompt_template(
    family: str,
    question: str | None = None,
    options: str | None = None,
    description: str | None = None,
) -> str:
    if family not in TEMPLATES:
        raise TemplateError(f"unknown template family {family!r}")
    values = {"question": question, "options": options, "description": description}
    for slot in _SLOTS[family]:
        if values[slot] is None:
            raise TemplateError(f"template {family!r} requires slot {slot!r}")
    fill = {slot: values[slot] for slot in _SLOTS[family]}
    return TEMPLATES[family].format(**fill)


def parse_prompt_template(family: str, prompt: str) -> dict:
    """Recover the filled slots using the template's own delimiters."""
    if family not in TEMPLATES:
        raise TemplateError(f"unknown template family {family!r}")
    template = TEMPLATES[family]
    out = {}
    rest = prompt
    pieces = []
    buf = template
    for slot in _SLOTS[family]:
        head, buf = buf.split("{" + slot + "}", 1)
        pieces.append((head, slot))
    pieces.append((buf, None))
    for i, (literal, slot) in enumerate(pieces):
        if not rest.startswith(literal):
            raise TemplateError(f"prompt does not match template {family!r}")
        rest = rest[len(literal) :]
        if slot is None:
            break
        next_literal = pieces[i + 1][0]
        if next_literal:
            idx = rest.index(next_literal) if next_literal in rest else None
            if idx is None:
                raise TemplateError(f"prompt does not match template {family!r}")
            out[slot] = rest[:idx]
            rest = rest[idx:]
        else:
            out[slot] = rest
            rest = ""
    return out


def template_vocab_texts() -> list[str]:
    """Template skeleton words that the vocabulary must cover."""
    skeletons = []
    for family, template in TEMPLATES.items():
        text = template
        for slot in _SLOTS[family]:
            text = text.replace("{" + slot + "}", "")
        skeletons.append(text)
    skeletons += [t.replace("{caption}", "") for t in GENERATION_PREFIXES]
    skeletons.append(f"{USER_MARKER} {ASSISTANT_MARKER} {IMAGE_MARKER}")
    return skeletons
