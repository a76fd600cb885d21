"""Task-token routing and the metric harness, on a freshly tuned model.

Uses the CLI pipeline end to end into runs/demo05, then asks, generates,
edits, and reads the evaluation report back.
"""

import json
from pathlib import Path

from genvit.cli import main

ROOT = Path("runs/demo05")


def run(*argv):
    code = main(list(argv))
    assert code == 0, argv
    return code


run("synth-corpus", "--out", str(ROOT / "corpus"), "--seed", "11",
    "--count-natural-language", "40", "--count-editing", "120",
    "--count-generation", "300", "--count-understanding", "300",
    "--holdout-scenes", "64", "--eval-generation", "66",
    "--eval-editing", "16", "--eval-understanding", "16")
run("build-data", "--corpus", str(ROOT / "corpus"), "--out", str(ROOT / "data"),
    "--seed", "11", "--total", "800", "--n-img-tokens", "16")
run("pretrain-clip", "--corpus", str(ROOT / "corpus"), "--data", str(ROOT / "data"),
    "--out", str(ROOT / "clip"), "--seed", "1", "--steps", "500", "--batch-size", "48")
run("pretrain-diffusion", "--model", str(ROOT / "clip" / "checkpoint.bin"),
    "--corpus", str(ROOT / "corpus"), "--out", str(ROOT / "diff"),
    "--seed", "2", "--vae-steps", "500", "--unet-steps", "800")
run("train", "--model", str(ROOT / "diff" / "checkpoint.bin"), "--data", str(ROOT / "data"),
    "--out", str(ROOT / "tuned"), "--seed", "3", "--steps", "300")

ckpt = str(ROOT / "tuned" / "checkpoint.bin")

# [T2I] route: caption -> image
run("generate", "--model", ckpt, "--prompt", "a large blue square at center",
    "--seed", "5", "--out", str(ROOT / "generated.ppm"))

# editing route: source image + instruction -> image
src = sorted((ROOT / "corpus" / "images").glob("*circle*.ppm"))[0]
run("edit", "--model", ckpt, "--image", str(src), "--instruction", "make the circle magenta",
    "--seed", "5", "--out", str(ROOT / "edited.ppm"))

# [I2T] route: question about an image -> text
run("ask", "--model", ckpt, "--prompt", "Question: what color is the shape Answer briefly.",
    "--image", str(src), "--out", str(ROOT / "answer.txt"))
print("answer:", (ROOT / "answer.txt").read_text().strip())

# the metric harness
run("evaluate", "--model", ckpt, "--data", str(ROOT / "data"), "--out", str(ROOT / "eval"),
    "--seed", "7", "--guidance-scale", "4.0", "--sample-steps", "50")
print((ROOT / "eval" / "report.txt").read_text())
