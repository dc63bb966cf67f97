"""Regenerate the bundled 200-caption corpus asset.

Composition is fixed: 150 paraphrasable captions (shape-headed region and
global phrasings) and 50 non-paraphrasable ones (abstract-headed,
unknown-noun, and empty-synonym heads), for a deterministic 75% coverage.
"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from selfeq.data import COLOR_WORDS, SHAPE_WORDS  # noqa: E402

LOCATIONS = ["top left", "top right", "bottom left", "bottom right", "center"]
SYNONYM_HEADS = ["disc", "roundel", "box", "quadrate", "trigon", "wedge", "plus", "crux", "hoop", "annulus"]
SIZES = ["small", "big", "tiny", "large"]
UNKNOWN_NOUNS = ["chair", "lamp", "window", "table", "door", "tree", "cloud", "house"]
ABSTRACT = ["scene", "photo", "image", "picture"]


def main(out_path: Path) -> None:
    rng = np.random.default_rng(2024)
    rows = []

    def pick(xs):
        return xs[int(rng.integers(len(xs)))]

    def add(kind, caption):
        rows.append(
            {
                "sample_id": f"corpus-{len(rows):03d}",
                "image": "unused.rgb",
                "caption_kind": kind,
                "caption": caption,
                "split": "train",
            }
        )

    # 90 region-style paraphrasable captions
    region_templates = [
        lambda c, s, l: f"a {c} {s} in the {l}",
        lambda c, s, l: f"the {pick(SIZES)} {c} {s} near the {l}",
        lambda c, s, l: f"there is a {c} {s} at the {l}",
        lambda c, s, l: f"a {pick(SIZES)} {c} {s}",
        lambda c, s, l: f"a {c} {s} beside a {pick(COLOR_WORDS)} {pick(SHAPE_WORDS)}",
    ]
    for i in range(90):
        shape = pick(SHAPE_WORDS + SYNONYM_HEADS)
        caption = region_templates[i % len(region_templates)](
            pick(COLOR_WORDS), shape, pick(LOCATIONS)
        )
        add("region", caption)

    # 60 global-style paraphrasable captions
    preambles = ["a scene with", "a photo of", "an image of", "a picture of"]
    for i in range(60):
        n = 2 + i % 2
        objs = " and ".join(
            f"a {pick(COLOR_WORDS)} {pick(SHAPE_WORDS + SYNONYM_HEADS)}" for _ in range(n)
        )
        add("global", f"{pick(preambles)} {objs}")

    # 20 abstract-headed failures
    for i in range(20):
        add("region", f"a {pick(SIZES)} {pick(ABSTRACT)}" if i % 2 else f"a lovely {pick(ABSTRACT)}")

    # 15 unknown-noun failures
    for i in range(15):
        add("region", f"a {pick(SIZES)} {pick(UNKNOWN_NOUNS)} near the {pick(LOCATIONS)}")

    # 15 empty-synonym-head failures
    for _ in range(15):
        add("region", f"a {pick(COLOR_WORDS)} blob in the {pick(LOCATIONS)}")

    assert len(rows) == 200
    with out_path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    print(f"wrote {len(rows)} captions to {out_path}")


if __name__ == "__main__":
    main(Path(__file__).resolve().parent.parent / "src" / "selfeq" / "assets" / "corpus.jsonl")
