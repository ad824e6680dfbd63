"""Small separable multimodal corpora for tests and demos.

Run ``python -m semfuse.synthetic OUT_DIR --n 50`` to write ``OUT_DIR/data.jsonl``
plus images under ``OUT_DIR/images``.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .data import BinaryLabel, Category, PostRecord, Source, save_dataset

CLASS_WORDS = {
    None: ["shabbat", "shalom", "friends", "community", "holiday", "family"],
    Category.POLITICAL: ["zionist", "government", "media", "control", "politics"],
    Category.ECONOMIC: ["money", "bankers", "finance", "wealth", "cash"],
    Category.RELIGIOUS: ["christ", "rabbi", "torah", "messiah", "satan"],
    Category.RACIAL: ["race", "holocaust", "white", "hitler", "blood"],
}
CLASS_COLORS = {
    None: (40, 160, 60),
    Category.POLITICAL: (200, 40, 40),
    Category.ECONOMIC: (220, 200, 30),
    Category.RELIGIOUS: (40, 60, 200),
    Category.RACIAL: (150, 40, 170),
}
FILLER = ["the", "jewish", "people", "today", "post", "about", "israeli", "news"]


def _image(color, rng, size=64) -> Image.Image:
    base = np.array(color, dtype=np.float64)[None, None, :]
    noise = rng.normal(0, 12, size=(size, size, 3))
    arr = np.clip(base + noise, 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def make_corpus(out_dir, n: int = 50, seed: int = 0, antisemitic_fraction: float = 0.5) -> list[PostRecord]:
    """Write ``n`` posts whose text words and image colour both reveal the class."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cats = list(Category)
    records = []
    for i in range(n):
        antisemitic = rng.random() < antisemitic_fraction
        cat = cats[i % len(cats)] if antisemitic else None
        words = list(rng.choice(CLASS_WORDS[cat], size=3)) + list(rng.choice(FILLER, size=3))
        rng.shuffle(words)
        ocr = " ".join(rng.choice(CLASS_WORDS[cat], size=2)) if rng.random() < 0.84 else ""
        rel = f"images/p{i:04d}.png"
        _image(CLASS_COLORS[cat], rng).save(out_dir / rel)
        records.append(
            PostRecord(
                id=f"p{i:04d}",
                text=" ".join(words),
                image_path=rel,
                ocr_text=ocr,
                binary_label=BinaryLabel.ANTISEMITIC if antisemitic else BinaryLabel.NON_ANTISEMITIC,
                category_label=cat,
                source=Source.GAB if i % 2 else Source.TWITTER,
            )
        )
    save_dataset(records, out_dir / "data.jsonl")
    return records


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    records = make_corpus(args.out_dir, args.n, args.seed)
    print(f"wrote {len(records)} records to {Path(args.out_dir) / 'data.jsonl'}")


if __name__ == "__main__":
    main()
