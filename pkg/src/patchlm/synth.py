"""Deterministic synthetic fixtures: a memorizable color-naming task for
overfitting runs, and a small multiple-choice QA set for the evaluator."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .patchify import RawImage, save_ppm

# 20 well-separated RGB colors; answers are the single bytes 'a'..'t'
COLOR_TABLE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190),
    (0, 128, 128), (230, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def make_color_dataset(out_dir, n: int = 20, side: int = 60, instruction: str = "What color?"):
    """Write n solid-color PPMs plus a JSONL dataset and a mixture manifest.

    Returns (manifest_path, dataset_path). Answers are one byte each, so a
    tiny decoder can memorize the task end to end.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n > len(COLOR_TABLE):
        raise ValueError(f"at most {len(COLOR_TABLE)} distinct colors available")
    lines = []
    for i in range(n):
        img = RawImage.solid(COLOR_TABLE[i], side, side)
        name = f"color_{i:02d}.ppm"
        save_ppm(img, out_dir / name)
        lines.append(
            json.dumps(
                {
                    "image": name,
                    "instruction": instruction,
                    "answer": chr(ord("a") + i),
                    "dataset": "colors",
                }
            )
        )
    dataset_path = out_dir / "colors.jsonl"
    dataset_path.write_text("\n".join(lines) + "\n")
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"entries": [{"name": "colors", "path": "colors.jsonl", "pair_count": n}]}, indent=2
        )
    )
    return manifest_path, dataset_path


QA_TYPES = ("identification", "numerical", "color", "other")

_SHAPES = ("cup", "key", "coin", "pen", "clip")
_COLORS = ("red", "green", "blue", "yellow")


def make_qa_fixture(out_dir, n: int = 20, seed: int = 0):
    """Write n QA records (>= 3 question types) with tiny synthetic images.

    Returns the JSONL path. Each record: image_ref, question, 4 distinct
    options, gold letter, free-form gold equal to the gold option, qtype.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        qtype = QA_TYPES[i % len(QA_TYPES)]
        img_name = f"scene_{i:02d}.ppm"
        color_idx = int(rng.integers(len(_COLORS)))
        count = int(rng.integers(1, 5))
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        u8 = np.full((60, 60, 3), 220, dtype=np.uint8)
        tint = COLOR_TABLE[color_idx]
        for k in range(count):  # small colored squares, ~1% of the image each
            y, x = 6 + 12 * (k % 4), 6 + 12 * (k // 4)
            u8[y : y + 6, x : x + 6] = tint
        save_ppm(RawImage.from_u8(u8), out_dir / img_name)

        if qtype == "identification":
            question = "What is the small object next to the sink?"
            options = list(_SHAPES[:4])
            gold = shape if shape in options else options[int(rng.integers(4))]
        elif qtype == "numerical":
            question = "How many small squares are on the counter?"
            options = ["1", "2", "3", "4"]
            gold = str(count)
        elif qtype == "color":
            question = "What color is the small square?"
            options = list(_COLORS)
            gold = _COLORS[color_idx]
        else:
            question = "Where is the smallest object?"
            options = ["on the table", "on the floor", "on the shelf", "in the drawer"]
            gold = options[int(rng.integers(4))]
        order = rng.permutation(4)
        shuffled = [options[j] for j in order]
        gold_letter = "ABCD"[shuffled.index(gold)]
        records.append(
            {
                "id": f"qa{i:03d}",
                "image_ref": img_name,
                "question": question,
                "options": shuffled,
                "gold_letter": gold_letter,
                "gold_freeform": gold,
                "qtype": qtype,
            }
        )
    path = out_dir / "qa_fixture.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path
