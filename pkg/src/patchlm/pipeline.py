"""Instruction template, byte-level tokenizer, sample assembly, loss masks.

The rendered template follows the fixed layout

    {image layout} User:{instruction} Assistant:\x04{answer}<EOS>

where the image layout is the raster-scan patch sequence with a NEWLINE
token closing each patch row. Text is tokenized per UTF-8 byte (ids 0..255);
the answer-start marker is the literal 0x04 byte, so it keeps its byte id.
NEWLINE/EOS/PAD are reserved ids at the top of the 512-slot vocabulary.

Training supervises only the answer span: the loss mask is true exactly for
the positions strictly after the answer-start marker through EOS inclusive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ContractError, DataError
from .model import SequenceBuilder, SequenceInput
from .patchify import PatchGrid, RawImage, ResizePolicy, load_image, patchify

VOCAB_SIZE = 512
ANSWER_START = 0x04  # literal byte, after "Assistant:"
NEWLINE = 509  # image-row terminator
EOS = 510
PAD = 511
SPECIAL_TOKENS = {"ANSWER_START": ANSWER_START, "NEWLINE": NEWLINE, "EOS": EOS, "PAD": PAD}


def tokenize_text(text: str) -> list[int]:
    """UTF-8 byte ids; reversible by construction."""
    return list(text.encode("utf-8"))


def detokenize(ids, errors: str = "strict") -> str:
    ids = list(ids)
    if any(not 0 <= i < 256 for i in ids):
        bad = next(i for i in ids if not 0 <= i < 256)
        raise ContractError(f"token id {bad} is not a text byte")
    return bytes(ids).decode("utf-8", errors=errors)


@dataclass
class InstructionSample:
    image_ref: Union[str, Path, RawImage]
    instruction: str
    answer: str
    dataset: str = ""

    def __post_init__(self):
        if not self.instruction:
            raise ContractError("instruction must be non-empty")
        if not self.answer:
            raise ContractError("answer must be non-empty")
        for label, text in (("instruction", self.instruction), ("answer", self.answer)):
            if "\x04" in text:
                raise ContractError(f"{label} contains the reserved answer-start byte")
        if isinstance(self.image_ref, (str, Path)) and not str(self.image_ref):
            raise ContractError("image reference must be non-empty")


def _pre_answer_text(instruction: str) -> str:
    return f" User:{instruction} Assistant:\x04"


def render_template(sample: InstructionSample) -> tuple[str, str]:
    """(pre-answer text incl. the answer-start marker, answer text)."""
    return _pre_answer_text(sample.instruction), sample.answer


def prompt_sequence(
    instruction: str,
    image: Union[str, Path, RawImage],
    policy: ResizePolicy,
    rng: np.random.Generator | None = None,
) -> SequenceInput:
    """Inference-time prompt: image layout + template text up to the
    answer-start marker; generation continues from there."""
    if not instruction:
        raise ContractError("instruction must be non-empty")
    if "\x04" in instruction:
        raise ContractError("instruction contains the reserved answer-start byte")
    img = image if isinstance(image, RawImage) else load_image(image)
    builder = image_layout(patchify(img, policy, rng))
    builder.add_tokens(tokenize_text(_pre_answer_text(instruction)))
    return builder.build()


@dataclass
class TokenizedSample:
    sequence: SequenceInput
    loss_mask: np.ndarray  # bool per position; True only on answer+EOS
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequence)


def image_layout(grid: PatchGrid, builder: SequenceBuilder | None = None) -> SequenceBuilder:
    """Raster-scan patches with a NEWLINE token after each patch row."""
    builder = builder or SequenceBuilder()
    for r in range(grid.rows):
        builder.add_patches(grid.patches[r * grid.cols : (r + 1) * grid.cols])
        builder.add_token(NEWLINE)
    return builder


def build_sample(
    sample: InstructionSample,
    policy: ResizePolicy,
    rng: np.random.Generator | None = None,
) -> TokenizedSample:
    if isinstance(sample.image_ref, RawImage):
        img = sample.image_ref
    else:
        img = load_image(sample.image_ref)  # raises DataError naming the path
    grid = patchify(img, policy, rng)
    builder = image_layout(grid)
    pre, answer = render_template(sample)
    pre_ids = tokenize_text(pre)
    ans_ids = tokenize_text(answer)
    builder.add_tokens(pre_ids)
    builder.add_tokens(ans_ids)
    builder.add_token(EOS)
    seq = builder.build()
    mask = np.zeros(len(seq), dtype=bool)
    answer_span = grid.layout_len + len(pre_ids)
    mask[answer_span : answer_span + len(ans_ids) + 1] = True
    side = grid.cols * grid.patch_side
    meta = {
        "dataset": sample.dataset,
        "resolution": f"{grid.cols * grid.patch_side}x{grid.rows * grid.patch_side}",
        "image_positions": grid.layout_len,
        "side": side,
    }
    return TokenizedSample(sequence=seq, loss_mask=mask, meta=meta)


@dataclass
class CollatedBatch:
    """Right-padded batch; pads are excluded from attention keys and loss."""

    sequences: list[SequenceInput]
    loss_masks: list[np.ndarray]
    valid_lens: list[int]
    width: int


def collate_batch(samples: list[TokenizedSample], pad_id: int = PAD) -> CollatedBatch:
    if not samples:
        raise ContractError("cannot collate an empty batch")
    width = max(len(s) for s in samples)
    sequences, masks, valid = [], [], []
    for s in samples:
        seq, mask = s.sequence, s.loss_mask
        valid.append(len(seq))
        for _ in range(width - len(seq)):
            seq = seq.with_token(pad_id)
        mask = np.concatenate([mask, np.zeros(width - len(mask), dtype=bool)])
        sequences.append(seq)
        masks.append(mask)
    return CollatedBatch(sequences=sequences, loss_masks=masks, valid_lens=valid, width=width)


# -- dataset files ---------------------------------------------------------------


def load_jsonl_dataset(path) -> list[InstructionSample]:
    """One JSON object per line: {"image", "instruction", "answer", "dataset"}."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            image = obj["image"]
            if not Path(image).is_absolute():
                image = path.parent / image
            samples.append(
                InstructionSample(
                    image_ref=image,
                    instruction=obj["instruction"],
                    answer=obj["answer"],
                    dataset=obj.get("dataset", path.stem),
                )
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}:{i + 1}: bad record: {exc}") from exc
    return samples
