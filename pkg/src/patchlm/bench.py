"""Throughput measurement and reference-vs-optimized equivalence.

The throughput metric is tokens per second, where a sample's token count is
its full sequence: image patch tokens + newline tokens (token_budget) + text
tokens. Per-batch rates (batch tokens / batch wall time) are averaged over a
measurement window.

The optimized inference path recomputes attention in key blocks with a
streaming max/denominator (no n x n probability matrix); its only contract
is numerical equivalence with the reference forward at 64-bit precision.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .model import MASK_VALUE, ModelParams, SequenceInput, TEXT, forward
from .patchify import token_budget
from .pipeline import NEWLINE
from .tensor import no_grad


# -- optimized forward ---------------------------------------------------------


def _ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    d = x.shape[-1]
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = np.outer(positions, inv_freq)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _blocked_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int, causal: bool
) -> np.ndarray:
    """Streaming softmax over key blocks; memory O(n*block) per head."""
    heads, n, hd = q.shape
    scale = 1.0 / math.sqrt(hd)
    acc = np.zeros((heads, n, hd))
    running_max = np.full((heads, n, 1), -np.inf)
    denom = np.zeros((heads, n, 1))
    rows = np.arange(n)[:, None]
    for start in range(0, n, block):
        stop = min(start + block, n)
        scores = q @ np.swapaxes(k[:, start:stop], -1, -2) * scale
        if causal:
            scores = scores + np.where(rows >= np.arange(start, stop)[None, :], 0.0, MASK_VALUE)
        block_max = np.maximum(running_max, scores.max(axis=-1, keepdims=True))
        correction = np.exp(running_max - block_max)
        weights = np.exp(scores - block_max)
        denom = denom * correction + weights.sum(axis=-1, keepdims=True)
        acc = acc * correction + weights @ v[:, start:stop]
        running_max = block_max
    return acc / denom


def forward_logits_blocked(
    params: ModelParams,
    seq: SequenceInput,
    block_size: int = 64,
    causal: bool = True,
) -> np.ndarray:
    """Pure-numpy forward with block-streamed attention; returns (n, vocab)."""
    cfg = params.config
    n = len(seq)
    p = {name: t.data for name, t in params.tensors.items()}
    x = np.empty((n, cfg.hidden))
    patch_rows = seq.kinds != TEXT
    if patch_rows.any():
        x[patch_rows] = seq.patches @ p["patch_projection.weight"] + p["patch_projection.bias"]
    text_rows = ~patch_rows
    if text_rows.any():
        x[text_rows] = p["token_embedding.weight"][seq.token_ids]
    positions = np.arange(n)
    for i in range(cfg.n_layers):
        L = f"layers.{i}"
        h = _ln(x, p[f"{L}.ln_attn.gain"], p[f"{L}.ln_attn.bias"])

        def heads(name):
            return (h @ p[name]).reshape(n, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)

        q = _ln(heads(f"{L}.attn.wq"), p[f"{L}.attn.q_norm.gain"], p[f"{L}.attn.q_norm.bias"])
        k = _ln(heads(f"{L}.attn.wk"), p[f"{L}.attn.k_norm.gain"], p[f"{L}.attn.k_norm.bias"])
        q = _rope(q, positions, cfg.rope_base)
        k = _rope(k, positions, cfg.rope_base)
        mixed = _blocked_attention(q, k, heads(f"{L}.attn.wv"), block_size, causal)
        x = x + mixed.transpose(1, 0, 2).reshape(n, cfg.hidden) @ p[f"{L}.attn.wo"]
        hm = _ln(x, p[f"{L}.ln_mlp.gain"], p[f"{L}.ln_mlp.bias"])
        u = np.maximum(hm @ p[f"{L}.mlp.up"], 0.0)
        x = x + (u * u) @ p[f"{L}.mlp.down"]
    x = _ln(x, p["final_norm.gain"], p["final_norm.bias"])
    return x @ p["output_head.weight"]


def forward_logits_reference(params: ModelParams, seq: SequenceInput) -> np.ndarray:
    with no_grad():
        return forward(seq, params).data


# -- equivalence ---------------------------------------------------------------


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tolerance: float
    cases: int
    passed: bool
    worst_case: int = -1

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"equivalence {status}: max |logit diff| {self.max_abs_diff:.3e} "
            f"over {self.cases} cases (tol {self.tolerance:g})"
        )


def verify_equivalence(
    reference_path: Callable[[SequenceInput], np.ndarray],
    optimized_path: Callable[[SequenceInput], np.ndarray],
    cases: Sequence[SequenceInput],
    tolerance: float = 1e-9,
) -> EquivalenceReport:
    """Max |logit difference| across cases; both paths must share params."""
    if not cases:
        raise ContractError("verify_equivalence needs at least one case")
    worst = 0.0
    worst_case = -1
    for i, seq in enumerate(cases):
        ref = reference_path(seq)
        opt = optimized_path(seq)
        if ref.shape != opt.shape:
            raise ShapeError(
                f"case {i}: output shapes diverge in forward: {ref.shape} vs {opt.shape}"
            )
        diff = float(np.max(np.abs(ref - opt)))
        if diff > worst:
            worst, worst_case = diff, i
    return EquivalenceReport(
        max_abs_diff=worst,
        tolerance=tolerance,
        cases=len(cases),
        passed=worst < tolerance,
        worst_case=worst_case,
    )


# -- throughput ----------------------------------------------------------------


@dataclass
class WorkloadBatch:
    sequences: list[SequenceInput]
    token_count: int  # image + newline + text tokens across the batch
    resolution: int


def synthetic_workload(
    resolution: int,
    batch_size: int,
    text_tokens: int,
    rng: np.random.Generator,
    n_batches: int = 2,
) -> list[WorkloadBatch]:
    """Random square images at a fixed resolution plus random text tails."""
    from .model import SequenceBuilder
    from .patchify import Fixed, RawImage, patchify

    image_tokens, newline_tokens = token_budget(resolution, resolution)
    per_sample = image_tokens + newline_tokens + text_tokens
    batches = []
    for _ in range(n_batches):
        seqs = []
        for _ in range(batch_size):
            u8 = rng.integers(0, 256, size=(resolution, resolution, 3), dtype=np.uint8)
            grid = patchify(RawImage.from_u8(u8), Fixed(resolution))
            b = SequenceBuilder()
            for r in range(grid.rows):
                b.add_patches(grid.patches[r * grid.cols : (r + 1) * grid.cols])
                b.add_token(NEWLINE)
            b.add_tokens(rng.integers(0, 256, size=text_tokens))
            seqs.append(b.build())
        batches.append(
            WorkloadBatch(sequences=seqs, token_count=per_sample * batch_size, resolution=resolution)
        )
    return batches


@dataclass
class ThroughputReport:
    tokens_per_second: float  # mean over per-batch rates
    window_seconds: float  # actual elapsed time
    batches_measured: int
    batches_excluded: int  # zero-duration batches (clock resolution)
    config: dict = field(default_factory=dict)


def measure_throughput(
    forward_fn: Callable[[SequenceInput], np.ndarray],
    workload: Sequence[WorkloadBatch],
    window_seconds: float,
) -> ThroughputReport:
    """Cycle the workload until the window elapses; average per-batch rates."""
    if window_seconds < 1.0:
        raise ContractError(f"window must be >= 1s, got {window_seconds}")
    if not workload:
        raise ContractError("empty workload")
    rates: list[float] = []
    excluded = 0
    start = time.perf_counter()
    i = 0
    while True:
        batch = workload[i % len(workload)]
        i += 1
        t0 = time.perf_counter()
        for seq in batch.sequences:
            forward_fn(seq)
        dt = time.perf_counter() - t0
        if dt == 0.0:
            excluded += 1
        else:
            rates.append(batch.token_count / dt)
        if time.perf_counter() - start >= window_seconds:
            break
    elapsed = time.perf_counter() - start
    if not rates:
        raise ContractError(f"no measurable batches completed in {elapsed:.2f}s window")
    return ThroughputReport(
        tokens_per_second=float(np.mean(rates)),
        window_seconds=elapsed,
        batches_measured=len(rates),
        batches_excluded=excluded,
        config={"resolution": workload[0].resolution, "batch_size": len(workload[0].sequences)},
    )
