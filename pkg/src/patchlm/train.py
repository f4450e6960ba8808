"""Instruction-tuning loop.

Pairs are drawn uniformly over the aggregated pool of all mixture datasets
(so a dataset's draw probability is proportional to its pair count), built
into token sequences at the configured resolution (dynamic resolution is
decided per sample), and optimized with AdamW under a linear-warmup cosine
schedule. Gradients accumulate per sample, which is mathematically the
summed-loss batch gradient. Either the full parameter set or only attached
LoRA adapter pairs receive updates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .errors import ConfigError, ContractError, DataError, NumericError
from .lora import LoraConfig, LoraModel, attach, save_adapters
from .model import ModelParams, forward
from .patchify import Original, ResizePolicy
from .pipeline import InstructionSample, TokenizedSample, build_sample, load_jsonl_dataset
from .tensor import Tensor

# Pair counts of the reference full-scale instruction mixture (13 public
# datasets, 371017 pairs combined). Used for manifest arithmetic checks and
# as the template for scaled-down fixtures.
REFERENCE_MIXTURE_PAIRS = {
    "LLaVA-DD/CR": 53240,
    "VQAv2": 20000,
    "GQA": 30000,
    "OKVQA": 18018,
    "OCRVQA": 16354,
    "A-OKVQA": 34112,
    "COCO-GOI": 20000,
    "COCO-Caption": 20000,
    "TextQA": 19293,
    "RefCOCO": 20000,
    "COCO-ITM": 20000,
    "ImageNet": 50000,
    "LLaVA-RLHF": 50000,
}


@dataclass
class MixtureEntry:
    name: str
    path: Path
    pair_count: int


@dataclass
class MixtureManifest:
    entries: list[MixtureEntry]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("mixture manifest has no entries")
        for e in self.entries:
            if e.pair_count <= 0:
                raise ConfigError(f"dataset {e.name}: pair_count must be positive")

    @property
    def combined_pairs(self) -> int:
        return sum(e.pair_count for e in self.entries)

    @classmethod
    def load(cls, path) -> "MixtureManifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        try:
            entries = [
                MixtureEntry(
                    name=e["name"],
                    path=path.parent / e["path"],
                    pair_count=int(e["pair_count"]),
                )
                for e in obj["entries"]
            ]
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path}: bad entry: {exc}") from exc
        return cls(entries)


class MixturePool:
    """Lazy view of the aggregated pair pool; files load on first access."""

    def __init__(self, manifest: MixtureManifest):
        self.manifest = manifest
        self._offsets = np.concatenate(
            [[0], np.cumsum([e.pair_count for e in manifest.entries])]
        )
        self._cache: dict[Path, list[InstructionSample]] = {}

    def __len__(self):
        return int(self._offsets[-1])

    def __getitem__(self, index: int) -> InstructionSample:
        if not 0 <= index < len(self):
            raise ContractError(f"pool index {index} out of range {len(self)}")
        which = int(np.searchsorted(self._offsets, index, side="right")) - 1
        entry = self.manifest.entries[which]
        offset = index - int(self._offsets[which])
        if entry.path not in self._cache:
            self._cache[entry.path] = load_jsonl_dataset(entry.path)
        samples = self._cache[entry.path]
        if offset >= len(samples):
            raise DataError(
                f"dataset {entry.name}: manifest says {entry.pair_count} pairs "
                f"but file has {len(samples)}"
            )
        return samples[offset]


def sample_batch(pool: MixturePool, batch_size: int, rng: np.random.Generator):
    """batch_size independent uniform draws (with replacement) from the pool."""
    if len(pool) == 0:
        raise ConfigError("cannot sample from an empty pool")
    return [pool[int(i)] for i in rng.integers(len(pool), size=batch_size)]


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-5
    weight_decay: float = 0.1
    schedule: str = "cosine"
    warmup_ratio: float = 0.03
    epochs: int = 3  # reference recipe: 3 full-parameter / 6 LoRA
    resolution: ResizePolicy = field(default_factory=Original)
    mode: str = "full"  # "full" | "lora"
    lora: LoraConfig | None = None
    seed: int = 0
    checkpoint_every: int = 1  # epochs between checkpoint saves
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be 'full' or 'lora', got {self.mode!r}")


def lr_at(step: float, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> lr over warmup_ratio*total, cosine decay lr -> 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_ratio * total_steps
    if step < warmup:
        return cfg.lr * step / warmup
    if total_steps == warmup:
        return cfg.lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={n: np.zeros(p.shape) for n, p in params.items()},
            v={n: np.zeros(p.shape) for n, p in params.items()},
        )


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update; decay is decoupled and applied before the moment term.

    Leaf arrays are replaced, not mutated, so live graphs are untouched.
    """
    b1, b2 = betas
    state.t += 1
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        if np.isnan(g).any():
            raise NumericError(f"NaN gradient in parameter {name}")
        decayed = p.data * (1.0 - lr * weight_decay)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**state.t)
        v_hat = v / (1.0 - b2**state.t)
        p.data = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- losses --------------------------------------------------------------------


def next_token_targets(ts: TokenizedSample) -> np.ndarray:
    seq = ts.sequence
    targets = np.zeros(len(seq), dtype=np.int64)
    for pos in seq.text_positions():
        targets[pos] = seq.token_at(pos)
    return targets


def sample_loss(
    params: ModelParams,
    ts: TokenizedSample,
    adapters: LoraModel | None = None,
    valid_len: int | None = None,
):
    """Mean next-token cross-entropy over the sample's answer span."""
    targets = next_token_targets(ts)
    logits = forward(ts.sequence, params, adapters=adapters, valid_len=valid_len)
    return T.cross_entropy(logits[:-1, :], targets[1:], ts.loss_mask[1:])


def batch_gradients(
    params: ModelParams,
    samples: list[TokenizedSample],
    adapters: LoraModel | None = None,
) -> float:
    """Accumulate grads of the mean per-sample loss, one sample at a time.

    Equivalent to the single summed-loss graph (each sample's loss is scaled
    by 1/batch before backward); this is the gradient-accumulation execution
    of a large batch.
    """
    total = 0.0
    scale = 1.0 / len(samples)
    for ts in samples:
        loss = sample_loss(params, ts, adapters=adapters) * scale
        loss.backward()
        total += loss.item()
    return total


def combined_batch_loss(
    params: ModelParams,
    samples: list[TokenizedSample],
    adapters: LoraModel | None = None,
):
    """Single-graph mean loss over the batch (equivalence-check reference)."""
    losses = [sample_loss(params, ts, adapters=adapters) for ts in samples]
    acc = losses[0]
    for loss in losses[1:]:
        acc = acc + loss
    return acc / float(len(samples))


# -- the loop ------------------------------------------------------------------


@dataclass
class TrainReport:
    steps: int
    losses: list[float]
    lrs: list[float]
    resolutions: list[str]
    checkpoints: list[Path]
    log_path: Path | None
    adapters: LoraModel | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def min_loss(self) -> float:
        return min(self.losses)


def train(
    manifest: MixtureManifest,
    params: ModelParams,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainReport:
    pool = MixturePool(manifest)
    if len(pool) == 0:
        raise ConfigError("empty training pool")
    steps_per_epoch = math.ceil(len(pool) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    seed_seq = np.random.SeedSequence(cfg.seed)
    data_rng, res_rng, lora_rng = (np.random.default_rng(s) for s in seed_seq.spawn(3))

    adapters = None
    if cfg.mode == "lora":
        adapters = attach(params, cfg.lora or LoraConfig(), lora_rng)
        trainables = adapters.trainable_tensors()
    else:
        params.set_trainable(True)
        trainables = params.tensors
    state = AdamWState.init(trainables)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_file = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.csv"
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "lr", "loss", "resolution"])

    losses: list[float] = []
    lrs: list[float] = []
    resolutions: list[str] = []
    checkpoints: list[Path] = []
    try:
        for step in range(total_steps):
            lr = lr_at(step, total_steps, cfg)
            batch = sample_batch(pool, cfg.batch_size, data_rng)
            tokenized = [build_sample(s, cfg.resolution, res_rng) for s in batch]
            T.zero_grads(trainables)
            loss = batch_gradients(params, tokenized, adapters=adapters)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step}")
            adamw_step(trainables, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
            drawn = ";".join(sorted({str(ts.meta["side"]) for ts in tokenized}))
            losses.append(loss)
            lrs.append(lr)
            resolutions.append(drawn)
            if writer is not None:
                writer.writerow([step, f"{lr:.10g}", f"{loss:.10g}", drawn])
            epoch_done = (step + 1) % steps_per_epoch == 0
            if out_dir is not None and epoch_done:
                epoch = (step + 1) // steps_per_epoch
                if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                    ckpt = out_dir / f"checkpoint_epoch_{epoch:04d}.plm"
                    if adapters is not None:
                        save_adapters(adapters, ckpt)
                    else:
                        save_model(params, ckpt)
                    checkpoints.append(ckpt)
    finally:
        if log_file is not None:
            log_file.close()

    return TrainReport(
        steps=total_steps,
        losses=losses,
        lrs=lrs,
        resolutions=resolutions,
        checkpoints=checkpoints,
        log_path=log_path,
        adapters=adapters,
    )
