"""Low-rank adaptation of selected linear maps.

Each targeted weight W (stored d_in x d_out, applied as y = x @ W) gets a
pair A (r x d_in), B (d_out x r); the adapted forward computes

    y = x @ W + (alpha/r) * (x @ A^T) @ B^T

B starts at zero so a fresh adapter is an exact identity delta. Only A/B
train; base weights stay frozen. ``merge`` materializes W + (alpha/r) B A
once per handle.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import _load_container, _save_container
from .errors import ConfigError, ContractError, DataError
from .model import ModelConfig, ModelParams, linear_names
from .tensor import Tensor


@dataclass(frozen=True)
class LoraConfig:
    r: int = 32
    alpha: float = 32.0
    targets: tuple[str, ...] = ()  # empty -> all linear maps (see include flag)
    include_patch_projection: bool = True
    init_scale: float = 0.02

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"rank must be >= 1, got {self.r}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def resolve_targets(self, cfg: ModelConfig) -> list[str]:
        valid = linear_names(cfg, include_patch_projection=True)
        if not self.targets:
            return linear_names(cfg, self.include_patch_projection)
        unknown = [t for t in self.targets if t not in valid]
        if unknown:
            raise ConfigError(
                f"unknown LoRA targets {unknown}; valid linear maps: {sorted(valid)}"
            )
        return list(self.targets)


@dataclass
class LoraModel:
    """Frozen base params plus trainable (A, B) pairs for each target."""

    base: ModelParams
    config: LoraConfig
    pairs: dict[str, tuple[Tensor, Tensor]]
    merged: bool = field(default=False)

    @property
    def scaling(self) -> float:
        return self.config.alpha / self.config.r

    def trainable_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, (a, b) in self.pairs.items():
            out[f"{name}.lora_a"] = a
            out[f"{name}.lora_b"] = b
        return out

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.trainable_tensors().values())


def adapter_param_count(model_cfg: ModelConfig, cfg: LoraConfig) -> int:
    """Closed form: sum over targets of r * (d_in + d_out)."""
    from .model import param_shapes

    shapes = param_shapes(model_cfg)
    return sum(cfg.r * (shapes[t][0] + shapes[t][1]) for t in cfg.resolve_targets(model_cfg))


def attach(params: ModelParams, cfg: LoraConfig, rng: np.random.Generator) -> LoraModel:
    """Freeze the base and bolt trainable A~normal(0,0.02), B=0 pairs on."""
    params.set_trainable(False)
    pairs: dict[str, tuple[Tensor, Tensor]] = {}
    for name in cfg.resolve_targets(params.config):
        d_in, d_out = params[name].shape
        a = Tensor(rng.normal(0.0, cfg.init_scale, size=(cfg.r, d_in)), requires_grad=True)
        b = Tensor(np.zeros((d_out, cfg.r)), requires_grad=True)
        pairs[name] = (a, b)
    return LoraModel(base=params, config=cfg, pairs=pairs)


def merge(adapted: LoraModel) -> ModelParams:
    """Materialize W + (alpha/r) B A into a standalone ModelParams.

    Merging is once-only per handle; the returned params are independent
    copies, trainable again.
    """
    if adapted.merged:
        raise ContractError("adapter handle already merged; attach a fresh one to merge again")
    adapted.merged = True
    tensors = {}
    for name, t in adapted.base.tensors.items():
        data = t.data.copy()
        if name in adapted.pairs:
            a, b = adapted.pairs[name]
            data = data + adapted.scaling * (b.data @ a.data).T
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(adapted.base.config, tensors)


def params_fingerprint(params: ModelParams) -> str:
    """sha256 over names, shapes and raw bytes; detects any base-weight drift."""
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        t = params.tensors[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_adapters(adapted: LoraModel, path) -> None:
    header = {
        "format_version": 1,
        "kind": "adapters",
        "config": dataclasses.asdict(adapted.base.config),
        "lora": dataclasses.asdict(adapted.config),
    }
    tensors = {name: t.data for name, t in adapted.trainable_tensors().items()}
    _save_container(path, header, tensors)


def load_adapters(path, base: ModelParams) -> LoraModel:
    header, tensors = _load_container(path)
    if header.get("kind") != "adapters":
        raise DataError(f"{path}: expected an adapter checkpoint, got {header.get('kind')!r}")
    if header["config"] != dataclasses.asdict(base.config):
        raise ConfigError(f"{path}: adapter was trained for a different model config")
    lora_raw = dict(header["lora"])
    lora_raw["targets"] = tuple(lora_raw.get("targets", ()))
    cfg = LoraConfig(**lora_raw)
    base.set_trainable(False)
    pairs: dict[str, tuple[Tensor, Tensor]] = {}
    for name in cfg.resolve_targets(base.config):
        try:
            a = tensors[f"{name}.lora_a"]
            b = tensors[f"{name}.lora_b"]
        except KeyError as exc:
            raise DataError(f"{path}: missing adapter tensors for target {name}") from exc
        pairs[name] = (Tensor(a, requires_grad=True), Tensor(b, requires_grad=True))
    return LoraModel(base=base, config=cfg, pairs=pairs)
