"""Decoder-only transformer over interleaved image-patch and text tokens.

Patches (2700-float vectors) are linearly projected straight into the token
stream; text tokens come from a learned embedding. Blocks are pre-norm
residual: causal attention with per-head Q/K layernorm and rotary position
embeddings, then a squared-ReLU MLP (expansion 4). The output head is untied
from the input embedding and covers the text vocabulary only; patches are
input-only and never receive loss.

Positions are plain sequence indices over the full interleaved sequence, so
the same weights accept any image resolution (any number of patch tokens).

Parameter count closed form (hidden h, heads with head_dim hd = h/heads,
ff = 4h, L layers, vocab V, patch_dim P):

    P*h + h            patch projection + bias
  + V*h                token embedding
  + L * (4*h*h         q/k/v/o projections
         + 4*hd        q/k norm gain+bias
         + 2*h*ff      mlp up/down
         + 4*h)        pre-attention + pre-mlp layernorms
  + 2*h                final layernorm
  + h*V                output head
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError, ShapeError
from .patchify import PATCH_DIM
from .tensor import Tensor

MASK_VALUE = -1e9  # additive attention mask; exp() underflows to exactly 0.0


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    n_heads: int = 4
    n_layers: int = 4
    vocab: int = 512
    patch_dim: int = PATCH_DIM
    rope_base: float = 10000.0
    max_seq: int = 4096
    mlp_factor: int = 4

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")
        if (self.hidden // self.n_heads) % 2 != 0:
            raise ConfigError(f"head_dim {self.hidden // self.n_heads} must be even for rotary pairs")
        if min(self.hidden, self.n_heads, self.n_layers, self.vocab, self.max_seq) < 1:
            raise ConfigError("all config dimensions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def ff(self) -> int:
        return self.hidden * self.mlp_factor


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count (see module docstring)."""
    h, hd, ff = cfg.hidden, cfg.head_dim, cfg.ff
    per_layer = 4 * h * h + 4 * hd + 2 * h * ff + 4 * h
    return cfg.patch_dim * h + h + cfg.vocab * h + cfg.n_layers * per_layer + 2 * h + h * cfg.vocab


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, hd, ff = cfg.hidden, cfg.head_dim, cfg.ff
    shapes: dict[str, tuple[int, ...]] = {
        "patch_projection.weight": (cfg.patch_dim, h),
        "patch_projection.bias": (h,),
        "token_embedding.weight": (cfg.vocab, h),
    }
    for i in range(cfg.n_layers):
        L = f"layers.{i}"
        shapes[f"{L}.ln_attn.gain"] = (h,)
        shapes[f"{L}.ln_attn.bias"] = (h,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{L}.attn.{w}"] = (h, h)
        for qk in ("q_norm", "k_norm"):
            shapes[f"{L}.attn.{qk}.gain"] = (hd,)
            shapes[f"{L}.attn.{qk}.bias"] = (hd,)
        shapes[f"{L}.ln_mlp.gain"] = (h,)
        shapes[f"{L}.ln_mlp.bias"] = (h,)
        shapes[f"{L}.mlp.up"] = (h, ff)
        shapes[f"{L}.mlp.down"] = (ff, h)
    shapes["final_norm.gain"] = (h,)
    shapes["final_norm.bias"] = (h,)
    shapes["output_head.weight"] = (h, cfg.vocab)
    return shapes


LINEAR_SUFFIXES = (".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.up", ".mlp.down")


def linear_names(cfg: ModelConfig, include_patch_projection: bool = True) -> list[str]:
    """Names of all 2-D weight matrices applied as linear maps."""
    names = [n for n, s in param_shapes(cfg).items() if len(s) == 2]
    names.remove("token_embedding.weight")  # embedding lookup, not a linear map
    if not include_patch_projection:
        names.remove("patch_projection.weight")
    return names


class ModelParams:
    """Named weight tensors for one model; leaves of the autodiff graph."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ConfigError(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in tensors.items():
            if t.shape != expected[name]:
                raise ShapeError(f"{name}: shape {t.shape} != expected {expected[name]}")
            if not np.isfinite(t.data).all():
                raise ConfigError(f"{name}: non-finite values")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def total_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
        )

    def set_trainable(self, trainable: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = trainable


def init_params(cfg: ModelConfig, rng: np.random.Generator, init_scale: float = 0.02) -> ModelParams:
    """normal(0, 0.02) projections/embeddings, zero biases, unit norm gains."""
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, init_scale, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors)


# -- sequences -----------------------------------------------------------------

PATCH, TEXT = 0, 1


class SequenceInput:
    """Ordered interleaving of patch vectors and text token ids.

    Stored as pools (patches matrix, token id array) plus a per-position
    (kind, pool index) pair; positions are implicitly 0..n-1.
    """

    def __init__(self, kinds: np.ndarray, indices: np.ndarray, patches: np.ndarray | None, token_ids: np.ndarray):
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.patches = patches
        self.token_ids = np.asarray(token_ids, dtype=np.int64)
        if self.kinds.shape != self.indices.shape:
            raise ShapeError("kinds and indices must align")

    def __len__(self):
        return len(self.kinds)

    @property
    def n_patches(self) -> int:
        return 0 if self.patches is None else self.patches.shape[0]

    @property
    def n_text(self) -> int:
        return len(self.token_ids)

    def text_positions(self) -> np.ndarray:
        return np.nonzero(self.kinds == TEXT)[0]

    def token_at(self, position: int) -> int:
        if self.kinds[position] != TEXT:
            raise ContractError(f"position {position} is a patch, not a text token")
        return int(self.token_ids[self.indices[position]])

    def with_token(self, token_id: int) -> "SequenceInput":
        """New sequence with one text token appended (greedy decode)."""
        return SequenceInput(
            np.append(self.kinds, TEXT),
            np.append(self.indices, len(self.token_ids)),
            self.patches,
            np.append(self.token_ids, token_id),
        )


class SequenceBuilder:
    def __init__(self):
        self._kinds: list[int] = []
        self._indices: list[int] = []
        self._patches: list[np.ndarray] = []
        self._tokens: list[int] = []

    def add_patch(self, vec: np.ndarray) -> "SequenceBuilder":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape != (PATCH_DIM,):
            raise ShapeError(f"patch vector length {vec.size} != {PATCH_DIM}")
        self._kinds.append(PATCH)
        self._indices.append(len(self._patches))
        self._patches.append(vec)
        return self

    def add_patches(self, mat: np.ndarray) -> "SequenceBuilder":
        for row in np.asarray(mat, dtype=np.float64):
            self.add_patch(row)
        return self

    def add_token(self, token_id: int) -> "SequenceBuilder":
        self._kinds.append(TEXT)
        self._indices.append(len(self._tokens))
        self._tokens.append(int(token_id))
        return self

    def add_tokens(self, ids: Iterable[int]) -> "SequenceBuilder":
        for t in ids:
            self.add_token(t)
        return self

    def build(self) -> SequenceInput:
        patches = np.stack(self._patches) if self._patches else None
        return SequenceInput(
            np.array(self._kinds, dtype=np.int8),
            np.array(self._indices, dtype=np.int64),
            patches,
            np.array(self._tokens, dtype=np.int64),
        )


# -- forward -------------------------------------------------------------------


def embed_sequence(seq: SequenceInput, params: ModelParams, adapters=None) -> Tensor:
    """Project patches, look up tokens, and restore interleaved order."""
    cfg = params.config
    if seq.n_text and seq.token_ids.max() >= cfg.vocab:
        raise ContractError(f"token id {seq.token_ids.max()} out of vocab {cfg.vocab}")
    pieces = []
    # permutation: position -> row in the concatenated [patch_emb; tok_emb]
    perm = np.empty(len(seq), dtype=np.int64)
    if seq.n_patches:
        patch_emb = _linear(Tensor(seq.patches), "patch_projection.weight", params, adapters)
        patch_emb = patch_emb + params["patch_projection.bias"]
        pieces.append(patch_emb)
    if seq.n_text:
        tok_emb = T.gather_rows(params["token_embedding.weight"], seq.token_ids)
        pieces.append(tok_emb)
    base = seq.n_patches
    perm[seq.kinds == PATCH] = seq.indices[seq.kinds == PATCH]
    perm[seq.kinds == TEXT] = base + seq.indices[seq.kinds == TEXT]
    x = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    return T.gather_rows(x, perm)


def causal_mask(n: int, valid_len: int | None = None) -> np.ndarray:
    """Additive (n, n) mask: MASK_VALUE above the diagonal and, when a valid
    length is given, on every key column past it (right padding)."""
    mask = np.triu(np.full((n, n), MASK_VALUE), k=1)
    if valid_len is not None and valid_len < n:
        mask[:, valid_len:] = MASK_VALUE
    return mask


def _linear(x: Tensor, name: str, params: ModelParams, adapters) -> Tensor:
    y = x @ params[name]
    if adapters is not None and name in adapters.pairs:
        a, b = adapters.pairs[name]
        y = y + (x @ a.T) @ b.T * adapters.scaling
    return y


def _split_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    n = x.shape[0]
    return x.reshape(n, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)


def _merge_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    n = x.shape[1]
    return x.transpose(1, 0, 2).reshape(n, cfg.hidden)


def attention_block(
    x: Tensor,
    params: ModelParams,
    layer: int,
    mask: np.ndarray,
    positions: np.ndarray,
    adapters=None,
    trace: dict | None = None,
) -> Tensor:
    cfg = params.config
    L = f"layers.{layer}"
    h = T.layer_norm(x, params[f"{L}.ln_attn.gain"], params[f"{L}.ln_attn.bias"])
    q = _split_heads(_linear(h, f"{L}.attn.wq", params, adapters), cfg)
    k = _split_heads(_linear(h, f"{L}.attn.wk", params, adapters), cfg)
    v = _split_heads(_linear(h, f"{L}.attn.wv", params, adapters), cfg)
    q = T.layer_norm(q, params[f"{L}.attn.q_norm.gain"], params[f"{L}.attn.q_norm.bias"])
    k = T.layer_norm(k, params[f"{L}.attn.k_norm.gain"], params[f"{L}.attn.k_norm.bias"])
    if trace is not None:
        trace.setdefault("q_normed", []).append(q.data.copy())
        trace.setdefault("k_normed", []).append(k.data.copy())
    q = T.rope(q, positions, base=cfg.rope_base)
    k = T.rope(k, positions, base=cfg.rope_base)
    scores = q @ k.swapaxes(-1, -2) * (1.0 / math.sqrt(cfg.head_dim))
    probs = T.softmax_rows(scores + Tensor(mask))
    mixed = _merge_heads(probs @ v, cfg)
    return x + _linear(mixed, f"{L}.attn.wo", params, adapters)


def squared_relu_mlp(x: Tensor, params: ModelParams, layer: int, adapters=None) -> Tensor:
    L = f"layers.{layer}"
    h = T.layer_norm(x, params[f"{L}.ln_mlp.gain"], params[f"{L}.ln_mlp.bias"])
    u = T.relu(_linear(h, f"{L}.mlp.up", params, adapters))
    return x + _linear(u * u, f"{L}.mlp.down", params, adapters)


def forward(
    seq: SequenceInput,
    params: ModelParams,
    adapters=None,
    valid_len: int | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Logits (n, vocab) for each position of the interleaved sequence."""
    cfg = params.config
    n = len(seq)
    if n == 0:
        raise ContractError("cannot run forward on an empty sequence")
    if n > cfg.max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    x = embed_sequence(seq, params, adapters)
    positions = np.arange(n)
    mask = causal_mask(n, valid_len)
    for layer in range(cfg.n_layers):
        x = attention_block(x, params, layer, mask, positions, adapters, trace)
        x = squared_relu_mlp(x, params, layer, adapters)
    x = T.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    return _linear(x, "output_head.weight", params, adapters)


def decode_greedy(
    params: ModelParams,
    prompt: SequenceInput,
    max_new: int,
    eos_id: int | None = None,
    adapters=None,
) -> list[int]:
    """Append argmax tokens until EOS or max_new; deterministic."""
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    seq = prompt
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_new):
            logits = forward(seq, params, adapters=adapters)
            next_id = int(np.argmax(logits.data[-1]))
            out.append(next_id)
            if eos_id is not None and next_id == eos_id:
                break
            seq = seq.with_token(next_id)
    return out
