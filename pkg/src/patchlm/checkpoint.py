"""Self-describing named-tensor checkpoint container.

Layout (all integers little-endian):

    magic   b"PLMT"
    u32     format version (1)
    u64     header length
    bytes   header JSON: {"format_version", "kind", "config", ...}
    u64     tensor count
    records name_len:u64, name:utf-8, rank:u64, dims:u64*rank,
            data: float64 little-endian, C order

Roundtrips are bit-exact: arrays are written/read as raw '<f8' bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"PLMT"
VERSION = 1


def _write_tensors(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<Q", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        nbytes = 8 * int(np.prod(dims)) if rank else 8
        data = np.frombuffer(_read_exact(fh, nbytes), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    return tensors


def _save_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: the previous checkpoint survives a failed save."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            blob = json.dumps(header, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            _write_tensors(fh, tensors)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def _load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 4)
            if magic != MAGIC:
                raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
            (version,) = struct.unpack("<I", _read_exact(fh, 4))
            if version != VERSION:
                raise DataError(f"{path}: unsupported format version {version}")
            (hlen,) = struct.unpack("<Q", _read_exact(fh, 8))
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
            return header, _read_tensors(fh)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except (json.JSONDecodeError, struct.error) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc


def save_model(params: ModelParams, path) -> None:
    header = {
        "format_version": VERSION,
        "kind": "model",
        "config": dataclasses.asdict(params.config),
    }
    _save_container(path, header, {n: t.data for n, t in params.tensors.items()})


def load_model(path, trainable: bool = False) -> ModelParams:
    header, tensors = _load_container(path)
    if header.get("kind") != "model":
        raise DataError(f"{path}: expected a model checkpoint, got kind {header.get('kind')!r}")
    cfg = ModelConfig(**header["config"])
    return ModelParams(cfg, {n: Tensor(a, requires_grad=trainable) for n, a in tensors.items()})
