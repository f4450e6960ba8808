"""Image -> patch-token layout.

An RGB image is resized per policy, padded on the bottom/right edges to a
multiple of the 30px patch side, and cut into 30x30 patches in raster-scan
order (left-to-right, top-to-bottom). One newline marker terminates each
patch row, so the layout length is rows*(cols+1).

Pixels live in [-1, 1] internally (v/127.5 - 1 per 8-bit channel); the pad
value is 0.0, i.e. mid-gray. Binary PPM (P6, maxval 255) is the canonical
file format; PNG and friends decode through Pillow when available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ContractError, DataError, ShapeError

PATCH_SIDE = 30
PATCH_DIM = PATCH_SIDE * PATCH_SIDE * 3  # 2700 floats per patch


@dataclass(frozen=True)
class Fixed:
    """Resize to a side x side square (aspect ratio is not preserved)."""

    side: int

    def __post_init__(self):
        if self.side < PATCH_SIDE:
            raise ContractError(f"fixed side {self.side} below patch side {PATCH_SIDE}")


@dataclass(frozen=True)
class DynamicSet:
    """Per-sample square resize to a side drawn uniformly from a fixed set."""

    sides: tuple[int, ...]

    def __post_init__(self):
        if not self.sides:
            raise ContractError("dynamic resolution set is empty")
        if any(s < PATCH_SIDE for s in self.sides):
            raise ContractError(f"dynamic sides must be >= {PATCH_SIDE}: {self.sides}")


@dataclass(frozen=True)
class Original:
    """No resizing; the native resolution is padded and patchified as-is."""


ResizePolicy = Union[Fixed, DynamicSet, Original]


def parse_policy(text: str) -> ResizePolicy:
    """Parse CLI policy syntax: 'fixed:512', 'dynamic:448,512,768,1024', 'original'."""
    text = text.strip().lower()
    if text == "original":
        return Original()
    kind, _, arg = text.partition(":")
    if kind == "fixed" and arg:
        return Fixed(int(arg))
    if kind == "dynamic" and arg:
        return DynamicSet(tuple(int(s) for s in arg.split(",")))
    raise ContractError(f"unrecognized resolution policy: {text!r}")


def policy_label(policy: ResizePolicy) -> str:
    if isinstance(policy, Fixed):
        return f"fixed:{policy.side}"
    if isinstance(policy, DynamicSet):
        return "dynamic:" + ",".join(str(s) for s in policy.sides)
    return "original"


@dataclass
class RawImage:
    """RGB image; pixels (height, width, 3) float64 in [-1, 1]."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image dims must be >= 1, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ShapeError(
                f"pixel array shape {self.pixels.shape} != ({self.height}, {self.width}, 3)"
            )

    @classmethod
    def from_u8(cls, arr: np.ndarray) -> "RawImage":
        arr = np.asarray(arr, dtype=np.float64)
        h, w = arr.shape[:2]
        return cls(width=w, height=h, pixels=arr / 127.5 - 1.0)

    @classmethod
    def solid(cls, rgb, width: int, height: int) -> "RawImage":
        u8 = np.tile(np.asarray(rgb, dtype=np.uint8), (height, width, 1))
        return cls.from_u8(u8)

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint((self.pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


# -- file I/O ------------------------------------------------------------------


def load_ppm(path) -> RawImage:
    """Read binary PPM (P6, 8-bit, maxval 255)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        fields: list[bytes] = []
        pos = 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace byte after maxval
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P6":
            raise ValueError(f"not a binary PPM (magic {magic!r})")
        if maxval != 255:
            raise ValueError(f"only 8-bit PPM supported (maxval {maxval})")
        need = w * h * 3
        body = raw[pos : pos + need]
        if len(body) != need:
            raise ValueError(f"truncated pixel data: {len(body)} of {need} bytes")
        arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed PPM {path}: {exc}") from exc
    return RawImage.from_u8(arr)


def save_ppm(img: RawImage, path) -> None:
    u8 = img.to_u8()
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + u8.tobytes())


def load_image(path) -> RawImage:
    """Load PPM natively; anything else goes through Pillow."""
    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return load_ppm(p)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a declared dep
        raise DataError(f"Pillow required to read {p}") from exc
    try:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {p}: {exc}") from exc
    return RawImage.from_u8(arr)


# -- geometry ------------------------------------------------------------------


def resize_image(img: RawImage, target_w: int, target_h: int) -> RawImage:
    """Bilinear resize with align-corners sampling; exact at identity size."""
    if target_w < 1 or target_h < 1:
        raise ContractError(f"resize target must be >= 1, got {target_w}x{target_h}")
    sw, sh = img.width, img.height

    def grid(target, source):
        if target == 1 or source == 1:
            return np.zeros(target), np.zeros(target), np.zeros(target, dtype=np.int64)
        coords = np.arange(target) * ((source - 1) / (target - 1))
        lo = np.minimum(coords.astype(np.int64), source - 2)
        return coords, coords - lo, lo

    _, fx, x0 = grid(target_w, sw)
    _, fy, y0 = grid(target_h, sh)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    px = img.pixels
    fy_c = fy[:, None, None]
    fx_c = fx[None, :, None]
    out = (
        px[np.ix_(y0, x0)] * (1 - fy_c) * (1 - fx_c)
        + px[np.ix_(y0, x1)] * (1 - fy_c) * fx_c
        + px[np.ix_(y1, x0)] * fy_c * (1 - fx_c)
        + px[np.ix_(y1, x1)] * fy_c * fx_c
    )
    return RawImage(width=target_w, height=target_h, pixels=out)


def pad_to_patch_multiple(img: RawImage) -> RawImage:
    """Pad bottom/right edges with 0.0 (mid-gray) up to 30px multiples."""
    ph = math.ceil(img.height / PATCH_SIDE) * PATCH_SIDE
    pw = math.ceil(img.width / PATCH_SIDE) * PATCH_SIDE
    out = np.zeros((ph, pw, 3), dtype=np.float64)
    out[: img.height, : img.width] = img.pixels
    return RawImage(width=pw, height=ph, pixels=out)


def token_budget(width: int, height: int) -> tuple[int, int]:
    """(image patch tokens, newline tokens) implied by a resolution.

    Pure arithmetic over the padded grid: ceil(h/30)*ceil(w/30) patches and
    one newline per patch row.
    """
    if width < 1 or height < 1:
        raise ContractError(f"dims must be >= 1, got {width}x{height}")
    rows = math.ceil(height / PATCH_SIDE)
    cols = math.ceil(width / PATCH_SIDE)
    return rows * cols, rows


def sample_dynamic_resolution(sides, rng: np.random.Generator) -> int:
    """Uniform draw from a non-empty side set; deterministic under a seeded rng."""
    sides = tuple(sides)
    if not sides:
        raise ContractError("cannot sample from an empty resolution set")
    return int(sides[rng.integers(len(sides))])


@dataclass
class PatchGrid:
    """Padded image cut into raster-scan 30x30 patches.

    patches: (rows*cols, 2700), each patch row-major with RGB interleaved.
    The token layout puts patch (r, c) at position r*(cols+1)+c and a newline
    marker at r*(cols+1)+cols.
    """

    rows: int
    cols: int
    patches: np.ndarray
    patch_side: int = PATCH_SIDE

    def __post_init__(self):
        if self.patches.shape != (self.rows * self.cols, self.patch_side**2 * 3):
            raise ShapeError(
                f"patch array shape {self.patches.shape} inconsistent with "
                f"{self.rows}x{self.cols} grid"
            )

    @property
    def layout_len(self) -> int:
        return self.rows * (self.cols + 1)


def patchify(img: RawImage, policy: ResizePolicy, rng: np.random.Generator | None = None) -> PatchGrid:
    if isinstance(policy, Fixed):
        img = resize_image(img, policy.side, policy.side)
    elif isinstance(policy, DynamicSet):
        if rng is None:
            raise ContractError("dynamic resolution requires an rng")
        side = sample_dynamic_resolution(policy.sides, rng)
        img = resize_image(img, side, side)
    padded = pad_to_patch_multiple(img)
    rows = padded.height // PATCH_SIDE
    cols = padded.width // PATCH_SIDE
    blocks = padded.pixels.reshape(rows, PATCH_SIDE, cols, PATCH_SIDE, 3)
    patches = blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, PATCH_DIM)
    return PatchGrid(rows=rows, cols=cols, patches=np.ascontiguousarray(patches))


def depatchify(grid: PatchGrid) -> RawImage:
    """Reassemble the padded image exactly (inverse of patch extraction)."""
    s = grid.patch_side
    blocks = grid.patches.reshape(grid.rows, grid.cols, s, s, 3)
    px = blocks.transpose(0, 2, 1, 3, 4).reshape(grid.rows * s, grid.cols * s, 3)
    return RawImage(width=grid.cols * s, height=grid.rows * s, pixels=np.ascontiguousarray(px))
