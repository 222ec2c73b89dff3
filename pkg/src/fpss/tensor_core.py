"""Core dense types and their bit-exact file IO.

Everything downstream (matching, proposals, fusion, evaluation) moves data
around as three grid types: feature maps (H, W, D), binary masks (H, W) and
scalar/probability grids (H, W).  All of them share one on-disk container,
the FPSS tensor format:

    bytes 0-3   magic ``46 50 53 53`` ("FPSS")
    byte  4     version, currently 1
    byte  5     dtype code: 0 = float32 little-endian, 1 = uint8
    byte  6     ndim: 2 or 3
    then        ndim x uint32 little-endian dims, (H, W) or (H, W, D)
                (uint8 stacks use (N, H, W): one mask per slice)
    then        payload, row-major

Masks can additionally travel as binary PGM (P5, maxval 255, nonzero =
foreground) for interoperability with image tooling.

All types are immutable after construction (arrays are marked read-only),
so they are safe to share across parallel workers.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    MagicMismatch,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedVersion,
    ZeroMass,
)

MAGIC = b"FPSS"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Dense grid of patch descriptors, shape (height, width, depth), float32."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise DimensionMismatch(f"feature map must be 3-D, got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise DimensionMismatch(f"degenerate feature map shape {self.data.shape}")
        data = np.asarray(self.data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise NonFiniteValue("feature map contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel foreground indicator, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got {self.data.shape}")
        object.__setattr__(self, "data", _freeze(self.data.astype(bool)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def area(self) -> int:
        return int(self.data.sum())

    @classmethod
    def full(cls, shape: tuple[int, int], value: bool = False) -> "BinaryMask":
        return cls(np.full(shape, value, dtype=bool))


@dataclass(frozen=True)
class ScalarGrid:
    """Finite real-valued grid, shape (height, width).

    Carrier for similarity grids and raw logit grids; values may be negative.
    Convert to a :class:`ProbabilityMap` explicitly via :func:`renormalize`
    or :func:`spatial_softmax`.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise DimensionMismatch(f"scalar grid must be 2-D, got {self.data.shape}")
        data = np.asarray(self.data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise NonFiniteValue("scalar grid contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbabilityMap:
    """Nonnegative grid holding a full spatial distribution (mass sums to 1)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise DimensionMismatch(f"probability map must be 2-D, got {self.data.shape}")
        data = np.asarray(self.data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteValue("probability map contains non-finite values")
        if (data < 0).any():
            raise ValueError("probability map contains negative values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def total(self) -> float:
        return float(self.data.sum())

    @classmethod
    def from_grid(cls, grid: ScalarGrid) -> "ProbabilityMap":
        """Interpret a decoded nonnegative scalar grid as a distribution."""
        return cls(np.asarray(grid.data, dtype=np.float64))


@dataclass(frozen=True)
class MaskStack:
    """Stack of candidate masks, shape (count, height, width)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise DimensionMismatch(f"mask stack must be 3-D, got {self.data.shape}")
        object.__setattr__(self, "data", _freeze(self.data.astype(bool)))

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, index: int) -> BinaryMask:
        return BinaryMask(self.data[index])

    @property
    def mask_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class PointPrompt:
    """A probable object location on a grid, with the similarity that put it there."""

    x: int
    y: int
    score: float


Tensor = Union[FeatureMap, BinaryMask, ScalarGrid, ProbabilityMap, MaskStack]


# ---------------------------------------------------------------------------
# FPSS tensor IO
# ---------------------------------------------------------------------------

def _decode_payload(path: str | Path) -> tuple[int, np.ndarray]:
    """Parse an FPSS file into (dtype code, raw array); shared by the readers."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatch(f"{path}: not an FPSS tensor file")
    if len(raw) < 7:
        raise TruncatedPayload(f"{path}: header cut short")
    version, dtype_code, ndim = raw[4], raw[5], raw[6]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise UnsupportedVersion(f"{path}: unknown dtype code {dtype_code}")
    if ndim not in (2, 3):
        raise UnsupportedVersion(f"{path}: ndim must be 2 or 3, got {ndim}")
    header_end = 7 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedPayload(f"{path}: dimension fields cut short")
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    if any(d < 1 for d in dims):
        raise TruncatedPayload(f"{path}: zero-sized dimension in {dims}")
    item_size = 4 if dtype_code == DTYPE_F32 else 1
    expected = int(np.prod(dims)) * item_size
    payload = raw[header_end:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    if dtype_code == DTYPE_F32:
        values = np.frombuffer(payload, dtype="<f4").reshape(dims)
        if not np.isfinite(values).all():
            raise NonFiniteValue(f"{path}: payload contains non-finite values")
    else:
        values = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return dtype_code, values


def read_tensor(path: str | Path) -> Tensor:
    """Decode an FPSS tensor file.

    The dtype/ndim pair in the header selects the returned type:
    float32 3-D -> FeatureMap, float32 2-D -> ScalarGrid, uint8 2-D ->
    BinaryMask, uint8 3-D -> MaskStack (one mask per leading slice).
    """
    dtype_code, values = _decode_payload(path)
    if dtype_code == DTYPE_F32:
        return FeatureMap(values) if values.ndim == 3 else ScalarGrid(values)
    return MaskStack(values != 0) if values.ndim == 3 else BinaryMask(values != 0)


def read_label_grid(path: str | Path) -> np.ndarray:
    """Decode a 2-D uint8 FPSS file keeping raw values (0 = background).

    Region label maps need the integer labels that read_tensor would
    collapse into a boolean mask.
    """
    dtype_code, values = _decode_payload(path)
    if dtype_code != DTYPE_U8 or values.ndim != 2:
        raise UnsupportedVersion(f"{path}: label grids must be 2-D uint8")
    out = np.ascontiguousarray(values)
    out.flags.writeable = False
    return out


def write_label_grid(labels: np.ndarray, path: str | Path) -> None:
    """Encode a 2-D uint8 label grid (raw values preserved)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label grid must be 2-D, got shape {labels.shape}")
    payload = np.ascontiguousarray(labels, dtype=np.uint8)
    header = MAGIC + bytes([FORMAT_VERSION, DTYPE_U8, 2])
    header += struct.pack("<2I", *payload.shape)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def write_tensor(tensor: Tensor, path: str | Path) -> None:
    """Encode a grid type into the FPSS tensor format (float payloads as f32)."""
    if isinstance(tensor, FeatureMap):
        dtype_code, payload = DTYPE_F32, np.asarray(tensor.data, dtype="<f4")
    elif isinstance(tensor, (ScalarGrid, ProbabilityMap)):
        dtype_code, payload = DTYPE_F32, np.asarray(tensor.data, dtype="<f4")
    elif isinstance(tensor, BinaryMask):
        dtype_code, payload = DTYPE_U8, tensor.data.astype(np.uint8)
    elif isinstance(tensor, MaskStack):
        dtype_code, payload = DTYPE_U8, tensor.data.astype(np.uint8)
    else:
        raise TypeError(f"cannot serialize {type(tensor).__name__}")
    if dtype_code == DTYPE_F32 and not np.isfinite(payload).all():
        raise NonFiniteValue("refusing to write non-finite float payload")
    dims = payload.shape
    header = MAGIC + bytes([FORMAT_VERSION, dtype_code, len(dims)])
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


# ---------------------------------------------------------------------------
# PGM mask IO (P5, maxval 255, nonzero = foreground)
# ---------------------------------------------------------------------------

def write_mask_pgm(mask: BinaryMask, path: str | Path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (mask.data.astype(np.uint8) * 255).tobytes())


def read_mask_pgm(path: str | Path) -> BinaryMask:
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)

    def next_token() -> bytes:
        tok = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise TruncatedPayload(f"{path}: PGM header cut short")
            if ch == b"#":  # comment to end of line
                while ch and ch != b"\n":
                    ch = stream.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    if next_token() != b"P5":
        raise MagicMismatch(f"{path}: not a binary (P5) PGM file")
    width, height, maxval = (int(next_token()) for _ in range(3))
    if not 0 < maxval < 256:
        raise UnsupportedVersion(f"{path}: unsupported PGM maxval {maxval}")
    payload = stream.read()
    if len(payload) != width * height:
        raise TruncatedPayload(
            f"{path}: PGM raster is {len(payload)} bytes, expected {width * height}"
        )
    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return BinaryMask(values != 0)


def load_mask(path: str | Path) -> BinaryMask:
    """Read a mask from either container, sniffing the leading bytes."""
    with open(path, "rb") as fh:
        lead = fh.read(2)
    if lead == b"P5":
        return read_mask_pgm(path)
    tensor = read_tensor(path)
    if not isinstance(tensor, BinaryMask):
        raise DimensionMismatch(f"{path}: expected a 2-D uint8 mask")
    return tensor


# ---------------------------------------------------------------------------
# Grid operations
# ---------------------------------------------------------------------------

class NormalizedFeatures(NamedTuple):
    features: FeatureMap
    zero_norm_cells: int


def normalize_l2(features: FeatureMap) -> NormalizedFeatures:
    """Scale every cell vector to unit L2 norm.

    Zero-norm cells stay zero vectors (backbones can emit padded cells);
    their count is returned as a diagnostic.
    """
    data = np.asarray(features.data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=2, keepdims=True)
    zero = norms[..., 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    out = (data / safe).astype(np.float32)
    return NormalizedFeatures(FeatureMap(out), int(zero.sum()))


def renormalize(p: ProbabilityMap | ScalarGrid | np.ndarray) -> ProbabilityMap:
    """Scale a nonnegative grid so its total mass is 1."""
    data = p.data if isinstance(p, (ProbabilityMap, ScalarGrid)) else np.asarray(p)
    data = np.asarray(data, dtype=np.float64)
    if (data < 0).any():
        raise ValueError("renormalize requires nonnegative entries")
    total = data.sum()
    if total <= 0.0:
        raise ZeroMass("all entries are zero")
    return ProbabilityMap(data / total)


def spatial_softmax(grid: ScalarGrid | np.ndarray, temperature: float = 1.0) -> ProbabilityMap:
    """Softmax over the flattened grid, turning scores/logits into a distribution."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    data = np.asarray(grid.data if isinstance(grid, ScalarGrid) else grid, dtype=np.float64)
    z = data / temperature
    z -= z.max()
    e = np.exp(z)
    return ProbabilityMap(e / e.sum())


def mask_union(masks: Sequence[BinaryMask], shape: tuple[int, int] | None = None) -> BinaryMask:
    """Pixel-wise OR. An empty sequence needs an explicit output shape."""
    if not masks:
        if shape is None:
            raise ValueError("mask_union of an empty list needs an explicit shape")
        return BinaryMask.full(shape)
    first = masks[0].shape
    for m in masks[1:]:
        if m.shape != first:
            raise DimensionMismatch(f"mask shapes differ: {first} vs {m.shape}")
    if shape is not None and shape != first:
        raise DimensionMismatch(f"mask shapes {first} differ from requested {shape}")
    out = np.zeros(first, dtype=bool)
    for m in masks:
        out |= m.data
    return BinaryMask(out)


# ---------------------------------------------------------------------------
# Grid <-> pixel resampling (nearest-neighbor, center-sampled, deterministic)
# ---------------------------------------------------------------------------

def nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    """Source index for each output position under center-sampled NN."""
    idx = ((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resize_mask_nearest(mask: BinaryMask, shape: tuple[int, int]) -> BinaryMask:
    """Nearest-neighbor resample preserving binarity; identity when shapes match."""
    if mask.shape == shape:
        return mask
    ys = nearest_indices(shape[0], mask.height)
    xs = nearest_indices(shape[1], mask.width)
    return BinaryMask(mask.data[np.ix_(ys, xs)])


def resize_grid_nearest(grid: ScalarGrid, shape: tuple[int, int]) -> ScalarGrid:
    if grid.shape == shape:
        return grid
    ys = nearest_indices(shape[0], grid.shape[0])
    xs = nearest_indices(shape[1], grid.shape[1])
    return ScalarGrid(grid.data[np.ix_(ys, xs)])


def map_point(y: int, x: int, from_shape: tuple[int, int], to_shape: tuple[int, int]) -> tuple[int, int]:
    """Map a cell coordinate between grids of different resolution (cell centers)."""
    if from_shape == to_shape:
        return y, x
    ny = min(int((y + 0.5) * to_shape[0] / from_shape[0]), to_shape[0] - 1)
    nx = min(int((x + 0.5) * to_shape[1] / from_shape[1]), to_shape[1] - 1)
    return ny, nx
