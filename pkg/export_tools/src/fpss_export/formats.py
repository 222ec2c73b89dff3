"""Writers for the FPSS tensor container and P5 PGM masks.

Deliberately re-implemented here rather than imported: the engine and the
export tools share a byte-level contract, not code.  Header layout:

    bytes 0-3   magic 46 50 53 53 ("FPSS")
    byte  4     format version, currently 1
    byte  5     dtype: 0 = float32 little-endian, 1 = uint8
    byte  6     ndim: 2 or 3
    then        ndim x u32 little-endian dims, (H, W[, D]) order
    then        payload, row-major

Masks travel as binary PGM (P5, maxval 255, nonzero = foreground),
written with foreground exactly 255 so a canonical re-write is
byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPSS"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1


def write_tensor_f32(values: np.ndarray, path: str | Path) -> None:
    """Write a 2-D or 3-D float array as a float32 FPSS tensor."""
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise ValueError(f"FPSS tensors are 2-D or 3-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to export non-finite values")
    payload = np.ascontiguousarray(values, dtype="<f4")
    header = MAGIC + bytes([FORMAT_VERSION, DTYPE_F32, values.ndim])
    header += struct.pack(f"<{values.ndim}I", *payload.shape)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def write_mask_stack(masks: np.ndarray, path: str | Path) -> None:
    """Write an (N, H, W) boolean stack as a uint8 FPSS tensor.

    Candidate banks use the canonical 0/1 encoding so a decode/re-encode
    cycle through any conforming reader reproduces the bytes.
    """
    masks = np.asarray(masks)
    if masks.ndim != 3 or masks.dtype != np.bool_:
        raise ValueError(f"mask stack must be 3-D boolean, got {masks.dtype} shape {masks.shape}")
    payload = np.ascontiguousarray(masks.astype(np.uint8))
    header = MAGIC + bytes([FORMAT_VERSION, DTYPE_U8, 3])
    header += struct.pack("<3I", *payload.shape)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def write_mask_pgm(mask: np.ndarray, path: str | Path) -> None:
    """Write a 2-D boolean array as a P5 PGM, foreground 255."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.bool_:
        raise ValueError(f"mask must be 2-D boolean, got {mask.dtype} shape {mask.shape}")
    height, width = mask.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (mask.astype(np.uint8) * 255).tobytes())


def read_image_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 PGM as a float64 grayscale image in [0, 1].

    The export tools accept plain binary PGM images as model input; the
    header may carry '#' comments, maxval must fit one byte.
    """
    raw = Path(path).read_bytes()
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        tok = b""
        while True:
            if pos >= len(raw):
                raise ValueError(f"{path}: PGM header cut short")
            ch = raw[pos:pos + 1]
            pos += 1
            if ch == b"#":  # comment to end of line
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    if next_token() != b"P5":
        raise ValueError(f"{path}: not a binary (P5) PGM file")
    width, height, maxval = (int(next_token()) for _ in range(3))
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    payload = raw[pos:pos + width * height]
    if len(payload) != width * height:
        raise ValueError(f"{path}: raster is {len(payload)} bytes, expected {width * height}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return values.astype(np.float64) / maxval
