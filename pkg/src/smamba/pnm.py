"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "PnmError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "MaxvalError",
    "UnsupportedFormatError",
    "encode_pnm",
    "decode_pnm",
    "atomic_write_bytes",
    "save_pgm",
    "load_pgm",
    "save_ppm",
    "load_ppm",
    "save_mask",
    "load_mask",
]


class PnmError(ValueError):
    code = 10


class MalformedHeaderError(PnmError):
    code = 11


class TruncatedPayloadError(PnmError):
    code = 12


class MaxvalError(PnmError):
    code = 13


class UnsupportedFormatError(PnmError):
    code = 14


def encode_pnm(pixels: np.ndarray) -> bytes:
    """``(H, W)`` uint8 to P5, ``(H, W, 3)`` uint8 to P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("pixels must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out: list[bytes] = []
    i = 0
    n = len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise MalformedHeaderError("header ended early")
        out.append(buf[start:i])
    if i >= n or not buf[i : i + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    return out, i + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P7"):
        raise UnsupportedFormatError(f"unsupported PNM format {magic.decode()}")
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError("not a binary PGM/PPM file")
    try:
        (w_tok, h_tok, max_tok), start = _tokens(buf[2:], 3)
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        if isinstance(exc, PnmError):
            raise
        raise MalformedHeaderError(f"bad header field: {exc}") from exc
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise MaxvalError(f"maxval {maxval} unsupported (only 255)")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    payload = buf[2 + start :]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
    data = np.frombuffer(payload[:need], dtype=np.uint8)
    return data.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    return Path(path).read_bytes()


def save_pgm(path, gray: np.ndarray) -> None:
    if np.asarray(gray).ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    atomic_write_bytes(path, encode_pnm(np.asarray(gray, dtype=np.uint8)))


def load_pgm(path) -> np.ndarray:
    out = decode_pnm(_read(path))
    if out.ndim != 2:
        raise UnsupportedFormatError(f"{path}: expected P5, found P6")
    return out


def to_uint8(x: np.ndarray) -> np.ndarray:
    """``[0, 1]`` floats to 8-bit by rounding."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(path, image: np.ndarray) -> None:
    """``(H, W, 3)`` image in ``[0, 1]`` (or uint8) as P6."""
    image = np.asarray(image)
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) array")
    atomic_write_bytes(path, encode_pnm(pixels))


def load_ppm(path) -> np.ndarray:
    out = decode_pnm(_read(path))
    if out.ndim != 3:
        raise UnsupportedFormatError(f"{path}: expected P6, found P5")
    return out.astype(np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    """Binary mask stored as 0/255."""
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    save_pgm(path, (mask.astype(np.uint8) * 255))


def load_mask(path, threshold: int = 128) -> np.ndarray:
    return (load_pgm(path) >= threshold).astype(np.float64)
