"""Image similarity and detection overlap metrics on grayscale frames."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MAX_INTENSITY",
    "PSNR_CAP_DB",
    "DegenerateFrameError",
    "Frame",
    "BoundingBox",
    "mse",
    "psnr",
    "iou",
    "ncc",
    "read_pgm",
    "write_pgm",
]

MAX_INTENSITY = 255
PSNR_CAP_DB = 100.0


class DegenerateFrameError(ValueError):
    """A constant frame has no defined normalized cross-correlation."""


@dataclass(frozen=True, eq=False)
class Frame:
    """Row-major 8-bit grayscale image of ``height`` rows by ``width`` columns."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("frame needs a nonempty 2-D pixel array")
        if px.min() < 0 or px.max() > MAX_INTENSITY:
            raise ValueError("pixel intensities must lie in [0, 255]")
        px = px.astype(np.float64)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box given by its center and full extents, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box extents must be positive")

    @property
    def area(self) -> float:
        return self.w * self.h


def _same_shape(a: Frame, b: Frame) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"frame sizes differ: {a.pixels.shape} vs {b.pixels.shape}")


def mse(a: Frame, b: Frame) -> float:
    _same_shape(a, b)
    return float(np.mean((a.pixels - b.pixels) ** 2))


def psnr(a: Frame, b: Frame, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB; identical frames return ``cap``."""
    err = mse(a, b)
    if err == 0:
        return cap
    return min(cap, 20.0 * math.log10(MAX_INTENSITY / math.sqrt(err)))


def iou(g: BoundingBox, p: BoundingBox) -> float:
    if g == p:
        return 1.0
    ix = min(g.x + g.w / 2, p.x + p.w / 2) - max(g.x - g.w / 2, p.x - p.w / 2)
    iy = min(g.y + g.h / 2, p.y + p.h / 2) - max(g.y - g.h / 2, p.y - p.h / 2)
    inter = max(ix, 0.0) * max(iy, 0.0)
    # edge arithmetic can overshoot the true area by an ulp or two
    return min(1.0, inter / (g.area + p.area - inter))


def ncc(a: Frame, b: Frame) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1]."""
    _same_shape(a, b)
    da = a.pixels - a.pixels.mean()
    db = b.pixels - b.pixels.mean()
    na = math.sqrt(float(np.sum(da * da)))
    nb = math.sqrt(float(np.sum(db * db)))
    if na == 0 or nb == 0:
        raise DegenerateFrameError("NCC undefined for a constant frame")
    return max(-1.0, min(1.0, float(np.sum(da * db)) / (na * nb)))


# PGM (P5 binary / P2 ascii), maxval <= 255 only.


def _pgm_tokens(data: bytes):
    pos = 0
    n = len(data)
    while True:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            return
        yield data[start:pos], pos


def read_pgm(path: str | Path) -> Frame:
    data = Path(path).read_bytes()
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        width, _ = next(tokens)
        height, _ = next(tokens)
        maxval, end = next(tokens)
        w, h, mv = int(width), int(height), int(maxval)
    except (StopIteration, ValueError) as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if mv < 1 or mv > MAX_INTENSITY:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {mv})")
    if magic == b"P5":
        raw = data[end + 1:end + 1 + w * h]
        if len(raw) != w * h:
            raise ValueError(f"{path}: truncated pixel data")
        px = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    elif magic == b"P2":
        values = [int(tok) for tok, _ in tokens]
        if len(values) < w * h:
            raise ValueError(f"{path}: truncated pixel data")
        px = np.array(values[: w * h]).reshape(h, w)
    else:
        raise ValueError(f"{path}: not a PGM file")
    return Frame(px)


def write_pgm(frame: Frame, path: str | Path) -> None:
    px = np.rint(frame.pixels).astype(np.uint8)
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + px.tobytes())
