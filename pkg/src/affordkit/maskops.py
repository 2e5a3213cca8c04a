"""Binary masks, column-major run-length encoding, rasterization and IoU.

Run-length counts walk the mask column by column (column 0 top to bottom,
then column 1, ...) and always start with a run of zeros, which may be empty.
This is the layout used by COCO-style segmentation annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class MaskError(ValueError):
    pass


class BadRle(MaskError):
    def __init__(self, reason: str):
        super().__init__(f"bad RLE: {reason}")
        self.reason = reason


class SizeMismatch(MaskError):
    def __init__(self, a: tuple[int, int], b: tuple[int, int]):
        super().__init__(f"size mismatch: {a} vs {b}")
        self.a = a
        self.b = b


class OutOfBounds(MaskError):
    pass


class DegeneratePolygon(MaskError):
    pass


class BinaryMask:
    """Immutable boolean raster of shape (height, width)."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MaskError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    def area(self) -> int:
        return int(np.count_nonzero(self._bits))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self):
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self):
        return f"BinaryMask({self.height}x{self.width}, area={self.area()})"


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def height(self) -> int:
        return self.size[0]

    @property
    def width(self) -> int:
        return self.size[1]

    def problems(self) -> list[str]:
        """Return every violated RLE invariant (empty when valid)."""
        out = []
        if len(self.size) != 2 or self.size[0] < 1 or self.size[1] < 1:
            out.append(f"size must be two positive integers, got {list(self.size)}")
        if not self.counts:
            out.append("counts is empty")
        if any(c < 0 for c in self.counts):
            out.append("negative run length")
        if any(c == 0 for c in self.counts[1:]):
            out.append("zero-length run after the leading zero run")
        if len(self.size) == 2 and sum(self.counts) != self.size[0] * self.size[1]:
            out.append(f"sum {sum(self.counts)} != {self.size[0]}*{self.size[1]}")
        return out

    def area(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            size = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError) as e:
            raise BadRle(f"missing key {e}") from None
        if not isinstance(size, list) or not isinstance(counts, list):
            raise BadRle("size and counts must be lists")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in size + counts):
            raise BadRle("size and counts must hold integers")
        return cls(tuple(size), tuple(counts))


def rle_encode(m: BinaryMask) -> RleMask:
    flat = m.bits.ravel(order="F")
    n = flat.size
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [n]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask((m.height, m.width), tuple(counts))


def rle_decode(r: RleMask) -> BinaryMask:
    bad = r.problems()
    if bad:
        raise BadRle("; ".join(bad))
    h, w = r.size
    values = np.zeros(len(r.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, r.counts)
    return BinaryMask(flat.reshape((w, h)).T)


def _runs(r: RleMask) -> list[tuple[int, int]]:
    """Half-open [start, end) intervals of set pixels in column-major order."""
    out = []
    pos = 0
    for i, c in enumerate(r.counts):
        if i % 2 == 1 and c:
            out.append((pos, pos + c))
        pos += c
    return out


class IoU(NamedTuple):
    intersection: int
    union: int
    iou: float


def _ratio(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def iou(a: BinaryMask, b: BinaryMask) -> IoU:
    if a.shape != b.shape:
        raise SizeMismatch(a.shape, b.shape)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return IoU(inter, union, _ratio(inter, union))


def rle_iou(a: RleMask, b: RleMask) -> IoU:
    """IoU computed directly on run intervals, without decoding either mask."""
    if a.size != b.size:
        raise SizeMismatch(a.size, b.size)
    for r in (a, b):
        bad = r.problems()
        if bad:
            raise BadRle("; ".join(bad))
    ra, rb = _runs(a), _runs(b)
    inter = 0
    i = j = 0
    while i < len(ra) and j < len(rb):
        lo = max(ra[i][0], rb[j][0])
        hi = min(ra[i][1], rb[j][1])
        if hi > lo:
            inter += hi - lo
        if ra[i][1] <= rb[j][1]:
            i += 1
        else:
            j += 1
    union = a.area() + b.area() - inter
    return IoU(inter, union, _ratio(inter, union))


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def clip(self, width: int, height: int) -> "BBox":
        return BBox(
            min(max(self.x0, 0), width),
            min(max(self.y0, 0), height),
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
        )


def rasterize_box(b: BBox, width: int, height: int, clip: bool = False) -> BinaryMask:
    """Set exactly the pixels inside the box.

    With ``clip=True`` the box is first intersected with the image instead of
    raising :class:`OutOfBounds`; an empty intersection yields an empty mask.
    """
    if clip:
        b = b.clip(width, height)
        bits = np.zeros((height, width), dtype=bool)
        if b.x1 > b.x0 and b.y1 > b.y0:
            bits[b.y0:b.y1, b.x0:b.x1] = True
        return BinaryMask(bits)
    if not (0 <= b.x0 < b.x1 <= width and 0 <= b.y0 < b.y1 <= height):
        raise OutOfBounds(f"box {b} not inside {width}x{height} image")
    bits = np.zeros((height, width), dtype=bool)
    bits[b.y0:b.y1, b.x0:b.x1] = True
    return BinaryMask(bits)


def rasterize_polygon(vertices: Sequence[tuple[float, float]], width: int, height: int) -> BinaryMask:
    """Even-odd fill sampled at pixel centers (col + 0.5, row + 0.5)."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise DegeneratePolygon("polygon needs at least 3 (x, y) vertices")
    if not np.all(np.isfinite(v)):
        raise DegeneratePolygon("polygon has non-finite coordinates")
    d = v[1:] - v[0]
    cross = d[:, 0, None] * d[None, :, 1] - d[:, 1, None] * d[None, :, 0]
    scale = max(float(np.abs(d).max()), 1e-300) ** 2
    if np.all(np.abs(cross) <= 1e-12 * scale):
        raise DegeneratePolygon("all polygon vertices are collinear")

    px = np.arange(width) + 0.5
    py = np.arange(height) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
        if y1 == y2:
            continue
        rows = (y1 > py) != (y2 > py)
        if not rows.any():
            continue
        xint = x1 + (py[rows] - y1) * (x2 - x1) / (y2 - y1)
        inside[rows] ^= px[None, :] < xint[:, None]
    return BinaryMask(inside)


def save_mask_png(m: BinaryMask, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(m.bits.astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path: str | Path) -> BinaryMask:
    from PIL import Image

    with Image.open(path) as im:
        return BinaryMask(np.asarray(im.convert("L")) > 127)
