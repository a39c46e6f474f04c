"""Image containers, region masks, seeded RNG streams and tensor files.

Images are plain numpy arrays shaped ``(C, H, W)``.  Values nominally lie in
[0, 1] but diffusion intermediates may leave that range; only finiteness is
enforced.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PFT_MAGIC = b"PFT1"
DEFAULT_SHAPE = (1, 32, 32)


class ImageError(ValueError):
    """Invalid image, mask or volume."""


class FormatError(ValueError):
    """Malformed tensor file."""


def as_patch(x, name: str = "image") -> np.ndarray:
    """Validate ``x`` as a ``(C, H, W)`` finite array and return it as an ndarray."""
    a = np.asarray(x)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ImageError(f"{name} must have shape (C, H, W), got {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float32)
    if not np.all(np.isfinite(a)):
        raise ImageError(f"{name} contains non-finite values")
    return a


# -- RNG streams --------------------------------------------------------------


@dataclass(frozen=True)
class SeededRng:
    """A (master seed, stream id) pair naming an independent random stream.

    Streams are derived with ``numpy.random.SeedSequence`` spawn keys over the
    PCG64 generator, so a given pair produces the same draws everywhere.
    """

    seed: int
    stream: tuple = ()

    def child(self, *stream: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(int(s) for s in stream))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) % 2**64, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    return SeededRng(int(seed), tuple(int(s) for s in stream)).generator()


def ensure_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, SeededRng):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return rng_stream(int(rng))
    raise TypeError(f"expected a Generator, SeededRng or int seed, got {type(rng).__name__}")


# -- region masks ---------------------------------------------------------------


def random_region_mask(H: int, W: int, rng, kind: str = "halfplane") -> np.ndarray:
    """Binary ``(H, W)`` mask splitting the image into two nonempty regions.

    ``halfplane`` cuts along a line with uniform angle through a uniform
    point inside the pixel-center hull; ``rectangle`` marks a random
    axis-aligned box.
    """
    if H < 2 or W < 2:
        raise ImageError(f"mask needs H, W >= 2, got {H}x{W}")
    rng = ensure_rng(rng)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(100):
        if kind == "halfplane":
            theta = rng.uniform(0.0, 2.0 * math.pi)
            py = rng.uniform(0.0, H - 1)
            px = rng.uniform(0.0, W - 1)
            side = (xx - px) * math.cos(theta) + (yy - py) * math.sin(theta)
            m = (side > 0).astype(np.float32)
        elif kind == "rectangle":
            y0, y1 = np.sort(rng.integers(0, H + 1, size=2))
            x0, x1 = np.sort(rng.integers(0, W + 1, size=2))
            m = np.zeros((H, W), np.float32)
            m[y0:y1, x0:x1] = 1.0
        else:
            raise ImageError(f"unknown mask kind {kind!r}")
        frac = m.mean()
        if 0.0 < frac < 1.0:
            return m
    raise ImageError("could not draw a nondegenerate mask")  # pragma: no cover


# -- volumes --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Volume:
    """Depth-ordered stack of slices, shape ``(Z, C, H, W)``; depths in micrometers."""

    slices: np.ndarray
    depth_start: float = 22.0
    depth_step: float = 2.0

    def __post_init__(self):
        s = np.asarray(self.slices)
        if s.ndim != 4 or s.shape[0] < 1:
            raise ImageError(f"volume slices must be (Z, C, H, W) with Z >= 1, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ImageError("volume contains non-finite values")
        object.__setattr__(self, "slices", s)

    def __len__(self) -> int:
        return self.slices.shape[0]

    def __getitem__(self, z: int) -> np.ndarray:
        return self.slices[z]

    @property
    def depths(self) -> np.ndarray:
        return self.depth_start + self.depth_step * np.arange(len(self))


# -- file I/O ---------------------------------------------------------------------


def save_tensor(path, array) -> None:
    """Write ``array`` as a Portable Float Tensor (little-endian float32, row-major)."""
    a = np.asarray(array)
    data = np.ascontiguousarray(a, dtype="<f4")
    header = PFT_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + data.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a PFT file of any rank; raises ``FormatError`` on malformed input."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PFT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * ndim
    if ndim > 32 or len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) != head + 4 * n:
        raise FormatError(f"{path}: expected {n} values, file holds {(len(raw) - head) / 4:g}")
    a = np.frombuffer(raw, dtype="<f4", count=n, offset=head).astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(a)):
        raise ImageError(f"{path}: non-finite values")
    return a


def load_tensor(path) -> np.ndarray:
    """Read a PFT file holding one ``(C, H, W)`` image."""
    return as_patch(read_tensor(path), name=str(path))


def save_png(path, patch) -> None:
    from PIL import Image

    a = as_patch(patch)
    u8 = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.shape[0] == 1:
        img = Image.fromarray(u8[0])
    elif a.shape[0] == 3:
        img = Image.fromarray(np.ascontiguousarray(np.moveaxis(u8, 0, -1)))
    else:
        raise ImageError(f"PNG export supports 1 or 3 channels, got {a.shape[0]}")
    img.save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB" if img.mode in ("RGB", "RGBA", "P") else "L")
        a = np.asarray(img, dtype=np.float32) / 255.0
    return a[None] if a.ndim == 2 else np.moveaxis(a, -1, 0).copy()


def load_image(path) -> np.ndarray:
    """Load a PFT or PNG image by extension."""
    if str(path).lower().endswith(".png"):
        return load_png(path)
    return load_tensor(path)


def save_image(path, patch) -> None:
    if str(path).lower().endswith(".png"):
        save_png(path, patch)
    else:
        save_tensor(path, patch)
