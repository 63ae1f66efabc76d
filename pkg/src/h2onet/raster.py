"""Multiband rasters and their on-disk band-sequential format.

File layout (all integers little-endian)::

    bytes 0-3    magic b"H2OR"
    bytes 4-5    uint16 format version
    bytes 6-9    uint32 header length L
    bytes 10..   L bytes of UTF-8 JSON header:
                 {"width", "height", "bands": [...], "dtype": "<f4"|"<f8", "nodata": float|null}
    then         band planes in header order, each height*width samples, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor.checkpoint import atomic_write_bytes

MAGIC = b"H2OR"
VERSION = 1
SPECTRAL_BANDS = ("R", "G", "B", "NIR", "SWIR2")
_PREFIX = struct.Struct("<4sHI")


class RasterFormatError(ValueError):
    """Malformed raster file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BandMissingError(KeyError):
    def __init__(self, band: str, available):
        super().__init__(f"band {band!r} not present; raster has {list(available)}")
        self.band = band


@dataclass
class Raster:
    width: int
    height: int
    bands: dict[str, np.ndarray] = field(default_factory=dict)
    nodata: float | None = None

    def __post_init__(self):
        for name, plane in self.bands.items():
            if plane.shape != (self.height, self.width):
                raise ValueError(f"band {name!r} has shape {plane.shape}, expected {(self.height, self.width)}")

    @classmethod
    def from_planes(cls, nodata: float | None = None, **planes: np.ndarray) -> "Raster":
        first = next(iter(planes.values()))
        h, w = first.shape
        return cls(w, h, {k: np.asarray(v, dtype=np.float64) for k, v in planes.items()}, nodata)

    def band(self, name: str) -> np.ndarray:
        try:
            return self.bands[name]
        except KeyError:
            raise BandMissingError(name, self.bands) from None

    @property
    def band_names(self) -> list[str]:
        return list(self.bands)

    def stack(self, names) -> np.ndarray:
        return np.stack([self.band(n) for n in names])

    def nodata_mask(self) -> np.ndarray:
        """True where any band holds the nodata sentinel."""
        mask = np.zeros((self.height, self.width), dtype=bool)
        if self.nodata is None:
            return mask
        for plane in self.bands.values():
            mask |= plane == self.nodata
        return mask

    def normalized(self, stats: dict[str, tuple[float, float]], names=None) -> np.ndarray:
        """(C, H, W) stack standardized with per-band (mean, std); raw bands stay untouched."""
        names = list(names) if names is not None else [n for n in self.bands if n in stats]
        out = []
        for n in names:
            mu, sd = stats[n]
            out.append((self.band(n) - mu) / (sd if sd > 0 else 1.0))
        return np.stack(out)


def band_statistics(rasters, names=SPECTRAL_BANDS) -> dict[str, tuple[float, float]]:
    """Dataset-level per-band mean and standard deviation."""
    stats = {}
    for n in names:
        vals = np.concatenate([r.band(n).ravel() for r in rasters if n in r.bands])
        stats[n] = (float(vals.mean()), float(vals.std()))
    return stats


def encode_raster(raster: Raster, dtype: str = "<f8") -> bytes:
    dt = np.dtype(dtype)
    if dt.kind != "f":
        raise ValueError(f"raster dtype must be floating point, got {dtype}")
    header = {
        "width": raster.width,
        "height": raster.height,
        "bands": raster.band_names,
        "dtype": dt.str,
        "nodata": raster.nodata,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, len(hb)), hb]
    for name in raster.band_names:
        parts.append(np.ascontiguousarray(raster.bands[name], dtype=dt).tobytes())
    return b"".join(parts)


def decode_raster(buf: bytes) -> Raster:
    if len(buf) < _PREFIX.size:
        raise RasterFormatError(f"file too short for header prefix: {len(buf)} bytes, need {_PREFIX.size}", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise RasterFormatError(f"unsupported format version {version}", 4)
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise RasterFormatError(f"truncated header: expected {hlen} bytes, got {len(buf) - start}", start)
    try:
        header = json.loads(buf[start : start + hlen])
        width, height = int(header["width"]), int(header["height"])
        names = list(header["bands"])
        dt = np.dtype(header["dtype"])
    except (ValueError, KeyError, TypeError) as exc:
        raise RasterFormatError(f"invalid header: {exc}", start) from exc
    offset = start + hlen
    expected = len(names) * width * height * dt.itemsize
    actual = len(buf) - offset
    if actual != expected:
        kind = "truncated payload" if actual < expected else "trailing bytes after payload"
        raise RasterFormatError(f"{kind}: expected {expected} payload bytes, got {actual}", offset + min(actual, expected))
    plane = width * height
    bands = {}
    arr = np.frombuffer(buf, dtype=dt, offset=offset, count=len(names) * plane)
    for i, name in enumerate(names):
        bands[name] = arr[i * plane : (i + 1) * plane].reshape(height, width).astype(dt.newbyteorder("="))
    return Raster(width, height, bands, header.get("nodata"))


def write_raster(path: str | os.PathLike, raster: Raster, dtype: str = "<f8") -> None:
    atomic_write_bytes(path, encode_raster(raster, dtype))


def read_raster(path: str | os.PathLike) -> Raster:
    return decode_raster(Path(path).read_bytes())


def ingest(path: str | os.PathLike, stats: dict[str, tuple[float, float]] | None = None):
    """Load a raster file.

    Returns the raw raster, or ``(raster, normalized)`` when ``stats`` are
    given, where ``normalized`` is the (C, H, W) standardized stack of the
    bands covered by ``stats``. Water indices are always computed on the raw
    reflectances.
    """
    raster = read_raster(path)
    if stats is None:
        return raster
    return raster, raster.normalized(stats)
