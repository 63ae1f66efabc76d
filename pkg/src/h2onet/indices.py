"""Water indices and threshold masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import Raster

WATER = 1
LAND = 0
IGNORE = -1


@dataclass
class IndexMap:
    values: np.ndarray
    kind: str
    invalid: np.ndarray  # True where the denominator was zero or a band was nodata

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values, kind: str = "MNDWI") -> "IndexMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, kind, np.zeros(values.shape, dtype=bool))


@dataclass
class CoarseMask:
    """Per-pixel labels in {WATER, LAND, IGNORE}."""

    labels: np.ndarray

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def normalized_difference(a: np.ndarray, b: np.ndarray, invalid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = a + b
    bad = denom == 0
    if invalid is not None:
        bad = bad | invalid
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(bad, 0.0, (a - b) / np.where(bad, 1.0, denom))
    return out, bad


def mndwi(raster: Raster) -> IndexMap:
    """(G - SWIR2) / (G + SWIR2); zero-denominator and nodata pixels read 0 and are flagged invalid."""
    vals, bad = normalized_difference(raster.band("G"), raster.band("SWIR2"), raster.nodata_mask())
    return IndexMap(vals, "MNDWI", bad)


def ndwi(raster: Raster) -> IndexMap:
    """(G - NIR) / (G + NIR), with the same degenerate handling as :func:`mndwi`."""
    vals, bad = normalized_difference(raster.band("G"), raster.band("NIR"), raster.nodata_mask())
    return IndexMap(vals, "NDWI", bad)


def threshold_mask(index: IndexMap, threshold: float, water_when_at_or_above: bool = True) -> CoarseMask:
    """Label pixels water by comparing against ``threshold``; invalid pixels become IGNORE."""
    water = index.values >= threshold if water_when_at_or_above else index.values <= threshold
    labels = np.where(water, WATER, LAND).astype(np.int8)
    labels[index.invalid] = IGNORE
    return CoarseMask(labels)


def threshold_swir_mask(swir: np.ndarray, threshold: float) -> CoarseMask:
    """Water where SWIR reflectance is at or below ``threshold`` (water absorbs SWIR)."""
    swir = np.asarray(swir)
    labels = np.where(swir <= threshold, WATER, LAND).astype(np.int8)
    labels[~np.isfinite(swir)] = IGNORE
    return CoarseMask(labels)
