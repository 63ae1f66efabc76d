"""Report figures. Everything renders off-screen through the Agg backend."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .tensor.checkpoint import atomic_write_bytes  # noqa: E402

# water blue, non-water white
WATER_RGB = (0.12, 0.36, 0.85)
MASK_CMAP = ListedColormap([(1.0, 1.0, 1.0), WATER_RGB])

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no timestamps or version strings, so reruns write identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def mask_to_rgb(labels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 image: water blue, everything else white."""
    out = np.full(labels.shape + (3,), 255, dtype=np.uint8)
    out[labels == 1] = np.round(np.array(WATER_RGB) * 255).astype(np.uint8)
    return out


def save_mask_png(path, labels: np.ndarray) -> Path:
    buf = io.BytesIO()
    plt.imsave(buf, mask_to_rgb(labels), format="png", metadata=_PNG_META)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def rgb_composite(raster) -> np.ndarray:
    """Per-scene 2-98 percentile stretch of R, G, B into [0, 1]."""
    rgb = np.stack([raster.band(b) for b in ("R", "G", "B")], axis=-1)
    lo, hi = np.percentile(rgb, 2), np.percentile(rgb, 98)
    return np.clip((rgb - lo) / (hi - lo if hi > lo else 1.0), 0, 1)


def _bare(ax) -> None:
    ax.set_xticks([])
    ax.set_yticks([])
    for spine in ax.spines.values():
        spine.set_visible(True)


def loss_curves(path, rows: list[dict], columns, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [r["step"] for r in rows]
        for c in columns:
            vals = np.array([r.get(c, np.nan) for r in rows], dtype=float)
            if np.isfinite(vals).any():
                ax.plot(steps, vals, label=c, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def refine_panel(path, raster, index_values: np.ndarray, truth: np.ndarray, masks: dict[str, np.ndarray]) -> Path:
    """RGB, MNDWI, truth and one column per mask variant."""
    n = 3 + len(masks)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(1.9 * n, 2.2))
        axes[0].imshow(rgb_composite(raster))
        axes[0].set_title("RGB")
        im = axes[1].imshow(index_values, cmap="RdBu", vmin=-1, vmax=1)
        axes[1].set_title("MNDWI")
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        axes[2].imshow(truth, cmap=MASK_CMAP, vmin=0, vmax=1, interpolation="nearest")
        axes[2].set_title("truth")
        for ax, (name, m) in zip(axes[3:], masks.items()):
            ax.imshow(np.where(m == 1, 1, 0), cmap=MASK_CMAP, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(name, fontsize=7)
        for ax in axes:
            _bare(ax)
        return _save(fig, path)


def prediction_panel(path, raster, s_tilde: np.ndarray | None, probabilities: np.ndarray, truth: np.ndarray | None = None) -> Path:
    cols = [("RGB", rgb_composite(raster), {})]
    if s_tilde is not None:
        cols.append(("synthesized SWIR2", s_tilde, {"cmap": "magma"}))
    cols.append(("water probability", probabilities, {"cmap": "Blues", "vmin": 0, "vmax": 1}))
    cols.append(("prediction", (probabilities >= 0.5).astype(int), {"cmap": MASK_CMAP, "vmin": 0, "vmax": 1}))
    if truth is not None:
        cols.append(("truth", truth, {"cmap": MASK_CMAP, "vmin": 0, "vmax": 1}))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(cols), figsize=(1.9 * len(cols), 2.2))
        for ax, (title, img, kw) in zip(np.atleast_1d(axes), cols):
            ax.imshow(img, interpolation="nearest", **kw)
            ax.set_title(title)
            _bare(ax)
        return _save(fig, path)


def metrics_chart(path, rows: list[dict], columns, title: str = "") -> Path:
    """Grouped bars, one group per metric and one bar per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(rows), 1)
        x = np.arange(len(columns))
        for i, r in enumerate(rows):
            vals = [r[c] for c in columns]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=r["method"])
        ax.set_xticks(x)
        ax.set_xticklabels(columns)
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)
