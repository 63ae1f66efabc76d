"""Parameter archives: a zip holding ``manifest.json`` and raw little-endian buffers.

The archive is written with fixed timestamps and no compression, so equal
contents give byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_MAGIC = "h2onet-checkpoint"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointFormatError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    import io

    entries = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for i, name in enumerate(sorted(tensors)):
            arr = np.asarray(tensors[name])
            if not np.issubdtype(arr.dtype, np.floating):
                raise TypeError(f"checkpoint tensor {name!r} must be floating point, got {arr.dtype}")
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            blob = f"tensors/{i:05d}.bin"
            zf.writestr(_entry(blob), np.ascontiguousarray(le).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "file": blob})
        manifest = {"format": _MAGIC, "version": FORMAT_VERSION, "tensors": entries, "metadata": metadata or {}}
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike, with_metadata: bool = False):
    try:
        out, metadata = _read_archive(path)
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError) as exc:
        raise CheckpointFormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    if with_metadata:
        return out, metadata
    return out


def _read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointFormatError(f"{path}: manifest.json missing") from exc
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"{path}: manifest.json is not valid JSON ({exc})") from exc
        if manifest.get("format") != _MAGIC:
            raise CheckpointFormatError(f"{path}: unexpected format tag {manifest.get('format')!r}")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {manifest.get('version')}")
        out = {}
        for entry in manifest["tensors"]:
            dtype = np.dtype(entry["dtype"])
            raw = zf.read(entry["file"])
            expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
            if len(raw) != expected:
                raise CheckpointFormatError(
                    f"{path}: tensor {entry['name']!r} has {len(raw)} bytes, expected {expected}"
                )
            out[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return out, manifest["metadata"]
