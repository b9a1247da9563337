"""Weight persistence: JSON manifest plus one little-endian float64 blob.

A weight set is two sibling files, `<stem>.json` and `<stem>.f64`. The
manifest carries the format tag, per-tensor shape and byte offset into
the blob, and arbitrary JSON metadata (model config, train state).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import WeightsFormatError

FORMAT_TAG = "iseg-weights/1"


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".json":
        return p, p.with_suffix(".f64")
    return p.with_suffix(p.suffix + ".json"), p.with_suffix(p.suffix + ".f64")


def save_weights(path: str | Path, tensors: dict[str, Tensor | np.ndarray],
                 meta: dict | None = None) -> Path:
    """Write tensors and metadata; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = np.ascontiguousarray(data, dtype="<f8").tobytes()
        entries[name] = {"shape": list(data.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT_TAG,
        "blob": blob_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_weights(path: str | Path,
                 requires_grad: bool = False) -> tuple[dict[str, Tensor], dict]:
    """Read a manifest back into named tensors plus its metadata dict."""
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise WeightsFormatError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise WeightsFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise WeightsFormatError(f"unsupported format {manifest.get('format')!r}")

    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.exists():
        raise WeightsFormatError(f"missing blob {blob_path}")
    blob = blob_path.read_bytes()

    tensors: dict[str, Tensor] = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 8 * count
        if end > len(blob):
            raise WeightsFormatError(f"tensor {name!r} overruns blob")
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
        tensors[name] = Tensor(arr, requires_grad=requires_grad)
    return tensors, manifest.get("meta", {})
