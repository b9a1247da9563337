"""Mask propagation across volume slices via key-affinity memory readout.

Each slice is encoded into an L2-normalized per-location key grid; a
rolling memory of (key, soft-mask) entries anchored at a seed slice is
swept forward and backward, predicting each next slice as a top-k
softmax blend (by negative squared key distance) of stored mask values.
Slices reachable from several seeds take the nearest seed's prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import bilinear_resize
from .errors import DimMismatch, EmptyMemory, IsegError, MissingWeights
from .masks import MetricSet, confusion_counts, load_gray, metrics_from_counts, \
    save_mask
from .model import ModelConfig, encoder_features

RAW_PATCH = "raw_patch"
ENCODER_STAGE2 = "encoder_stage2"


@dataclass
class PropagationConfig:
    feature_source: str = RAW_PATCH
    top_k: int = 8
    memory_capacity: int = 8
    seed_slices: list[tuple[int, np.ndarray]] = field(default_factory=list)
    binarize: float = 0.5
    key_patch: int = 2

    def __post_init__(self):
        if self.feature_source not in (RAW_PATCH, ENCODER_STAGE2):
            raise ValueError(f"unknown feature source {self.feature_source!r}")
        if self.top_k < 1 or self.memory_capacity < 1 or self.key_patch < 1:
            raise ValueError("top_k, memory_capacity, key_patch must be >= 1")


class MemoryBank:
    """FIFO store of (key grid, soft value grid) pairs; pinned entries
    (the sweep's seed) survive eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[tuple[np.ndarray, np.ndarray]] = []
        self._pinned: list[bool] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, key: np.ndarray, value: np.ndarray,
            pinned: bool = False) -> None:
        if key.shape[:2] != value.shape[:2]:
            raise DimMismatch(f"key {key.shape} vs value {value.shape}")
        self.entries.append((key, value))
        self._pinned.append(pinned)
        while len(self.entries) > self.capacity:
            for i, p in enumerate(self._pinned):
                if not p:
                    del self.entries[i]
                    del self._pinned[i]
                    break
            else:
                break  # everything pinned; allow overflow


def _patch_blocks(arr: np.ndarray, p: int) -> np.ndarray:
    h, w = arr.shape
    hh, ww = (h // p) * p, (w // p) * p
    x = arr[:hh, :ww].reshape(hh // p, p, ww // p, p)
    return x.transpose(0, 2, 1, 3)


def _raw_patch_key(slice2d: np.ndarray, patch: int) -> np.ndarray:
    """Model-free descriptor per non-overlapping patch: intensity mean and
    spread, 4-bin gradient-orientation histogram, and a constant channel
    (so intensity contrast survives L2 normalization)."""
    x = np.asarray(slice2d, dtype=np.float64)
    blocks = _patch_blocks(x, patch)
    mean = blocks.mean(axis=(2, 3))
    std = blocks.std(axis=(2, 3))

    gy, gx = np.gradient(x)
    mag = np.hypot(gy, gx)
    ang = np.arctan2(gy, gx)
    bins = np.clip(((ang + np.pi) / (np.pi / 2.0)).astype(int), 0, 3)
    hists = []
    for b in range(4):
        hists.append(_patch_blocks(mag * (bins == b), patch).sum(axis=(2, 3)))

    desc = np.stack([mean, std, *hists, np.ones_like(mean)], axis=-1)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    return desc / np.maximum(norm, 1e-12)


def extract_key(slice2d: np.ndarray, config: PropagationConfig,
                weights=None, model_config: ModelConfig | None = None
                ) -> np.ndarray:
    """Per-location key grid for a slice, unit-norm at every location."""
    if config.feature_source == ENCODER_STAGE2:
        if weights is None or model_config is None:
            raise MissingWeights("encoder_stage2 keys need model weights")
        feats = encoder_features(slice2d, weights, model_config)
        norm = np.linalg.norm(feats, axis=-1, keepdims=True)
        return feats / np.maximum(norm, 1e-12)
    return _raw_patch_key(slice2d, config.key_patch)


def _affinity_weights(query: np.ndarray, keys: np.ndarray,
                      top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k softmax weights per query row over negative squared distance.

    query: (Q, d), keys: (N, d). Returns (indices (Q, k), weights (Q, k));
    weights rows sum to 1.
    """
    d2 = (np.square(query).sum(axis=1)[:, None]
          + np.square(keys).sum(axis=1)[None, :]
          - 2.0 * query @ keys.T)
    affinity = -np.maximum(d2, 0.0)
    k = min(top_k, keys.shape[0])
    if k < keys.shape[0]:
        idx = np.argpartition(affinity, -k, axis=1)[:, -k:]
    else:
        idx = np.broadcast_to(np.arange(keys.shape[0]), affinity.shape).copy()
    sel = np.take_along_axis(affinity, idx, axis=1)
    sel = sel - sel.max(axis=1, keepdims=True)
    e = np.exp(sel)
    return idx, e / e.sum(axis=1, keepdims=True)


def readout(query_key: np.ndarray, memory: MemoryBank,
            top_k: int) -> np.ndarray:
    """Soft mask for a query slice as a convex blend of memory values."""
    if len(memory) == 0:
        raise EmptyMemory("readout from empty memory")
    h, w = query_key.shape[:2]
    keys = np.concatenate([k.reshape(-1, k.shape[-1])
                           for k, _ in memory.entries], axis=0)
    values = np.concatenate([v.reshape(-1) for _, v in memory.entries])
    q = query_key.reshape(-1, query_key.shape[-1])
    idx, weights = _affinity_weights(q, keys, top_k)
    out = (weights * values[idx]).sum(axis=1)
    return out.reshape(h, w)


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Block-mean soft mask at the key grid resolution."""
    h, w = mask.shape
    if h % grid_h != 0 or w % grid_w != 0:
        raise DimMismatch(f"mask {h}x{w} not divisible into {grid_h}x{grid_w}")
    fh, fw = h // grid_h, w // grid_w
    return mask.astype(np.float64).reshape(grid_h, fh, grid_w, fw).mean(axis=(1, 3))


def _slice_owner(depth: int, seed_idxs: list[int]) -> list[int]:
    owners = []
    for j in range(depth):
        best = min(seed_idxs, key=lambda s: (abs(j - s), s))
        owners.append(best)
    return owners


def propagate_volume(volume: np.ndarray, config: PropagationConfig,
                     weights=None, model_config: ModelConfig | None = None
                     ) -> tuple[np.ndarray, dict[int, int]]:
    """Propagate seed masks across the whole stack.

    Returns (masks, provenance): masks is (D, H, W) uint8 with seed
    slices kept verbatim; provenance maps each slice to the seed whose
    sweep produced it (nearest seed, ties to the lower index).
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise DimMismatch(f"volume must be (D, H, W), got {vol.shape}")
    depth, h, w = vol.shape
    if not config.seed_slices:
        raise IsegError("propagation needs at least one seed slice")
    seeds = {}
    for idx, mask in config.seed_slices:
        if not 0 <= idx < depth:
            raise IsegError(f"seed index {idx} outside volume depth {depth}")
        if mask.shape != (h, w):
            raise DimMismatch(f"seed mask {mask.shape} vs slice {(h, w)}")
        seeds[int(idx)] = np.asarray(mask, dtype=np.uint8)

    key_cache: dict[int, np.ndarray] = {}

    def key_of(j: int) -> np.ndarray:
        if j not in key_cache:
            key_cache[j] = extract_key(vol[j], config, weights, model_config)
        return key_cache[j]

    seed_idxs = sorted(seeds)
    owners = _slice_owner(depth, seed_idxs)
    masks = np.zeros((depth, h, w), dtype=np.uint8)
    provenance: dict[int, int] = {}

    for s in seed_idxs:
        masks[s] = seeds[s]
        provenance[s] = s
        grid_h, grid_w = key_of(s).shape[:2]
        # keys crop any dim remainder; track masks on the covered region
        hh = (h // grid_h) * grid_h
        ww = (w // grid_w) * grid_w
        seed_value = downsample_mask(seeds[s][:hh, :ww], grid_h, grid_w)
        for direction in (1, -1):
            memory = MemoryBank(config.memory_capacity)
            memory.add(key_of(s), seed_value, pinned=True)
            j = s + direction
            while 0 <= j < depth and owners[j] == s and j not in seeds:
                q = key_of(j)
                soft = readout(q, memory, config.top_k)
                up = bilinear_resize(soft, hh, ww)
                masks[j, :hh, :ww] = (up >= config.binarize).astype(np.uint8)
                provenance[j] = s
                memory.add(q, soft)
                j += direction
    return masks, provenance


def evaluate_volume(pred_masks: np.ndarray, gt_masks: np.ndarray) -> MetricSet:
    """Voxel-pooled IoU/DSC/SEN/PPV over a whole volume."""
    p = np.asarray(pred_masks)
    g = np.asarray(gt_masks)
    if p.shape != g.shape:
        raise DimMismatch(f"pred {p.shape} vs gt {g.shape}")
    tp, fp, fn = confusion_counts(p.reshape(1, -1), g.reshape(1, -1))
    return metrics_from_counts(tp, fp, fn)


def load_volume(path: str | Path) -> np.ndarray:
    """Read a volume: a directory of ordered PNG slices, or a raw u8 blob
    next to a `<stem>.json` sidecar holding {depth, height, width}."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise IsegError(f"no PNG slices under {p}")
        slices = [load_gray(f) for f in files]
        first = slices[0].shape
        if any(s.shape != first for s in slices):
            raise DimMismatch("volume slices have mixed dimensions")
        return np.stack(slices)
    sidecar = p.with_suffix(".json")
    if not sidecar.exists():
        raise IsegError(f"raw volume {p} needs sidecar {sidecar}")
    dims = json.loads(sidecar.read_text())
    d, h, w = int(dims["depth"]), int(dims["height"]), int(dims["width"])
    raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
    if raw.size != d * h * w:
        raise DimMismatch(f"blob holds {raw.size} voxels, sidecar says {d * h * w}")
    return raw.reshape(d, h, w).astype(np.float64) / 255.0


def slice_filenames(path: str | Path, depth: int) -> list[str]:
    """Per-slice output filenames mirroring the input layout."""
    p = Path(path)
    if p.is_dir():
        return [f.name for f in sorted(p.glob("*.png"))]
    return [f"{i:03d}.png" for i in range(depth)]


def save_volume_masks(out_dir: str | Path, masks: np.ndarray,
                      provenance: dict[int, int],
                      filenames: list[str] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = filenames or [f"{i:03d}.png" for i in range(masks.shape[0])]
    for i in range(masks.shape[0]):
        save_mask(out / names[i], masks[i])
    (out / "provenance.json").write_text(
        json.dumps({str(k): v for k, v in sorted(provenance.items())},
                   indent=1))
