"""Binary mask algebra, pixel metrics, click encoding and click simulation.

Masks are 2-d uint8 arrays with values in {0, 1}. All functions here are
pure over immutable inputs and safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimMismatch, NoMisclassifiedPixels, OutOfBoundsClick

DEFAULT_CLICK_RADIUS = 5


@dataclass(frozen=True)
class Click:
    """One user interaction: a pixel, its polarity and placement order."""

    row: int
    col: int
    positive: bool
    ordinal: int = 0

    @property
    def polarity(self) -> str:
        return "positive" if self.positive else "negative"


@dataclass(frozen=True)
class MetricSet:
    iou: float
    dsc: float
    sen: float
    ppv: float


def as_mask(arr) -> np.ndarray:
    """Coerce to a {0,1} uint8 mask, validating shape and values."""
    m = np.asarray(arr)
    if m.ndim != 2:
        raise DimMismatch(f"mask must be 2-d, got shape {m.shape}")
    if m.dtype == bool:
        return m.astype(np.uint8)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimMismatch(f"mask dims differ: {a.shape} vs {b.shape}")


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """(TP, FP, FN) pixel counts for a prediction/ground-truth pair."""
    _check_same_dims(pred, gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    tp, fp, fn = confusion_counts(pred, gt)
    union = tp + fp + fn
    if union == 0:
        return 1.0
    return tp / union


def metrics_from_counts(tp: int, fp: int, fn: int) -> MetricSet:
    def ratio(num: int, den: int) -> float:
        if den == 0:
            return 1.0 if (tp + fp + fn) == 0 else 0.0
        return num / den

    return MetricSet(
        iou=ratio(tp, tp + fp + fn),
        dsc=ratio(2 * tp, 2 * tp + fp + fn),
        sen=ratio(tp, tp + fn),
        ppv=ratio(tp, tp + fp),
    )


def metrics(pred: np.ndarray, gt: np.ndarray) -> MetricSet:
    """IoU, Dice, sensitivity and positive predictive value for a mask pair."""
    return metrics_from_counts(*confusion_counts(pred, gt))


def connected_components(mask: np.ndarray, connectivity: int = 8
                         ) -> tuple[np.ndarray, list[int]]:
    """Label foreground regions.

    Returns (labels, sizes): labels is 0 for background and 1..n for
    components ordered by decreasing size, ties broken by the smallest
    (row, col) pixel in the component. sizes[i] is the size of label i+1.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = np.ones((3, 3), dtype=int) if connectivity == 8 else None
    raw, n = ndimage.label(np.asarray(mask) != 0, structure=structure)
    if n == 0:
        return np.zeros_like(raw, dtype=np.int32), []

    flat = raw.ravel()
    order_keys = []
    for lab in range(1, n + 1):
        idx = np.flatnonzero(flat == lab)
        order_keys.append((-idx.size, idx[0], lab))
    order_keys.sort()

    relabel = np.zeros(n + 1, dtype=np.int32)
    sizes = []
    for new_lab, (neg_size, _seed, old_lab) in enumerate(order_keys, start=1):
        relabel[old_lab] = new_lab
        sizes.append(-neg_size)
    return relabel[raw], sizes


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean distance to the nearest pixel outside the region.

    The image border counts as outside; background pixels map to 0.
    """
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    dt = ndimage.distance_transform_edt(padded)
    return dt[1:-1, 1:-1]


def _disk_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    span = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def encode_clicks(clicks: list[Click], height: int, width: int,
                  radius: int = DEFAULT_CLICK_RADIUS) -> np.ndarray:
    """Rasterize clicks into an (H, W, 2) map of solid disks.

    Channel 0 holds positive clicks, channel 1 negative; disks are
    clipped at the image bounds. Union semantics: duplicate or
    reordered clicks produce the same map.
    """
    out = np.zeros((height, width, 2), dtype=np.float64)
    offsets = _disk_offsets(radius)
    for c in clicks:
        if not (0 <= c.row < height and 0 <= c.col < width):
            raise OutOfBoundsClick(f"click ({c.row},{c.col}) outside {height}x{width}")
        rows = c.row + offsets[:, 0]
        cols = c.col + offsets[:, 1]
        keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        out[rows[keep], cols[keep], 0 if c.positive else 1] = 1.0
    return out


def simulate_next_click(pred: np.ndarray, gt: np.ndarray,
                        ordinal: int = 0) -> Click:
    """Place the next corrective click at the center of the worst error region.

    The polarity whose largest 8-connected error component is bigger wins
    (tie: positive); the click lands on that component's deepest interior
    pixel (max distance to outside, tie: smallest (row, col)).
    """
    _check_same_dims(np.asarray(pred), np.asarray(gt))
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    fn = g & ~p
    fp = p & ~g
    if not fn.any() and not fp.any():
        raise NoMisclassifiedPixels("prediction equals ground truth")

    fn_labels, fn_sizes = connected_components(fn.astype(np.uint8), 8)
    fp_labels, fp_sizes = connected_components(fp.astype(np.uint8), 8)
    fn_max = fn_sizes[0] if fn_sizes else 0
    fp_max = fp_sizes[0] if fp_sizes else 0

    positive = fn_max >= fp_max
    component = (fn_labels == 1) if positive else (fp_labels == 1)
    dt = distance_transform(component.astype(np.uint8))
    best = np.argwhere(dt == dt.max())[0]
    return Click(row=int(best[0]), col=int(best[1]),
                 positive=positive, ordinal=ordinal)


def perturb_click(click: Click, max_offset: int, height: int, width: int,
                  rng: np.random.Generator | int) -> Click:
    """Jitter a click by a uniform offset in [-max_offset, max_offset]^2.

    The result is clamped in-bounds; polarity and ordinal are preserved.
    """
    if max_offset < 0:
        raise ValueError("max_offset must be >= 0")
    if max_offset == 0:
        return click
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    dr, dc = gen.integers(-max_offset, max_offset + 1, size=2)
    return Click(
        row=int(np.clip(click.row + dr, 0, height - 1)),
        col=int(np.clip(click.col + dc, 0, width - 1)),
        positive=click.positive,
        ordinal=click.ordinal,
    )


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probability map to {0,1} mask at the given threshold (>= keeps)."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def load_mask(path: str | Path) -> np.ndarray:
    """Read a PNG/PGM mask: any nonzero pixel is foreground."""
    img = Image.open(path).convert("L")
    return (np.asarray(img) != 0).astype(np.uint8)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a mask as 8-bit grayscale, 0 background / 255 foreground."""
    m = as_mask(mask)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)


def mask_png_bytes(mask: np.ndarray) -> bytes:
    """PNG-encode a mask (0/255 grayscale) into bytes."""
    import io

    m = as_mask(mask)
    buf = io.BytesIO()
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def load_gray(path: str | Path) -> np.ndarray:
    """Read an image as grayscale float64 in [0, 1]."""
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_gray(path: str | Path, arr: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit grayscale."""
    data = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray(np.round(data * 255).astype(np.uint8), mode="L").save(path)
