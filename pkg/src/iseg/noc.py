"""Number-of-clicks evaluation: per-sample click loops, aggregation and
report emission.

A sample run alternates deterministic click simulation against the
current binarized prediction with a backend forward pass, recording the
IoU after every click. NoC@t is the first click reaching IoU >= t,
capped at max_clicks; capped samples count as failures at t.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyGroundTruth, EmptyInput, MalformedDataset
from .masks import Click, binarize, encode_clicks, iou, load_gray, load_mask, \
    simulate_next_click
from .model import ModelConfig, forward

DEFAULT_THRESHOLDS = (0.80, 0.85, 0.90)
DEFAULT_MAX_CLICKS = 20


class Backend:
    """A named deterministic predictor: (image, clicks) -> probability map."""

    name = "backend"

    def bind_sample(self, image: np.ndarray, gt: np.ndarray) -> None:
        """Hook called before each sample; oracle backends use the gt."""

    def predict(self, image: np.ndarray, clicks: list[Click]) -> np.ndarray:
        raise NotImplementedError


class ModelBackend(Backend):
    """Runs the segmentation network on the image plus encoded clicks."""

    def __init__(self, weights, config: ModelConfig, name: str = "model"):
        self.weights = weights
        self.config = config
        self.name = name

    def predict(self, image: np.ndarray, clicks: list[Click]) -> np.ndarray:
        h, w = image.shape[:2]
        clickmap = encode_clicks(clicks, h, w, self.config.click_radius)
        return forward(image, clickmap, self.weights, self.config)


class OracleBackend(Backend):
    """Returns the bound ground truth after the first click (protocol smoke
    test: every threshold is reached at click 1)."""

    name = "oracle"

    def __init__(self):
        self._gt: np.ndarray | None = None

    def bind_sample(self, image: np.ndarray, gt: np.ndarray) -> None:
        self._gt = gt

    def predict(self, image: np.ndarray, clicks: list[Click]) -> np.ndarray:
        if self._gt is None:
            raise EmptyGroundTruth("oracle backend has no bound sample")
        return self._gt.astype(np.float64)


@dataclass
class NoCRecord:
    sample_id: str
    noc_at: dict[float, int]
    failed_at: dict[float, bool]
    iou_trace: list[float]
    spc_ms: float


@dataclass
class NoCReport:
    backend: str
    thresholds: tuple[float, ...]
    max_clicks: int
    sample_count: int
    noc_mean: dict[float, float]
    noc_std: dict[float, float]
    failures: dict[float, int]

    def to_json(self) -> str:
        def pct(t: float) -> str:
            return str(int(round(t * 100)))

        payload = {
            "backend": self.backend,
            "thresholds": list(self.thresholds),
            "max_clicks": self.max_clicks,
            "sample_count": self.sample_count,
            "noc_mean": {pct(t): self.noc_mean[t] for t in self.thresholds},
            "noc_std": {pct(t): self.noc_std[t] for t in self.thresholds},
            "failures": {pct(t): self.failures[t] for t in self.thresholds},
        }
        return json.dumps(payload, indent=1, sort_keys=True)


def run_sample(backend: Backend, image: np.ndarray, gt: np.ndarray,
               thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
               max_clicks: int = DEFAULT_MAX_CLICKS,
               binarize_threshold: float = 0.5,
               sample_id: str = "") -> NoCRecord:
    """Click until the top threshold is reached or the budget runs out."""
    gt = np.asarray(gt).astype(np.uint8)
    if not gt.any():
        raise EmptyGroundTruth(f"sample {sample_id!r} has empty ground truth")
    thresholds = tuple(sorted(thresholds))
    backend.bind_sample(image, gt)

    pred = np.zeros_like(gt)
    clicks: list[Click] = []
    trace: list[float] = []
    elapsed: list[float] = []
    top = thresholds[-1]
    for i in range(max_clicks):
        clicks.append(simulate_next_click(pred, gt, ordinal=i))
        t0 = time.perf_counter()
        prob = backend.predict(image, clicks)
        elapsed.append(time.perf_counter() - t0)
        pred = binarize(prob, binarize_threshold)
        trace.append(iou(pred, gt))
        if trace[-1] >= top:
            break

    noc_at: dict[float, int] = {}
    failed_at: dict[float, bool] = {}
    for t in thresholds:
        hit = next((i + 1 for i, v in enumerate(trace) if v >= t), None)
        noc_at[t] = hit if hit is not None else max_clicks
        failed_at[t] = hit is None
    return NoCRecord(sample_id=sample_id, noc_at=noc_at, failed_at=failed_at,
                     iou_trace=trace, spc_ms=1000.0 * float(np.mean(elapsed)))


def aggregate(records: list[NoCRecord], thresholds: tuple[float, ...],
              max_clicks: int, backend_name: str = "backend") -> NoCReport:
    """Population mean/std of NoC per threshold plus failure counts."""
    if not records:
        raise EmptyInput("no records to aggregate")
    thresholds = tuple(sorted(thresholds))
    mean, std, failures = {}, {}, {}
    for t in thresholds:
        vals = np.array([r.noc_at[t] for r in records], dtype=np.float64)
        mean[t] = float(vals.mean())
        std[t] = float(vals.std())
        failures[t] = int(sum(r.failed_at[t] for r in records))
    return NoCReport(backend=backend_name, thresholds=thresholds,
                     max_clicks=max_clicks, sample_count=len(records),
                     noc_mean=mean, noc_std=std, failures=failures)


def dataset_pairs(dataset_dir: str | Path) -> list[tuple[str, Path, Path]]:
    """(id, image path, mask path) triples for `<id>.png` + `<id>_mask.png`."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise MalformedDataset(f"{root} is not a directory")
    pairs = []
    for img in sorted(root.glob("*.png")):
        if img.stem.endswith("_mask"):
            continue
        mask = root / f"{img.stem}_mask.png"
        if not mask.exists():
            raise MalformedDataset(f"missing mask for {img.name}")
        pairs.append((img.stem, img, mask))
    if not pairs:
        raise MalformedDataset(f"no image/mask pairs under {root}")
    return pairs


def evaluate_dataset(backend: Backend, dataset_dir: str | Path,
                     thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
                     max_clicks: int = DEFAULT_MAX_CLICKS,
                     binarize_threshold: float = 0.5
                     ) -> tuple[NoCReport, list[NoCRecord]]:
    """Run every image/mask pair, in sample-id order."""
    records = []
    for sid, img_path, mask_path in dataset_pairs(dataset_dir):
        image = load_gray(img_path)
        gt = load_mask(mask_path)
        records.append(run_sample(backend, image, gt, thresholds, max_clicks,
                                  binarize_threshold, sample_id=sid))
    report = aggregate(records, thresholds, max_clicks, backend.name)
    return report, records


def write_records_csv(path: str | Path, records: list[NoCRecord],
                      thresholds: tuple[float, ...]) -> None:
    thresholds = tuple(sorted(thresholds))
    cols = ["id"]
    cols += [f"noc@{int(round(t * 100))}" for t in thresholds]
    cols += [f"failed@{int(round(t * 100))}" for t in thresholds]
    cols.append("spc_ms")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in records:
            row = [r.sample_id]
            row += [r.noc_at[t] for t in thresholds]
            row += [int(r.failed_at[t]) for t in thresholds]
            row.append(f"{r.spc_ms:.3f}")
            writer.writerow(row)


def summary_table(report: NoCReport, records: list[NoCRecord]) -> str:
    """Tab-separated operator summary (stable format for scripting)."""
    spc = float(np.mean([r.spc_ms for r in records])) if records else 0.0
    lines = ["metric\tvalue"]
    for t in report.thresholds:
        pct = int(round(t * 100))
        lines.append(f"NoC@{pct}\t{report.noc_mean[t]:.2f} ({report.noc_std[t]:.2f})")
        lines.append(f">={report.max_clicks}@{pct}\t{report.failures[t]}"
                     f"/{report.sample_count}")
    lines.append(f"SPC_ms\t{spc:.1f}")
    return "\n".join(lines)
