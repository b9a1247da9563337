"""Seeded synthetic data: blob images for training/eval and drifting-blob
volumes for propagation experiments.

Every generator is a pure function of its seed, so datasets regenerate
bit-identically anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import save_gray, save_mask

Seed = int | tuple[int, ...]

NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class SynthSample:
    """One gray image in [0,1] with a nonempty binary target mask."""

    image: np.ndarray
    gt: np.ndarray

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _blob_mask(height: int, width: int, cy: float, cx: float, ay: float,
               ax: float, theta: float, squareness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    n = squareness
    body = np.abs(u / ax) ** n + np.abs(v / ay) ** n
    return (body <= 1.0).astype(np.uint8)


def _sample_blob(rng: np.random.Generator, height: int, width: int,
                 lo: float, hi: float) -> np.ndarray:
    s = min(height, width)
    cy = rng.uniform(0.32, 0.68) * height
    cx = rng.uniform(0.32, 0.68) * width
    ay = rng.uniform(lo, hi) * s
    ax = rng.uniform(lo, hi) * s
    theta = rng.uniform(0.0, np.pi)
    squareness = 2.0 if rng.random() < 0.5 else 4.0  # ellipse or rounded box
    return _blob_mask(height, width, cy, cx, ay, ax, theta, squareness)


def gen_synthetic(seed: Seed, height: int, width: int) -> SynthSample:
    """One target blob on a flat background, 0-3 disjoint distractor blobs,
    additive Gaussian noise. Target foreground stays within [2%, 50%]."""
    if height < 32 or width < 32:
        raise ValueError("synthetic samples need dims >= 32")
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.25, 0.45)

    gt = _sample_blob(rng, height, width, 0.10, 0.28)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    target_offset = sign * rng.uniform(0.20, 0.40)

    image = np.full((height, width), background)
    image += target_offset * gt

    taken = gt.astype(bool)
    n_distract = int(rng.integers(0, 4))
    placed = 0
    tries = 0
    while placed < n_distract and tries < 20:
        tries += 1
        blob = _sample_blob(rng, height, width, 0.06, 0.16)
        # keep a 2px moat so distractors never touch the target
        grown = np.zeros_like(blob, dtype=bool)
        ys, xs = np.nonzero(blob)
        for dy in (-2, 0, 2):
            for dx in (-2, 0, 2):
                yy = np.clip(ys + dy, 0, height - 1)
                xx = np.clip(xs + dx, 0, width - 1)
                grown[yy, xx] = True
        if (grown & taken).any():
            continue
        d_sign = 1.0 if rng.random() < 0.5 else -1.0
        image += d_sign * rng.uniform(0.20, 0.40) * blob
        taken |= blob.astype(bool)
        placed += 1

    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return SynthSample(image=np.clip(image, 0.0, 1.0), gt=gt)


class _Walker:
    """Blob whose geometry random-walks slice to slice."""

    def __init__(self, rng, height, width, lo, hi, y_range=(0.40, 0.60),
                 x_range=(0.40, 0.60)):
        s = min(height, width)
        self.h, self.w, self.s = height, width, s
        self.lo, self.hi = lo, hi
        self.cy = rng.uniform(*y_range) * height
        self.cx = rng.uniform(*x_range) * width
        self.ay = rng.uniform(lo, hi) * s
        self.ax = rng.uniform(lo, hi) * s
        self.theta = rng.uniform(0.0, np.pi)
        self.squareness = 2.0 if rng.random() < 0.5 else 4.0

    def mask(self):
        return _blob_mask(self.h, self.w, self.cy, self.cx, self.ay,
                          self.ax, self.theta, self.squareness)

    clip_lo = 0.25
    clip_hi = 0.75

    def step(self, rng, pos_sigma=0.012, axis_sigma=0.025, rot_sigma=0.03):
        self.cy = float(np.clip(self.cy + rng.normal(0, pos_sigma) * self.h,
                                self.clip_lo * self.h, self.clip_hi * self.h))
        self.cx = float(np.clip(self.cx + rng.normal(0, pos_sigma) * self.w,
                                self.clip_lo * self.w, self.clip_hi * self.w))
        self.ay = float(np.clip(self.ay * (1 + rng.normal(0, axis_sigma)),
                                0.9 * self.lo * self.s, 1.1 * self.hi * self.s))
        self.ax = float(np.clip(self.ax * (1 + rng.normal(0, axis_sigma)),
                                0.9 * self.lo * self.s, 1.1 * self.hi * self.s))
        self.theta += rng.normal(0, rot_sigma)


def gen_synthetic_volume(seed: Seed, depth: int, height: int, width: int
                         ) -> tuple[np.ndarray, np.ndarray]:
    """A stack of slices: one target blob plus a confounder of nearly the
    same brightness, both drifting, with the target's contrast following
    a random walk.

    Near a given slice the target and confounder are separable by their
    small brightness gap; as the target's contrast drifts across slices
    the gap flips, so appearance-based matching degrades with distance.
    Returns (volume, gt) with shapes (D, H, W); gt covers the target only.
    """
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.22, 0.30)

    target = _Walker(rng, height, width, 0.17, 0.25,
                     y_range=(0.30, 0.44), x_range=(0.30, 0.44))
    target.clip_lo, target.clip_hi = 0.24, 0.48
    confounder = _Walker(rng, height, width, 0.12, 0.16,
                         y_range=(0.73, 0.79), x_range=(0.73, 0.79))
    offset = rng.uniform(0.27, 0.34)
    # target contrast decays toward the confounder's appearance, crossing
    # it 10-13 slices out: matches are reliable near a slice, ambiguous
    # far from it; all intensities stay inside [0, 1] (clipping would
    # erase the contrast that carries the appearance signal)
    slope = rng.uniform(0.009, 0.012)
    conf_gap = slope * rng.uniform(10.0, 13.0)  # confounder sits dimmer

    volume = np.empty((depth, height, width))
    gt = np.empty((depth, height, width), dtype=np.uint8)
    for d in range(depth):
        t_mask = target.mask()
        c_mask = confounder.mask().astype(bool) & (t_mask == 0)
        img = background + offset * t_mask + (offset - conf_gap) * c_mask
        img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
        volume[d] = np.clip(img, 0.0, 1.0)
        gt[d] = t_mask
        target.step(rng)  # the confounder stays put: its appearance, not
        # its geometry, is the hazard
        offset = float(np.clip(offset - slope + rng.normal(0.0, 0.004),
                               0.11, 0.40))
    return volume, gt


def spread_seeds(depth: int, count: int) -> list[int]:
    """Evenly spaced interior seed indices, e.g. D=32: 1 -> [16],
    3 -> [8, 16, 24], 5 -> [5, 10, 16, 21, 26]."""
    return [(i * depth) // (count + 1) for i in range(1, count + 1)]


def write_synth_dataset(out_dir: str | Path, count: int, size: int,
                        seed: int) -> list[str]:
    """Write `count` image/mask PNG pairs in the eval dataset layout.

    Files are `<id>.png` and `<id>_mask.png` with zero-padded ids;
    content depends only on (seed, index).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        sample = gen_synthetic((seed, i), size, size)
        sid = f"{i:05d}"
        save_gray(out / f"{sid}.png", sample.image)
        save_mask(out / f"{sid}_mask.png", sample.gt)
        ids.append(sid)
    return ids
