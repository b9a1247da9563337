"""Loss, optimizer, augmentation and the click-supervised training loop.

Training is fully deterministic given (rng_seed, config): every random
draw comes from a generator seeded by (rng_seed, purpose, epoch, index)
tuples, which also makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch, IsegError
from .masks import Click, binarize, encode_clicks, load_gray, load_mask, \
    perturb_click, simulate_next_click
from .model import ModelConfig, forward, forward_tensor, init_weights, \
    validate_weights
from .serialization import load_weights, save_weights
from .synthetic import SynthSample, gen_synthetic

PROB_CLAMP = 1e-7


class TrainingDiverged(IsegError):
    """Loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters (desk-scale defaults; full-scale runs use
    epochs 55 / batch 32 / crops 320x480)."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 5e-4
    gamma: float = 2.0
    crop_h: int = 64
    crop_w: int = 64
    max_sim_clicks: int = 3
    perturb_offset: int = 3
    rng_seed: int = 0
    train_samples: int = 500
    val_samples: int = 16
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "crop_h", "crop_w",
                     "max_sim_clicks", "train_samples"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def nfl(probs: Tensor, gt: np.ndarray, gamma: float) -> Tensor:
    """Normalized focal loss over true-class probabilities.

    With p_i the probability of the correct class at pixel i and
    w_i = (1 - p_i)^gamma, the loss is -(sum w_i log p_i) / (sum w_i).
    gamma = 0 reduces to mean binary cross-entropy.
    """
    g = np.asarray(gt, dtype=np.float64)
    if probs.data.shape != g.shape:
        raise DimMismatch(f"probs {probs.data.shape} vs gt {g.shape}")
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g_t = Tensor(g)
    g_inv = Tensor(1.0 - g)
    p_true = ad.add(ad.mul(p, g_t), ad.mul(ad.sub(1.0, p), g_inv))
    w = ad.power(ad.sub(1.0, p_true), gamma)
    num = ad.sum_all(ad.mul(w, ad.log(p_true)))
    den = ad.sum_all(w)
    return ad.neg(ad.div(num, den))


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grad_scale: float = 1.0) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = np.zeros_like(p.data) if p.grad is None else p.grad * grad_scale
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, Tensor], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].data.copy()
            self.v[name] = tensors[f"adam.v.{name}"].data.copy()


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: Adam, grad_scale: float = 1.0) -> None:
    """Apply one Adam update from explicit gradients (sets .grad, steps)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.data.shape:
            raise DimMismatch(f"grad shape {g.shape} vs param {p.data.shape}")
        p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step(grad_scale)


def hflip_sample(sample: SynthSample) -> SynthSample:
    return SynthSample(image=sample.image[:, ::-1].copy(),
                       gt=sample.gt[:, ::-1].copy())


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.clip(np.round((np.arange(out_h) + 0.5) * (h / out_h) - 0.5), 0,
                   h - 1).astype(int)
    cols = np.clip(np.round((np.arange(out_w) + 0.5) * (w / out_w) - 0.5), 0,
                   w - 1).astype(int)
    return arr[np.ix_(rows, cols)]


def augment(sample: SynthSample, crop_h: int, crop_w: int,
            rng: np.random.Generator,
            scale_range: tuple[float, float] = (0.75, 1.4),
            hflip: bool = True) -> SynthSample:
    """Random flip, scale and crop; the crop is resampled (max 10 tries)
    until it contains target pixels, then falls back to a centered crop."""
    if hflip and rng.random() < 0.5:
        sample = hflip_sample(sample)

    lo = max(scale_range[0], crop_h / sample.height, crop_w / sample.width)
    hi = max(scale_range[1], lo)
    scale = rng.uniform(lo, hi)
    new_h = max(crop_h, int(round(sample.height * scale)))
    new_w = max(crop_w, int(round(sample.width * scale)))
    if (new_h, new_w) != (sample.height, sample.width):
        image = ad.bilinear_resize(sample.image, new_h, new_w)
        gt = nearest_resize(sample.gt, new_h, new_w)
    else:
        image, gt = sample.image, sample.gt

    for _ in range(10):
        top = int(rng.integers(0, new_h - crop_h + 1))
        left = int(rng.integers(0, new_w - crop_w + 1))
        gt_crop = gt[top:top + crop_h, left:left + crop_w]
        if gt_crop.any():
            return SynthSample(
                image=np.ascontiguousarray(image[top:top + crop_h,
                                                 left:left + crop_w]),
                gt=np.ascontiguousarray(gt_crop))

    ys, xs = np.nonzero(gt)
    cy = int(ys.mean()) if ys.size else new_h // 2
    cx = int(xs.mean()) if xs.size else new_w // 2
    top = int(np.clip(cy - crop_h // 2, 0, new_h - crop_h))
    left = int(np.clip(cx - crop_w // 2, 0, new_w - crop_w))
    return SynthSample(
        image=np.ascontiguousarray(image[top:top + crop_h,
                                         left:left + crop_w]),
        gt=np.ascontiguousarray(gt[top:top + crop_h, left:left + crop_w]))


def _simulate_training_clicks(sample: SynthSample, weights: dict[str, Tensor],
                              config: TrainConfig,
                              rng: np.random.Generator) -> list[Click]:
    """Draw k ~ U{1..max} clicks against the evolving prediction, jittered."""
    h, w = sample.gt.shape
    k = int(rng.integers(1, config.max_sim_clicks + 1))
    clicks: list[Click] = []
    pred = np.zeros_like(sample.gt)
    for i in range(k):
        if (pred == sample.gt).all():
            break
        click = simulate_next_click(pred, sample.gt, ordinal=i)
        click = perturb_click(click, config.perturb_offset, h, w, rng)
        clicks.append(click)
        if i + 1 < k:
            clickmap = encode_clicks(clicks, h, w, config.model.click_radius)
            prob = forward(sample.image, clickmap, weights, config.model)
            pred = binarize(prob)
    return clicks


def train_step(weights: dict[str, Tensor], batch: list[SynthSample],
               config: TrainConfig, adam: Adam,
               rng: np.random.Generator) -> float:
    """One optimizer step over a batch; returns the mean sample loss."""
    ad.zero_grads(weights.values())
    losses = []
    for sample in batch:
        clicks = _simulate_training_clicks(sample, weights, config, rng)
        clickmap = encode_clicks(clicks, sample.height, sample.width,
                                 config.model.click_radius)
        probs = forward_tensor(sample.image, clickmap, weights, config.model)
        loss = nfl(probs, sample.gt, config.gamma)
        ad.backward(loss)
        losses.append(float(loss.data))
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        raise TrainingDiverged(f"non-finite loss {mean_loss}")
    adam.step(grad_scale=1.0 / len(batch))
    return mean_loss


def val_iou_1click(weights: dict[str, Tensor], config: TrainConfig,
                   samples: list[SynthSample]) -> float:
    """Mean IoU after a single deterministic click on held-out samples."""
    from .masks import iou

    scores = []
    for sample in samples:
        click = simulate_next_click(np.zeros_like(sample.gt), sample.gt)
        clickmap = encode_clicks([click], sample.height, sample.width,
                                 config.model.click_radius)
        prob = forward(sample.image, clickmap, weights, config.model)
        scores.append(iou(binarize(prob), sample.gt))
    return float(np.mean(scores)) if scores else 0.0


def _load_data_dir(data_dir: Path) -> list[SynthSample]:
    samples = []
    for img_path in sorted(data_dir.glob("*.png")):
        if img_path.stem.endswith("_mask"):
            continue
        mask_path = data_dir / f"{img_path.stem}_mask.png"
        if not mask_path.exists():
            continue
        samples.append(SynthSample(image=load_gray(img_path),
                                   gt=load_mask(mask_path)))
    if not samples:
        raise IsegError(f"no image/mask pairs under {data_dir}")
    return samples


def _base_sample(i: int, config: TrainConfig,
                 pool: list[SynthSample] | None) -> SynthSample:
    if pool is not None:
        return pool[i % len(pool)]
    gen_h = max(32, (config.crop_h * 3) // 2)
    gen_w = max(32, (config.crop_w * 3) // 2)
    return gen_synthetic((config.rng_seed, 101, i), gen_h, gen_w)


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    val_iou_1click: float | None = None


def write_log_csv(path: str | Path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "step", "loss", "val_iou_1click"])
        for r in rows:
            val = "" if r.val_iou_1click is None else f"{r.val_iou_1click:.6f}"
            writer.writerow([r.epoch, r.step, f"{r.loss:.8f}", val])


def val_pool(config: TrainConfig) -> list[SynthSample]:
    gen_h = max(32, config.crop_h)
    gen_w = max(32, config.crop_w)
    out = []
    for j in range(config.val_samples):
        sample = gen_synthetic((config.rng_seed, 202, j), gen_h, gen_w)
        if (gen_h, gen_w) != (config.crop_h, config.crop_w):
            sample = augment(sample, config.crop_h, config.crop_w,
                             np.random.default_rng((config.rng_seed, 203, j)),
                             scale_range=(1.0, 1.0), hflip=False)
        out.append(sample)
    return out


def train_loop(config: TrainConfig, data_dir: str | Path | None = None,
               checkpoint_path: str | Path | None = None,
               resume_from: str | Path | None = None,
               progress: bool = False
               ) -> tuple[dict[str, Tensor], list[LogRow]]:
    """Full training run; returns final weights and the loss/val log.

    A rolling checkpoint (weights + Adam state + epoch) is written after
    each epoch when checkpoint_path is given; resume_from restarts a run
    mid-way with a bit-identical trajectory.
    """
    pool = _load_data_dir(Path(data_dir)) if data_dir else None
    weights = init_weights(config.model, seed=config.rng_seed)
    adam = Adam(weights, lr=config.learning_rate)
    start_epoch = 0

    if resume_from is not None:
        tensors, meta = load_weights(resume_from)
        start_epoch = int(meta["epoch"])
        for name in weights:
            weights[name].data = tensors[name].data.copy()
        adam.load_state(tensors, int(meta["adam_t"]))

    vals = val_pool(config)
    rows: list[LogRow] = []
    n = config.train_samples
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng((config.rng_seed, 303, epoch)).permutation(n)
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idxs = order[lo:lo + config.batch_size]
            aug_rng = np.random.default_rng((config.rng_seed, 404, epoch, step))
            batch = [augment(_base_sample(int(i), config, pool),
                             config.crop_h, config.crop_w, aug_rng)
                     for i in idxs]
            click_rng = np.random.default_rng((config.rng_seed, 505, epoch, step))
            loss = train_step(weights, batch, config, adam, click_rng)
            rows.append(LogRow(epoch=epoch, step=step, loss=loss))
        val = val_iou_1click(weights, config, vals)
        rows.append(LogRow(epoch=epoch, step=-1,
                           loss=rows[-1].loss if rows else 0.0,
                           val_iou_1click=val))
        if progress:
            print(f"epoch {epoch}: loss {rows[-1].loss:.4f} "
                  f"val_iou@1click {val:.4f}", flush=True)
        if checkpoint_path is not None:
            tensors: dict = dict(weights)
            tensors.update(adam.state_tensors())
            save_weights(checkpoint_path, tensors, meta={
                "model_config": config.model.to_dict(),
                "train_config": config.to_dict(),
                "epoch": epoch + 1,
                "adam_t": adam.t,
            })
    return weights, rows


def save_model_weights(path: str | Path, weights: dict[str, Tensor],
                       config: ModelConfig) -> Path:
    return save_weights(path, weights, meta={"model_config": config.to_dict()})


def load_model_weights(path: str | Path,
                       requires_grad: bool = False
                       ) -> tuple[dict[str, Tensor], ModelConfig]:
    tensors, meta = load_weights(path, requires_grad=requires_grad)
    if "model_config" not in meta:
        raise IsegError(f"{path} has no embedded model config")
    config = ModelConfig.from_dict(meta["model_config"])
    model_tensors = {k: v for k, v in tensors.items()
                     if not k.startswith("adam.")}
    validate_weights(model_tensors, config)
    return model_tensors, config
