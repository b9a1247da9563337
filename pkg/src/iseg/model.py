"""Click-conditioned segmentation network.

Two patch-embedding projections (image and click map) fused by
element-wise addition feed a hierarchical windowed-attention encoder;
an MLP decoder aggregates the stage features into one logit channel
that is bilinearly upsampled to input resolution and squashed to a
probability map.

Inference (`forward`) is read-only on the weights, so one weight set
can serve concurrent sessions; training owns its weights exclusively.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch, DivisibilityViolation

MASKED_SCORE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the 64x64 desk-scale setup."""

    in_channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (2, 4)
    window_size: int = 4
    mlp_ratio: int = 4
    decoder_dim: int = 64
    input_h: int = 64
    input_w: int = 64
    click_radius: int = 5

    def __post_init__(self):
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have equal length")
        for name in ("in_channels", "patch_size", "embed_dim", "window_size",
                     "mlp_ratio", "decoder_dim", "input_h", "input_w"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for s, d in enumerate(self.depths):
            if d <= 0:
                raise ValueError("stage depths must be positive")
            if self.stage_dim(s) % self.heads[s] != 0:
                raise ValueError(f"stage {s} dim not divisible by heads")
        self.check_input_dims(self.input_h, self.input_w)

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    @property
    def dim_quantum(self) -> int:
        return self.patch_size * (2 ** (self.n_stages - 1)) * self.window_size

    def check_input_dims(self, h: int, w: int) -> None:
        q = self.dim_quantum
        if h % q != 0 or w % q != 0:
            raise DivisibilityViolation(
                f"input {h}x{w} must be a multiple of {q} "
                f"(patch {self.patch_size} * 2^{self.n_stages - 1} "
                f"* window {self.window_size})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["depths"] = tuple(d["depths"])
        d["heads"] = tuple(d["heads"])
        return cls(**d)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape map implied by a config."""
    p, c = config.patch_size, config.in_channels
    d0 = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.image.weight": (p * p * c, d0),
        "embed.image.bias": (d0,),
        "embed.clicks.weight": (p * p * 2, d0),
        "embed.clicks.bias": (d0,),
    }
    for s in range(config.n_stages):
        d = config.stage_dim(s)
        for b in range(config.depths[s]):
            pre = f"stage{s}.block{b}."
            shapes[pre + "norm1.gamma"] = (d,)
            shapes[pre + "norm1.beta"] = (d,)
            shapes[pre + "attn.qkv.weight"] = (d, 3 * d)
            # no key bias: softmax row-shift invariance makes it a dead weight
            shapes[pre + "attn.qkv.q_bias"] = (d,)
            shapes[pre + "attn.qkv.v_bias"] = (d,)
            shapes[pre + "attn.proj.weight"] = (d, d)
            shapes[pre + "attn.proj.bias"] = (d,)
            shapes[pre + "norm2.gamma"] = (d,)
            shapes[pre + "norm2.beta"] = (d,)
            shapes[pre + "mlp.fc1.weight"] = (d, config.mlp_ratio * d)
            shapes[pre + "mlp.fc1.bias"] = (config.mlp_ratio * d,)
            shapes[pre + "mlp.fc2.weight"] = (config.mlp_ratio * d, d)
            shapes[pre + "mlp.fc2.bias"] = (d,)
        if s + 1 < config.n_stages:
            shapes[f"merge{s}.weight"] = (4 * d, 2 * d)
            shapes[f"merge{s}.bias"] = (2 * d,)
    dd = config.decoder_dim
    for s in range(config.n_stages):
        shapes[f"decoder.proj{s}.weight"] = (config.stage_dim(s), dd)
        shapes[f"decoder.proj{s}.bias"] = (dd,)
    shapes["decoder.fuse.weight"] = (config.n_stages * dd, dd)
    shapes["decoder.fuse.bias"] = (dd,)
    shapes["decoder.head.weight"] = (dd, 1)
    shapes["decoder.head.bias"] = (1,)
    return shapes


def _trunc_normal(shape: tuple[int, ...], std: float,
                  rng: np.random.Generator) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded init: truncated normal (std 0.02) projections, zero biases."""
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for name, shape in sorted(expected_shapes(config).items()):
        if name.endswith(("bias", "beta")):
            data = np.zeros(shape)
        elif name.endswith("gamma"):
            data = np.ones(shape)
        else:
            data = _trunc_normal(shape, 0.02, rng)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


def validate_weights(weights: dict[str, Tensor], config: ModelConfig) -> None:
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in weights:
            raise DimMismatch(f"missing weight {name}")
        if tuple(weights[name].data.shape) != shape:
            raise DimMismatch(
                f"weight {name} has shape {weights[name].data.shape}, "
                f"expected {shape}")


def replicate_gray(image: np.ndarray, channels: int) -> np.ndarray:
    """Stack a gray (H, W) image into (H, W, C)."""
    if image.ndim == 3:
        if image.shape[2] != channels:
            raise DimMismatch(f"image has {image.shape[2]} channels, "
                              f"expected {channels}")
        return np.asarray(image, dtype=np.float64)
    return np.repeat(np.asarray(image, dtype=np.float64)[:, :, None],
                     channels, axis=2)


def _patchify(arr: np.ndarray, p: int) -> np.ndarray:
    h, w, c = arr.shape
    if h % p != 0 or w % p != 0:
        raise DivisibilityViolation(f"{h}x{w} not divisible by patch {p}")
    x = arr.reshape(h // p, p, w // p, p, c)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(
        h // p, w // p, p * p * c)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(..., in) @ (in, out) + bias, via a flattening reshape."""
    lead = x.data.shape[:-1]
    flat = ad.reshape(x, (-1, x.data.shape[-1]))
    out = ad.add_bias(ad.matmul(flat, weight), bias)
    return ad.reshape(out, lead + (weight.data.shape[1],))


def patch_embed_image(image: np.ndarray, weights: dict[str, Tensor],
                      config: ModelConfig) -> Tensor:
    """Project non-overlapping image patches into the token grid."""
    arr = replicate_gray(image, config.in_channels)
    patches = Tensor(_patchify(arr, config.patch_size))
    return _linear(patches, weights["embed.image.weight"],
                   weights["embed.image.bias"])


def patch_embed_clicks(clickmap: np.ndarray, weights: dict[str, Tensor],
                       config: ModelConfig) -> Tensor:
    """Project the 2-channel click map into a token grid of the same shape."""
    arr = np.asarray(clickmap, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimMismatch(f"click map must be (H, W, 2), got {arr.shape}")
    patches = Tensor(_patchify(arr, config.patch_size))
    return _linear(patches, weights["embed.clicks.weight"],
                   weights["embed.clicks.bias"])


def fuse(img_tokens: Tensor, click_tokens: Tensor) -> Tensor:
    """Merge the two token grids by element-wise addition."""
    return ad.add(img_tokens, click_tokens)


@lru_cache(maxsize=32)
def _shift_mask(h: int, w: int, ws: int, shift: int) -> np.ndarray:
    """Additive (nW, T, T) attention mask for a cyclically shifted partition."""
    regions = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    row_bounds = [(0, h - ws), (h - ws, h - shift), (h - shift, h)]
    col_bounds = [(0, w - ws), (w - ws, w - shift), (w - shift, w)]
    for r0, r1 in row_bounds:
        for c0, c1 in col_bounds:
            if r1 > r0 and c1 > c0:
                regions[r0:r1, c0:c1] = cnt
            cnt += 1
    win = regions.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3)
    win = win.reshape(-1, ws * ws)
    mask = np.where(win[:, :, None] == win[:, None, :], 0.0, MASKED_SCORE)
    mask.setflags(write=False)
    return mask


def _partition(tokens: Tensor, ws: int) -> Tensor:
    h, w, d = tokens.data.shape
    x = ad.reshape(tokens, (h // ws, ws, w // ws, ws, d))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, ((h // ws) * (w // ws), ws * ws, d))


def _unpartition(windows: Tensor, h: int, w: int, ws: int) -> Tensor:
    d = windows.data.shape[-1]
    x = ad.reshape(windows, (h // ws, w // ws, ws, ws, d))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (h, w, d))


def window_attention(tokens: Tensor, window_size: int, heads: int,
                     weights: dict[str, Tensor], shift: int = 0,
                     return_attn: bool = False):
    """Multi-head self-attention within (optionally shifted) windows.

    A cyclic shift re-partitions the grid; attention across the wrapped
    seam is masked out. When one window covers the whole grid the shift
    is a no-op (every token already attends to every other).
    """
    h, w, d = tokens.data.shape
    ws = window_size
    if h % ws != 0 or w % ws != 0:
        raise DivisibilityViolation(f"grid {h}x{w} not divisible by window {ws}")
    if not 0 <= shift < ws:
        raise ValueError(f"shift must be in [0, {ws})")
    if d % heads != 0:
        raise DimMismatch(f"dim {d} not divisible by {heads} heads")
    if h <= ws and w <= ws:
        shift = 0

    x = tokens
    if shift:
        x = ad.roll(x, (-shift, -shift), (0, 1))
    win = _partition(x, ws)                       # (nW, T, d)
    n_win, t = win.data.shape[0], ws * ws

    bias = ad.concat([weights["q_bias"], Tensor(np.zeros(d)),
                      weights["v_bias"]], axis=0)
    qkv = _linear(win, weights["qkv_weight"], bias)
    q, k, v = ad.split_lastdim(qkv, 3)
    head_dim = d // heads

    def to_heads(z: Tensor) -> Tensor:
        z = ad.reshape(z, (n_win, t, heads, head_dim))
        return ad.transpose(z, (0, 2, 1, 3))      # (nW, heads, T, hd)

    q, k, v = to_heads(q), to_heads(k), to_heads(v)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    1.0 / math.sqrt(head_dim))
    if shift:
        mask = _shift_mask(h, w, ws, shift)
        scores = ad.add(scores, Tensor(np.broadcast_to(
            mask[:, None, :, :], scores.data.shape).copy()))
    attn = ad.softmax_lastdim(scores)
    out = ad.matmul(attn, v)
    out = ad.transpose(out, (0, 2, 1, 3))
    out = ad.reshape(out, (n_win, t, d))
    out = _linear(out, weights["proj_weight"], weights["proj_bias"])
    out = _unpartition(out, h, w, ws)
    if shift:
        out = ad.roll(out, (shift, shift), (0, 1))
    if return_attn:
        return out, attn
    return out


def _block(tokens: Tensor, weights: dict[str, Tensor], prefix: str,
           heads: int, window_size: int, shift: int) -> Tensor:
    attn_w = {
        "qkv_weight": weights[prefix + "attn.qkv.weight"],
        "q_bias": weights[prefix + "attn.qkv.q_bias"],
        "v_bias": weights[prefix + "attn.qkv.v_bias"],
        "proj_weight": weights[prefix + "attn.proj.weight"],
        "proj_bias": weights[prefix + "attn.proj.bias"],
    }
    x = ad.layer_norm(tokens, weights[prefix + "norm1.gamma"],
                      weights[prefix + "norm1.beta"])
    x = window_attention(x, window_size, heads, attn_w, shift)
    tokens = ad.add(tokens, x)
    y = ad.layer_norm(tokens, weights[prefix + "norm2.gamma"],
                      weights[prefix + "norm2.beta"])
    y = _linear(y, weights[prefix + "mlp.fc1.weight"],
                weights[prefix + "mlp.fc1.bias"])
    y = ad.gelu(y)
    y = _linear(y, weights[prefix + "mlp.fc2.weight"],
                weights[prefix + "mlp.fc2.bias"])
    return ad.add(tokens, y)


def patch_merging(tokens: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate 2x2 token neighborhoods and project 4d -> 2d channels."""
    h, w, d = tokens.data.shape
    if h % 2 != 0 or w % 2 != 0:
        raise DivisibilityViolation(f"grid {h}x{w} not even for merging")
    x = ad.reshape(tokens, (h // 2, 2, w // 2, 2, d))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    x = ad.reshape(x, (h // 2, w // 2, 4 * d))
    return _linear(x, weight, bias)


def encoder_forward(tokens: Tensor, weights: dict[str, Tensor],
                    config: ModelConfig) -> list[Tensor]:
    """Run the stages; returns each stage's output token grid."""
    features: list[Tensor] = []
    x = tokens
    for s in range(config.n_stages):
        for b in range(config.depths[s]):
            shift = 0 if b % 2 == 0 else config.window_size // 2
            x = _block(x, weights, f"stage{s}.block{b}.", config.heads[s],
                       config.window_size, shift)
        features.append(x)
        if s + 1 < config.n_stages:
            x = patch_merging(x, weights[f"merge{s}.weight"],
                              weights[f"merge{s}.bias"])
    return features


def mlp_decoder(features: list[Tensor], weights: dict[str, Tensor],
                config: ModelConfig) -> Tensor:
    """Project stage features to a shared width, resize to the stage-1 grid,
    concatenate, fuse and emit a single logit channel."""
    h1, w1 = features[0].data.shape[:2]
    resized = []
    for s, feat in enumerate(features):
        z = _linear(feat, weights[f"decoder.proj{s}.weight"],
                    weights[f"decoder.proj{s}.bias"])
        if z.data.shape[:2] != (h1, w1):
            z = ad.upsample2d(z, h1, w1)
        resized.append(z)
    x = concat_lastdim(resized)
    x = _linear(x, weights["decoder.fuse.weight"], weights["decoder.fuse.bias"])
    x = ad.gelu(x)
    x = _linear(x, weights["decoder.head.weight"], weights["decoder.head.bias"])
    return ad.reshape(x, (h1, w1))


def concat_lastdim(parts: list[Tensor]) -> Tensor:
    return ad.concat(parts, axis=-1)


def upsample_bilinear(logits: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners-false bilinear upsampling to the target resolution."""
    return ad.upsample2d(logits, out_h, out_w)


def forward_tensor(image: np.ndarray, clickmap: np.ndarray,
                   weights: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Full differentiable pass: probability map tensor at input resolution."""
    h, w = np.asarray(image).shape[:2]
    config.check_input_dims(h, w)
    img_tokens = patch_embed_image(image, weights, config)
    click_tokens = patch_embed_clicks(clickmap, weights, config)
    tokens = fuse(img_tokens, click_tokens)
    features = encoder_forward(tokens, weights, config)
    logits = mlp_decoder(features, weights, config)
    logits = upsample_bilinear(logits, h, w)
    return ad.sigmoid(logits)


def forward(image: np.ndarray, clickmap: np.ndarray,
            weights: dict[str, Tensor], config: ModelConfig) -> np.ndarray:
    """Inference pass: probability map as a plain array, no graph kept."""
    with ad.no_grad():
        return forward_tensor(image, clickmap, weights, config).data


def encoder_features(image: np.ndarray, weights: dict[str, Tensor],
                     config: ModelConfig) -> np.ndarray:
    """Deepest-stage features of the image-only path (no click fusion)."""
    with ad.no_grad():
        tokens = patch_embed_image(image, weights, config)
        features = encoder_forward(tokens, weights, config)
        return features[-1].data
