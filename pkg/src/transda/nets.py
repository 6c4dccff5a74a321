"""Micro-scale segmentation networks.

Networks are plain functions of a ParameterStore and an input tensor; the
store is built by the matching ``init_*`` function.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import ParameterStore, ShapeError, Tensor, default_dtype
from .autodiff import ops


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "local_vit"  # local_vit | cnn
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.kind not in ("local_vit", "cnn"):
            raise ValueError(f"extractor kind must be local_vit or cnn, got {self.kind!r}")
        H, W = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.kind == "local_vit":
            gh, gw = self.grid
            if gh % self.window_size or gw % self.window_size:
                raise ValueError(f"token grid {self.grid} not divisible by window_size {self.window_size}")
            if self.embed_dim % self.heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def _dense(rng, fan_in: int, fan_out: int, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(default_dtype())


def _conv(rng, out_c: int, in_c: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (in_c * k * k))
    return (rng.standard_normal((out_c, in_c, k, k)) * std).astype(default_dtype())


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=default_dtype())


def _ones(*shape) -> np.ndarray:
    return np.ones(shape, dtype=default_dtype())


# -- feature extractor ----------------------------------------------------------

def init_extractor(cfg: ExtractorConfig, rng: np.random.Generator) -> ParameterStore:
    C, p = cfg.embed_dim, cfg.patch_size
    ps = ParameterStore("extractor")
    ps.add("patch.w", _conv(rng, C, 3, p))
    ps.add("patch.b", _zeros(C))
    ps.add("patch.norm.g", _ones(C))
    ps.add("patch.norm.b", _zeros(C))
    if cfg.kind == "local_vit":
        ws = cfg.window_size
        hidden = C * cfg.mlp_ratio
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            ps.add(pre + "norm1.g", _ones(C))
            ps.add(pre + "norm1.b", _zeros(C))
            for name in ("q", "k", "v", "proj"):
                ps.add(pre + f"attn.{name}.w", _dense(rng, C, C))
                ps.add(pre + f"attn.{name}.b", _zeros(C))
            ps.add(pre + "attn.rel_bias", _zeros((2 * ws - 1) ** 2, cfg.heads))
            ps.add(pre + "norm2.g", _ones(C))
            ps.add(pre + "norm2.b", _zeros(C))
            ps.add(pre + "mlp.fc1.w", _dense(rng, C, hidden))
            ps.add(pre + "mlp.fc1.b", _zeros(hidden))
            ps.add(pre + "mlp.fc2.w", _dense(rng, hidden, C))
            ps.add(pre + "mlp.fc2.b", _zeros(C))
    else:
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            ps.add(pre + "norm.g", _ones(C))
            ps.add(pre + "norm.b", _zeros(C))
            ps.add(pre + "conv.w", _conv(rng, C, C, 3))
            ps.add(pre + "conv.b", _zeros(C))
            ps.add(pre + "pw1.w", _dense(rng, C, 2 * C, math.sqrt(2.0 / C)))
            ps.add(pre + "pw1.b", _zeros(2 * C))
            ps.add(pre + "pw2.w", _dense(rng, 2 * C, C, 0.02))
            ps.add(pre + "pw2.b", _zeros(C))
    ps.add("norm.g", _ones(C))
    ps.add("norm.b", _zeros(C))
    return ps


def _ln(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    return ops.layernorm(x) * params[prefix + ".g"] + params[prefix + ".b"]


def _linear(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    return ops.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


@functools.lru_cache(maxsize=8)
def relative_position_index(ws: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (ws - 1)
    return (rel[0] * (2 * ws - 1) + rel[1]).astype(np.int64)


@functools.lru_cache(maxsize=8)
def shifted_window_mask(H: int, W: int, ws: int, shift: int) -> np.ndarray:
    """(nW, N, N) additive mask keeping attention inside each rolled region."""
    region = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            region[hs, wsl] = cnt
            cnt += 1
    win = region.reshape(H // ws, ws, W // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, -100.0, 0.0)


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll a (B, H, W, C) token grid by -shift on both spatial axes."""
    return ops.roll(x, (-shift, -shift), (1, 2))


def cyclic_unshift(x: Tensor, shift: int) -> Tensor:
    return ops.roll(x, (shift, shift), (1, 2))


def window_attention(x: Tensor, params: ParameterStore, prefix: str, cfg: ExtractorConfig,
                     shift: int) -> Tensor:
    B, H, W, C = x.shape
    ws, h = cfg.window_size, cfg.heads
    d = C // h
    N = ws * ws
    if shift:
        x = cyclic_shift(x, shift)
    win = ops.window_partition(x, ws)
    nwin = win.shape[0]

    def heads_first(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (nwin, N, h, d)), (0, 2, 1, 3))

    q = heads_first(_linear(win, params, prefix + ".q"))
    k = heads_first(_linear(win, params, prefix + ".k"))
    v = heads_first(_linear(win, params, prefix + ".v"))
    attn = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    bias = ops.take(params[prefix + ".rel_bias"], relative_position_index(ws).reshape(-1))
    attn = attn + ops.transpose(ops.reshape(bias, (N, N, h)), (2, 0, 1))
    if shift:
        mask = shifted_window_mask(H, W, ws, shift).astype(x.dtype)
        nw = mask.shape[0]
        attn = ops.reshape(attn, (B, nw, h, N, N)) + mask[None, :, None]
        attn = ops.reshape(attn, (nwin, h, N, N))
    attn = ops.softmax(attn, axis=-1)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (nwin, N, C))
    out = _linear(out, params, prefix + ".proj")
    out = ops.window_merge(out, ws, H, W)
    if shift:
        out = cyclic_unshift(out, shift)
    return out


def extractor_forward(params: ParameterStore, images, cfg: ExtractorConfig) -> Tensor:
    """(B, 3, H, W) images -> (B, embed_dim, H/p, W/p) features."""
    if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != cfg.image_size:
        raise ShapeError("extractor_forward", images.shape, (None, 3) + cfg.image_size)
    x = ops.conv2d(images, params["patch.w"], params["patch.b"], stride=cfg.patch_size)
    x = ops.transpose(x, (0, 2, 3, 1))  # tokens: B, H', W', C
    x = _ln(x, params, "patch.norm")
    if cfg.kind == "local_vit":
        half = cfg.window_size // 2
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            shift = half if i % 2 else 0
            x = x + window_attention(_ln(x, params, pre + "norm1"), params, pre + "attn", cfg, shift)
            hdn = ops.gelu(_linear(_ln(x, params, pre + "norm2"), params, pre + "mlp.fc1"))
            x = x + _linear(hdn, params, pre + "mlp.fc2")
    else:
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            y = _ln(x, params, pre + "norm")
            y = ops.conv2d(ops.transpose(y, (0, 3, 1, 2)), params[pre + "conv.w"], params[pre + "conv.b"],
                           padding=1)
            y = ops.relu(ops.transpose(y, (0, 2, 3, 1)))
            y = ops.relu(_linear(y, params, pre + "pw1"))
            x = x + _linear(y, params, pre + "pw2")
    x = _ln(x, params, "norm")
    return ops.transpose(x, (0, 3, 1, 2))


# -- classifier head ------------------------------------------------------------

def init_classifier(cfg: ExtractorConfig, num_classes: int, rng: np.random.Generator) -> ParameterStore:
    ps = ParameterStore("classifier")
    ps.add("proj.w", _dense(rng, cfg.embed_dim, num_classes))
    ps.add("proj.b", _zeros(num_classes))
    return ps


def classifier_logits(params: ParameterStore, feat: Tensor) -> Tensor:
    w = params["proj.w"]
    if feat.ndim != 4 or feat.shape[1] != w.shape[0]:
        raise ShapeError("classifier_forward", feat.shape, w.shape)
    x = ops.transpose(feat, (0, 2, 3, 1))
    x = ops.matmul(x, w) + params["proj.b"]
    return ops.transpose(x, (0, 3, 1, 2))


def classifier_forward(params: ParameterStore, feat: Tensor, cfg: ExtractorConfig) -> Tensor:
    """Per-pixel class probabilities (B, K, H, W) at image resolution."""
    logits = ops.upsample_bilinear(classifier_logits(params, feat), cfg.patch_size)
    return ops.softmax(logits, axis=1)


# -- discriminator / similarity network ------------------------------------------

def init_conv_head(kind: str, in_channels: int, out_channels: int, rng: np.random.Generator,
                   hidden: int = 64) -> ParameterStore:
    """Three 3x3 conv layers: in -> hidden -> hidden -> out."""
    ps = ParameterStore(kind)
    dims = [in_channels, hidden, hidden, out_channels]
    for i in range(3):
        ps.add(f"conv{i}.w", _conv(rng, dims[i + 1], dims[i], 3))
        ps.add(f"conv{i}.b", _zeros(dims[i + 1]))
    return ps


def init_discriminator(in_channels: int, num_classes: int, mode: str, rng: np.random.Generator,
                       hidden: int = 64) -> ParameterStore:
    if mode not in ("binary", "class"):
        raise ValueError(f"discriminator mode must be binary or class, got {mode!r}")
    out = 1 if mode == "binary" else num_classes
    return init_conv_head("discriminator", in_channels, out, rng, hidden)


def init_similarity(in_channels: int, rng: np.random.Generator, hidden: int = 64) -> ParameterStore:
    return init_conv_head("similarity", in_channels, 1, rng, hidden)


def conv_head_forward(params: ParameterStore, feat: Tensor, slope: float = 0.2) -> Tensor:
    w0 = params["conv0.w"]
    if feat.ndim != 4 or feat.shape[1] != w0.shape[1]:
        raise ShapeError(f"{params.kind}_forward", feat.shape, w0.shape)
    x = feat
    for i in range(3):
        x = ops.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        if i < 2:
            x = ops.leaky_relu(x, slope)
    return ops.sigmoid(x)


def discriminator_forward(params: ParameterStore, feat: Tensor, mode: str = "binary",
                          num_classes: int | None = None) -> Tensor:
    """(B, 1, h, w) domain map in binary mode, (B, K, h, w) per-class maps otherwise."""
    out_c = params["conv2.w"].shape[0]
    if mode == "binary" and out_c != 1:
        raise ShapeError("discriminator_forward", (out_c,), (1,), detail="binary mode needs 1 channel")
    if mode == "class" and num_classes is not None and out_c != num_classes:
        raise ShapeError("discriminator_forward", (out_c,), (num_classes,), detail="class mode channel count")
    return conv_head_forward(params, feat)


def similarity_forward(params: ParameterStore, feat: Tensor) -> Tensor:
    return conv_head_forward(params, feat)
