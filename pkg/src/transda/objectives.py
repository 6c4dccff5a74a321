"""Segmentation, similarity and adversarial losses, plus dynamic pixel weights.

Probability maps are (B, K, H, W); domain / similarity maps are (B, C, h, w)
with values in (0, 1). Every log is taken of a value clamped at 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops, stop_gradient

CLAMP = 1e-12
IGNORE_INDEX = 255
ADV_VARIANTS = ("none", "bin", "wbin", "cls", "wcls")


def _safe_log(x: Tensor) -> Tensor:
    return ops.log(ops.clamp_min(x, CLAMP))


def _one_minus(x: Tensor) -> Tensor:
    return ops.sub(1.0, x)


@dataclass
class LossBundle:
    ce_source: Optional[Tensor] = None
    ce_target: Optional[Tensor] = None
    adv: Optional[Tensor] = None
    sim: Optional[Tensor] = None
    variant: str = "none"

    def as_floats(self) -> dict[str, Optional[float]]:
        return {k: (None if v is None else float(v.data))
                for k, v in (("ce_source", self.ce_source), ("ce_target", self.ce_target),
                             ("adv", self.adv), ("sim", self.sim))}


# -- segmentation --------------------------------------------------------------

def _ce_from_onehot(p: Tensor, onehot: np.ndarray, count: int) -> Tensor:
    picked = ops.sum(ops.mul(_safe_log(p), onehot))
    return ops.scalar_mul(picked, -1.0 / count)


def ce_source(p: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-probability of the true class over non-ignored pixels."""
    labels = np.asarray(labels)
    B, K, H, W = p.shape
    if labels.shape != (B, H, W):
        raise ShapeError("ce_source", p.shape, labels.shape)
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("ce_source: every pixel is ignore_index")
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= K):
        raise ValueError(f"ce_source: label ids outside [0, {K})")
    onehot = labels_to_onehot(labels, K, ignore_index).astype(p.dtype)
    return _ce_from_onehot(p, onehot, n)


def labels_to_onehot(labels: np.ndarray, K: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """(B, H, W) ids -> (B, K, H, W) one-hot; ignored pixels become all-zero."""
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    onehot = np.eye(K, dtype=np.float64)[safe] * valid[..., None]
    return onehot.transpose(0, 3, 1, 2)


def pseudo_label(p_hat: Tensor) -> Tensor:
    """One-hot argmax map; ties go to the lowest class index. Carries no gradient."""
    data = p_hat.data if isinstance(p_hat, Tensor) else np.asarray(p_hat)
    K = data.shape[1]
    idx = np.argmax(data, axis=1)
    onehot = np.eye(K, dtype=data.dtype)[idx].transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(onehot), dtype=data.dtype)


def ce_target(p: Tensor, y_hat: Tensor) -> Tensor:
    """Cross-entropy against a one-hot pseudo-label map, averaged over all pixels."""
    y = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat)
    if y.shape != p.shape:
        raise ShapeError("ce_target", p.shape, y.shape)
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("ce_target: pseudo labels must be one-hot per pixel")
    B, _, H, W = p.shape
    return _ce_from_onehot(p, y.astype(p.dtype), B * H * W)


def entropy_norm(p: Tensor) -> Tensor:
    """Per-pixel entropy over channels divided by log K: (B, K, H, W) -> (B, 1, H, W)."""
    p = as_tensor(p)
    K = p.shape[1]
    if K < 2:
        raise ValueError("entropy_norm needs at least 2 classes")
    ent = ops.sum(ops.mul(p, _safe_log(p)), axis=1, keepdims=True)
    return ops.scalar_mul(ent, -1.0 / math.log(K))


# -- similarity network ------------------------------------------------------------

def sim_loss(s_src: Tensor, s_tgt: Tensor) -> Tensor:
    """Source pixels pushed to 1, target pixels to 0."""
    return ops.sub(ops.scalar_mul(ops.mean(_safe_log(s_src)), -1.0),
                   ops.mean(_safe_log(_one_minus(s_tgt))))


def _minmax(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    span = hi - lo
    tol = 64 * np.finfo(raw.dtype).eps
    if span <= tol:
        return np.ones_like(raw)
    return (raw - lo) / span


def _pool_to(x: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    H, W = x.shape[-2:]
    h, w = hw
    if H == h and W == w:
        return x
    if H % h or W % w or H // h != W // w:
        raise ShapeError("pool_to", x.shape, hw)
    k = H // h
    return x.reshape(x.shape[:-2] + (h, k, w, k)).mean(axis=(-3, -1))


def dynamic_weights(p_src: Tensor, p_hat_tgt: Tensor, s_src: Tensor, s_tgt: Tensor):
    """Per-pixel adversarial weights for source and target.

    raw source weight = normalized entropy - similarity; raw target weight =
    similarity - normalized entropy. Each domain is then min-max scaled over
    the whole batch (constant maps become all ones). Returns two no-grad
    tensors shaped like the similarity maps.
    """
    hw = s_src.shape[-2:]
    if s_tgt.shape[-2:] != hw:
        raise ShapeError("dynamic_weights", s_src.shape, s_tgt.shape)
    e_src = _pool_to(entropy_norm(stop_gradient(as_tensor(p_src))).data, hw)
    e_tgt = _pool_to(entropy_norm(stop_gradient(as_tensor(p_hat_tgt))).data, hw)
    raw_s = e_src - s_src.data
    raw_t = s_tgt.data - e_tgt
    return Tensor(_minmax(raw_s), dtype=raw_s.dtype), Tensor(_minmax(raw_t), dtype=raw_t.dtype)


# -- adversarial losses --------------------------------------------------------------

def _check_weight(op: str, d: Tensor, w) -> np.ndarray:
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    if w.shape[0] != d.shape[0] or w.shape[-2:] != d.shape[-2:] or w.shape[1] != 1:
        raise ShapeError(op, d.shape, w.shape, detail="weight map resolution")
    return w.astype(d.dtype, copy=False)


def adv_bin(d_src: Tensor, d_tgt: Tensor) -> Tensor:
    return ops.sub(ops.scalar_mul(ops.mean(_safe_log(d_src)), -1.0),
                   ops.mean(_safe_log(_one_minus(d_tgt))))


def adv_wbin(d_src: Tensor, d_tgt: Tensor, w_src, w_tgt) -> Tensor:
    ws = _check_weight("adv_wbin", d_src, w_src)
    wt = _check_weight("adv_wbin", d_tgt, w_tgt)
    src = ops.mean(ops.mul(_safe_log(d_src), ws))
    tgt = ops.mean(ops.mul(_safe_log(_one_minus(d_tgt)), wt))
    return ops.sub(ops.scalar_mul(src, -1.0), tgt)


def _class_weights(op: str, p, d: Tensor) -> np.ndarray:
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    if p.shape[1] != d.shape[1]:
        raise ShapeError(op, p.shape, d.shape, detail="channel count")
    return _pool_to(p, d.shape[-2:]).astype(d.dtype, copy=False)


def _class_term(logd: Tensor, pk: np.ndarray, w: Optional[np.ndarray]) -> Tensor:
    per_pixel = ops.sum(ops.mul(logd, pk), axis=1, keepdims=True)
    if w is not None:
        per_pixel = ops.mul(per_pixel, w)
    return ops.mean(per_pixel)


def adv_cls(p_src, p_tgt, d_src: Tensor, d_tgt: Tensor) -> Tensor:
    ps = _class_weights("adv_cls", p_src, d_src)
    pt = _class_weights("adv_cls", p_tgt, d_tgt)
    return ops.sub(ops.scalar_mul(_class_term(_safe_log(d_src), ps, None), -1.0),
                   _class_term(_safe_log(_one_minus(d_tgt)), pt, None))


def adv_wcls(p_src, p_tgt, d_src: Tensor, d_tgt: Tensor, w_src, w_tgt) -> Tensor:
    ps = _class_weights("adv_wcls", p_src, d_src)
    pt = _class_weights("adv_wcls", p_tgt, d_tgt)
    ws = _check_weight("adv_wcls", d_src, w_src)
    wt = _check_weight("adv_wcls", d_tgt, w_tgt)
    return ops.sub(ops.scalar_mul(_class_term(_safe_log(d_src), ps, ws), -1.0),
                   _class_term(_safe_log(_one_minus(d_tgt)), pt, wt))


def discriminator_loss(variant: str, d_src: Tensor, d_tgt: Tensor, w_src=None, w_tgt=None,
                       p_src=None, p_tgt=None) -> Tensor:
    if variant == "bin":
        return adv_bin(d_src, d_tgt)
    if variant == "wbin":
        return adv_wbin(d_src, d_tgt, w_src, w_tgt)
    if variant == "cls":
        return adv_cls(p_src, p_tgt, d_src, d_tgt)
    if variant == "wcls":
        return adv_wcls(p_src, p_tgt, d_src, d_tgt, w_src, w_tgt)
    raise ValueError(f"unknown adversarial variant {variant!r}")


def generator_adv_loss(variant: str, d_src: Tensor, d_tgt: Optional[Tensor] = None,
                       w_src=None, w_tgt=None, p_src=None, p_tgt=None,
                       saturating: bool = False) -> Tensor:
    """Loss the feature extractor minimizes to fool a frozen discriminator.

    ``d_tgt`` is None when the target branch carries no gradient (momentum
    features), leaving only the source term. The default non-saturating form
    swaps the domain labels; ``saturating=True`` returns the negated
    discriminator loss over the same branches instead.
    """
    if variant not in ADV_VARIANTS[1:]:
        raise ValueError(f"unknown adversarial variant {variant!r}")
    weighted = variant in ("wbin", "wcls")
    cls = variant in ("cls", "wcls")
    ws = _check_weight("generator_adv_loss", d_src, w_src) if weighted else None
    ps = _class_weights("generator_adv_loss", p_src, d_src) if cls else None

    def term(d: Tensor, as_source: bool, w, pk) -> Tensor:
        logd = _safe_log(d) if as_source else _safe_log(_one_minus(d))
        if cls:
            return _class_term(logd, pk, w)
        return ops.mean(logd if w is None else ops.mul(logd, w))

    if saturating:
        total = term(d_src, True, ws, ps)
    else:
        total = ops.scalar_mul(term(d_src, False, ws, ps), -1.0)
    if d_tgt is not None:
        wt = _check_weight("generator_adv_loss", d_tgt, w_tgt) if weighted else None
        pt = _class_weights("generator_adv_loss", p_tgt, d_tgt) if cls else None
        if saturating:
            total = ops.add(total, term(d_tgt, False, wt, pt))
        else:
            total = ops.sub(total, term(d_tgt, True, wt, pt))
    return total


def adversarial_variant(mode: str, dynamic: bool) -> str:
    if mode == "none":
        return "none"
    base = "bin" if mode == "binary" else "cls"
    return ("w" + base) if dynamic else base
