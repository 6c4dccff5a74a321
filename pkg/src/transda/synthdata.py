"""Seeded sim2real scenes: clean rendered shapes (source) vs corrupted copies (target).

Each sample owns a ``SeedSequence([seed, index])``; the scene layout and the
corruption draw from separate child streams, so a target sample with zero
corruption is bit-identical to the source sample of the same seed and index.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .objectives import IGNORE_INDEX

SHAPES = ("circle", "rectangle", "triangle", "stripe", "ellipse", "diamond")
SOURCE_PRIVATE_SHAPE = "cross"
TARGET_PRIVATE_SHAPE = "ring"
MAGIC = b"TDAD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainShift:
    noise_sigma: float = 0.06
    hue_shift: float = 0.12  # fraction of a full hue turn
    brightness_shift: float = -0.12
    blur_radius: int = 1
    illumination: float = 0.3

    def is_identity(self) -> bool:
        return (self.noise_sigma == 0 and self.hue_shift == 0 and self.brightness_shift == 0
                and self.blur_radius == 0 and self.illumination == 0)


@dataclass(frozen=True)
class DomainSpec:
    num_common: int = 5
    include_source_private: bool = False
    include_target_private: bool = False
    image_size: tuple[int, int] = (64, 64)
    min_objects: int = 2
    max_objects: int = 5
    shift: DomainShift = field(default_factory=DomainShift)

    def __post_init__(self):
        if self.num_common < 2:
            raise ValueError("need at least 2 common classes (background + one object)")
        if self.num_common - 1 > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES) + 1} common classes supported")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if isinstance(self.shift, dict):
            object.__setattr__(self, "shift", DomainShift(**self.shift))

    @property
    def source_private_id(self) -> Optional[int]:
        return self.num_common if self.include_source_private else None

    @property
    def target_private_id(self) -> Optional[int]:
        if not self.include_target_private:
            return None
        return self.num_common + int(self.include_source_private)

    @property
    def num_total(self) -> int:
        return self.num_common + int(self.include_source_private) + int(self.include_target_private)

    def class_names(self) -> list[str]:
        names = ["background"] + list(SHAPES[: self.num_common - 1])
        if self.include_source_private:
            names.append(SOURCE_PRIVATE_SHAPE)
        if self.include_target_private:
            names.append(TARGET_PRIVATE_SHAPE)
        return names

    def valid_ids(self, domain: str) -> set[int]:
        ids = set(range(self.num_common)) | {IGNORE_INDEX}
        if domain == "source" and self.source_private_id is not None:
            ids.add(self.source_private_id)
        if domain == "target" and self.target_private_id is not None:
            ids.add(self.target_private_id)
        return ids


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    domain: str
    sample_seed: int


# -- colour helpers ----------------------------------------------------------------

_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def rotate_hue(image: np.ndarray, turns: float) -> np.ndarray:
    """Rotate chroma in YIQ space by ``turns`` of a full circle."""
    if turns == 0:
        return image
    a = 2 * np.pi * turns
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.einsum("ij,jhw->ihw", m, image)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    import colorsys
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


# class hue anchors; objects are recognisable by colour and by shape
_CLASS_HUES = {
    "circle": 0.0, "rectangle": 0.33, "triangle": 0.62, "stripe": 0.14,
    "ellipse": 0.8, "diamond": 0.48, "cross": 0.9, "ring": 0.05,
}


# -- shape rasterisation ---------------------------------------------------------------

def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
                size: float, angle: float, aspect: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "rectangle":
        return (np.abs(dx) <= size * aspect) & (np.abs(dy) <= size / aspect)
    if shape == "ellipse":
        return (u / (size * 1.3)) ** 2 + (v / (size * 0.6)) ** 2 <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= size * 1.1
    if shape == "stripe":
        return (np.abs(u) <= size * 2.0) & (np.abs(v) <= max(1.5, size * 0.25))
    if shape == "triangle":
        pts = [(size * np.cos(angle + k * 2 * np.pi / 3), size * np.sin(angle + k * 2 * np.pi / 3))
               for k in range(3)]
        inside = np.ones_like(dx, dtype=bool)
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
            inside &= (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0
        return inside
    if shape == "cross":
        arm = max(1.5, size * 0.3)
        return ((np.abs(u) <= size) & (np.abs(v) <= arm)) | ((np.abs(v) <= size) & (np.abs(u) <= arm))
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= size * size) & (r2 >= (0.55 * size) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _render_scene(spec: DomainSpec, domain: str, rng: np.random.Generator):
    H, W = spec.image_size
    scale = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    # background: smooth two-colour gradient
    c0 = _hsv_to_rgb(rng.uniform(0.2, 0.6), rng.uniform(0.05, 0.25), rng.uniform(0.35, 0.6))
    c1 = _hsv_to_rgb(rng.uniform(0.2, 0.6), rng.uniform(0.05, 0.25), rng.uniform(0.35, 0.6))
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / W + np.sin(theta) * yy / H)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    image = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    mask = np.zeros((H, W), dtype=np.uint8)
    occupied = np.zeros((H, W), dtype=bool)

    classes = list(range(1, spec.num_common))
    names = {k: SHAPES[k - 1] for k in classes}
    if domain == "source" and spec.source_private_id is not None:
        classes.append(spec.source_private_id)
        names[spec.source_private_id] = SOURCE_PRIVATE_SHAPE
    if domain == "target" and spec.target_private_id is not None:
        classes.append(spec.target_private_id)
        names[spec.target_private_id] = TARGET_PRIVATE_SHAPE

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        cls = int(rng.choice(classes))
        shape = names[cls]
        for _attempt in range(20):
            size = rng.uniform(5.0, 11.0) * scale
            cy, cx = rng.uniform(size, H - size), rng.uniform(size, W - size)
            m = _shape_mask(shape, yy, xx, cy, cx, size, rng.uniform(0, 2 * np.pi), rng.uniform(0.6, 1.6))
            if m.any() and not (m & occupied).any():
                break
        else:
            continue  # bounded retries exhausted: emit fewer objects
        hue = _CLASS_HUES[shape] + rng.uniform(-0.04, 0.04)
        color = _hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.65, 0.95))
        shade = 1.0 + 0.08 * ((yy - cy) / max(size, 1.0))
        obj = color[:, None, None] * np.clip(shade, 0.8, 1.2)
        image = np.where(m[None], obj, image)
        mask[m] = cls
        occupied |= m
    return np.clip(image, 0.0, 1.0), mask


def apply_shift(image: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Illumination ramp, hue/brightness shift, box blur, pixel noise (in that order)."""
    if shift.is_identity():
        return image
    _, H, W = image.shape
    out = image
    if shift.illumination:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:H, 0:W]
        ramp = np.cos(theta) * (2 * xx / max(W - 1, 1) - 1) + np.sin(theta) * (2 * yy / max(H - 1, 1) - 1)
        out = out * (1.0 + shift.illumination * 0.5 * ramp)[None]
    if shift.hue_shift:
        out = rotate_hue(out, shift.hue_shift)
    if shift.brightness_shift:
        out = out + shift.brightness_shift
    if shift.blur_radius:
        size = 2 * int(shift.blur_radius) + 1
        out = ndimage.uniform_filter(out, size=(1, size, size), mode="nearest")
    if shift.noise_sigma:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_sample(spec: DomainSpec, domain: str, seed: int, index: int) -> SceneSample:
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be source or target, got {domain!r}")
    scene_ss, shift_ss = np.random.SeedSequence([int(seed), int(index)]).spawn(2)
    image, mask = _render_scene(spec, domain, np.random.default_rng(scene_ss))
    if domain == "target":
        image = apply_shift(image, spec.shift, np.random.default_rng(shift_ss))
    sample_seed = int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])
    return SceneSample(image.astype(np.float32), mask, domain, sample_seed)


def generate(spec: DomainSpec, domain: str, n: int, seed: int, workers: int = 1) -> list[SceneSample]:
    """``n`` samples; order and content independent of ``workers``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if workers <= 1:
        return [make_sample(spec, domain, seed, i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: make_sample(spec, domain, seed, i), range(n)))


# -- augmentation -----------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05


def _resample(arr: np.ndarray, out_hw: tuple[int, int], order: int) -> np.ndarray:
    """Resize the last two axes; pixel centers map by (i + .5) * in / out - .5."""
    H, W = arr.shape[-2:]
    h2, w2 = out_hw
    ys = (np.arange(h2) + 0.5) * H / h2 - 0.5
    xs = (np.arange(w2) + 0.5) * W / w2 - 0.5
    if order == 0:
        yi = np.clip(np.floor(ys + 0.5).astype(int), 0, H - 1)
        xi = np.clip(np.floor(xs + 0.5).astype(int), 0, W - 1)
        return arr[..., yi[:, None], xi[None, :]]
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def apply_geometry(image: np.ndarray, mask: np.ndarray, flip: bool, scale: float,
                   offset: tuple[int, int] = (0, 0), image_order: int = 1):
    """Flip, rescale, then crop (scale > 1) or zero-pad (scale < 1) back to (H, W).

    ``offset`` is the crop origin in the scaled frame, or the paste origin in
    the output frame when padding. Padded mask pixels get the ignore index.
    """
    H, W = mask.shape
    if flip:
        image = image[..., ::-1]
        mask = mask[..., ::-1]
    h2, w2 = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    if (h2, w2) != (H, W):
        image = _resample(image, (h2, w2), image_order)
        mask = _resample(mask, (h2, w2), 0)
    out_img = np.zeros(image.shape[:-2] + (H, W), dtype=image.dtype)
    out_mask = np.full((H, W), IGNORE_INDEX, dtype=mask.dtype)
    oy, ox = offset
    if h2 >= H:
        src_y, dst_y, ny = oy, 0, H
    else:
        src_y, dst_y, ny = 0, oy, h2
    if w2 >= W:
        src_x, dst_x, nx = ox, 0, W
    else:
        src_x, dst_x, nx = 0, ox, w2
    out_img[..., dst_y:dst_y + ny, dst_x:dst_x + nx] = image[..., src_y:src_y + ny, src_x:src_x + nx]
    out_mask[dst_y:dst_y + ny, dst_x:dst_x + nx] = mask[src_y:src_y + ny, src_x:src_x + nx]
    return out_img, out_mask


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float,
                 hue: float) -> np.ndarray:
    """Multiplicative brightness/contrast/saturation factors and a hue rotation."""
    gray_w = np.array([0.299, 0.587, 0.114])[:, None, None]
    out = image * brightness
    mean = (out * gray_w).sum(axis=0).mean()
    out = (out - mean) * contrast + mean
    gray = (out * gray_w).sum(axis=0, keepdims=True)
    out = gray + (out - gray) * saturation
    out = rotate_hue(out, hue)
    return np.clip(out, 0.0, 1.0)


def augment(sample: SceneSample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> SceneSample:
    H, W = sample.mask.shape
    flip = bool(rng.random() < cfg.flip_prob)
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    h2, w2 = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    oy = int(rng.integers(0, abs(h2 - H) + 1))
    ox = int(rng.integers(0, abs(w2 - W) + 1))
    image, mask = apply_geometry(sample.image, sample.mask, flip, scale, (oy, ox))
    if cfg.jitter:
        image = color_jitter(image,
                             rng.uniform(1 - cfg.brightness, 1 + cfg.brightness),
                             rng.uniform(1 - cfg.contrast, 1 + cfg.contrast),
                             rng.uniform(1 - cfg.saturation, 1 + cfg.saturation),
                             rng.uniform(-cfg.hue, cfg.hue))
    return replace(sample, image=np.ascontiguousarray(image, dtype=np.float32),
                   mask=np.ascontiguousarray(mask))


# -- dataset files -----------------------------------------------------------------------

def export_dataset(samples: list[SceneSample], path, num_total: int) -> Path:
    """Header (magic, version, n, H, W, K_total as u32 LE) + f32 images + u8 masks."""
    path = Path(path)
    n = len(samples)
    H, W = samples[0].mask.shape
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, n, H, W, num_total))
        imgs = np.stack([s.image for s in samples]).astype("<f4")
        masks = np.stack([s.mask for s in samples]).astype(np.uint8)
        fh.write(imgs.tobytes())
        fh.write(masks.tobytes())
    return path


def import_dataset(path, domain: str = "source") -> tuple[list[SceneSample], int]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic {raw[:4]!r})")
    if len(raw) < 24:
        raise ValueError(f"{path}: truncated header")
    version, n, H, W, k_total = struct.unpack("<5I", raw[4:24])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    img_bytes = n * 3 * H * W * 4
    expected = 24 + img_bytes + n * H * W
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    imgs = np.frombuffer(raw, dtype="<f4", count=n * 3 * H * W, offset=24).reshape(n, 3, H, W)
    masks = np.frombuffer(raw, dtype=np.uint8, offset=24 + img_bytes).reshape(n, H, W)
    samples = [SceneSample(imgs[i].astype(np.float32), masks[i].copy(), domain, i) for i in range(n)]
    return samples, k_total
