"""Multi-crop view generation and the photometric/geometric augmentation policy.

Images are ``(height, width, channels)`` float arrays in ``[0, 1]`` with one or
three channels. Every random decision draws from an explicit
``numpy.random.Generator`` so a seed reproduces the output bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d
from skimage.color import hsv2rgb, rgb2hsv

from .errors import ConfigError, DataError, ParameterError

LUMA = (0.299, 0.587, 0.114)
MIN_EXTENT = 8


@dataclass(frozen=True)
class AugmentPolicy:
    """Augmentation switches, probabilities and ranges.

    None of these magnitudes are prescribed by the method; they follow common
    multi-crop practice, scaled to small images.
    """

    n_global: int = 2
    n_local: int = 5
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.5)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rot90_p: float = 0.5
    small_rot_p: float = 0.25
    small_rot_deg: float = 15.0

    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    # blur probability per role: first global, second global, locals
    blur_p: tuple[float, float, float] = (1.0, 0.1, 0.5)
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    solarize_view: int = 1  # index of the global view eligible for solarization

    def __post_init__(self):
        validate_policy(self)

    @classmethod
    def identity(cls, **overrides) -> "AugmentPolicy":
        """Policy with every stochastic transform switched off."""
        base = dict(
            hflip_p=0.0, vflip_p=0.0, rot90_p=0.0, small_rot_p=0.0, jitter_p=0.0,
            grayscale_p=0.0, blur_p=(0.0, 0.0, 0.0), solarize_p=0.0,
        )
        base.update(overrides)
        return cls(**base)


def validate_policy(p: AugmentPolicy) -> None:
    probs = {
        "hflip_p": p.hflip_p, "vflip_p": p.vflip_p, "rot90_p": p.rot90_p,
        "small_rot_p": p.small_rot_p, "jitter_p": p.jitter_p, "grayscale_p": p.grayscale_p,
        "solarize_p": p.solarize_p, "blur_p[0]": p.blur_p[0], "blur_p[1]": p.blur_p[1],
        "blur_p[2]": p.blur_p[2],
    }
    bad = [k for k, v in probs.items() if not 0.0 <= v <= 1.0]
    if bad:
        raise ConfigError(f"probabilities outside [0, 1]: {', '.join(bad)}")
    g_lo, g_hi = p.global_scale
    l_lo, l_hi = p.local_scale
    if not (0.5 <= g_lo <= g_hi <= 1.0):
        raise ConfigError(f"global_scale must lie within [0.5, 1.0], got {p.global_scale}")
    if not (0.0 < l_lo <= l_hi <= 0.5):
        raise ConfigError(f"local_scale must lie within (0, 0.5], got {p.local_scale}")
    if not (0 < p.ratio[0] <= p.ratio[1]):
        raise ConfigError(f"bad aspect ratio range {p.ratio}")
    if p.n_global < 1 or p.n_local < 0:
        raise ConfigError("need at least one global view")
    if p.global_size < 1 or p.local_size < 1:
        raise ConfigError("view resolutions must be positive")


@dataclass
class ViewSet:
    """Global and local crops of one image plus their source boxes.

    Boxes are ``(top, left, height, width)`` in source pixels.
    """

    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    global_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    local_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    source_shape: tuple[int, int] = (0, 0)

    @property
    def views(self) -> list[np.ndarray]:
        return self.global_views + self.local_views

    def area_fractions(self) -> tuple[list[float], list[float]]:
        total = self.source_shape[0] * self.source_shape[1]
        return (
            [b[2] * b[3] / total for b in self.global_boxes],
            [b[2] * b[3] / total for b in self.local_boxes],
        )


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if min(img.shape[:2]) < MIN_EXTENT:
        raise DataError(f"image extents {img.shape[:2]} below minimum {MIN_EXTENT}")
    if img.dtype.kind != "f":
        raise DataError(f"image must be floating point in [0, 1], got {img.dtype}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise DataError("image pixel values outside [0, 1]")
    return img


# -- resampling -------------------------------------------------------------

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates with edge clamping."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None].astype(img.dtype)
    wx = (xs - x0)[..., None].astype(img.dtype)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_resize(img: np.ndarray, box, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Resample the float box ``(top, left, h, w)`` onto an ``out_h x out_w`` grid."""
    out_w = out_h if out_w is None else out_w
    top, left, bh, bw = box
    ys = top + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear(img, yy, xx)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    h, w = img.shape[:2]
    return crop_resize(img, (0.0, 0.0, float(h), float(w)), out_h, out_w)


def center_view(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic view for inference: central square crop resized to ``size``."""
    img = check_image(image)
    h, w = img.shape[:2]
    side = min(h, w)
    box = ((h - side) / 2.0, (w - side) / 2.0, float(side), float(side))
    return crop_resize(img, box, size)


def sample_box(h: int, w: int, scale: tuple[float, float], ratio: tuple[float, float], rng):
    """Random box covering ``scale`` of the area, with aspect ratio clipped to fit."""
    frac = rng.uniform(*scale)
    area = frac * h * w
    lo, hi = math.log(ratio[0]), math.log(ratio[1])
    r = math.exp(rng.uniform(lo, hi))
    feasible_lo, feasible_hi = frac * w / h, w / (frac * h)
    r = min(max(r, feasible_lo), feasible_hi)
    bw = math.sqrt(area * r)
    bh = area / bw
    bw, bh = min(bw, float(w)), min(bh, float(h))
    top = rng.uniform(0.0, h - bh)
    left = rng.uniform(0.0, w - bw)
    return (top, left, bh, bw)


# -- individual transforms ---------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, edge pixels extended."""
    h, w = img.shape[:2]
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    src_y = c * yy - s * xx + cy
    src_x = s * yy + c * xx + cx
    return _bilinear(img, src_y, src_x)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img.copy()
    luma = img @ np.asarray(LUMA, dtype=img.dtype)
    return np.repeat(luma[:, :, None], 3, axis=2)


def color_jitter(img: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """Brightness, contrast, saturation (multiplicative) then hue shift."""
    out = img * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    out = np.clip(out, 0.0, 1.0)
    gray_mean = to_grayscale(out).mean()
    out = np.clip((out - gray_mean) * rng.uniform(1 - policy.contrast, 1 + policy.contrast) + gray_mean, 0.0, 1.0)
    if img.shape[2] == 3:
        gray = to_grayscale(out)
        sat = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        out = np.clip((out - gray) * sat + gray, 0.0, 1.0)
        shift = rng.uniform(-policy.hue, policy.hue)
        hsv = rgb2hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
        out = hsv2rgb(hsv).astype(img.dtype, copy=False)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ParameterError(f"blur sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ``ceil(3 sigma)``, symmetric reflect padding."""
    k = gaussian_kernel(sigma).astype(img.dtype)
    out = correlate1d(img, k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert every pixel strictly above ``threshold``."""
    return np.where(img > threshold, 1.0 - img, img).astype(img.dtype, copy=False)


# -- composition ---------------------------------------------------------------

def augment(view: np.ndarray, policy: AugmentPolicy, rng, role: str = "local") -> np.ndarray:
    """Apply the sampled transform chain to one view.

    ``role`` is ``"global0"``, ``"global1"``, ... or ``"local"``; it selects the
    blur probability and whether solarization is eligible.
    """
    img = check_image(view)
    if role.startswith("global"):
        idx = int(role[len("global"):] or 0)
        blur_p = policy.blur_p[0] if idx == 0 else policy.blur_p[1]
        solar_p = policy.solarize_p if idx == policy.solarize_view else 0.0
    else:
        blur_p, solar_p = policy.blur_p[2], 0.0

    out = img
    if rng.random() < policy.hflip_p:
        out = hflip(out)
    if rng.random() < policy.vflip_p:
        out = vflip(out)
    if rng.random() < policy.rot90_p:
        out = np.rot90(out, k=int(rng.integers(1, 4)), axes=(0, 1)).copy()
    if rng.random() < policy.small_rot_p:
        out = rotate(out, rng.uniform(-policy.small_rot_deg, policy.small_rot_deg))
    if rng.random() < policy.jitter_p:
        out = color_jitter(out, policy, rng)
    if rng.random() < policy.grayscale_p:
        out = to_grayscale(out)
    if rng.random() < blur_p:
        out = gaussian_blur(out, rng.uniform(*policy.blur_sigma))
    if rng.random() < solar_p:
        out = solarize(out, policy.solarize_threshold)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


def multi_crop(image: np.ndarray, policy: AugmentPolicy, rng) -> ViewSet:
    """Cut ``n_global`` large and ``n_local`` small crops and augment each."""
    img = check_image(image)
    h, w = img.shape[:2]
    smallest = math.sqrt(policy.local_scale[0] * h * w)
    if policy.n_local and smallest < 1.0:
        raise DataError(f"image {h}x{w} too small for local crops at scale {policy.local_scale[0]}")

    gviews, gboxes, lviews, lboxes = [], [], [], []
    for i in range(policy.n_global):
        box = sample_box(h, w, policy.global_scale, policy.ratio, rng)
        crop = crop_resize(img, box, policy.global_size)
        gviews.append(augment(crop, policy, rng, role=f"global{i}"))
        gboxes.append(box)
    for _ in range(policy.n_local):
        box = sample_box(h, w, policy.local_scale, policy.ratio, rng)
        crop = crop_resize(img, box, policy.local_size)
        lviews.append(augment(crop, policy, rng, role="local"))
        lboxes.append(box)
    return ViewSet(gviews, lviews, gboxes, lboxes, (h, w))


def with_sizes(policy: AugmentPolicy, global_size: int, local_size: int) -> AugmentPolicy:
    return replace(policy, global_size=global_size, local_size=local_size)
