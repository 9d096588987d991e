"""Training-time view masking and deterministic test-time corruption.

Test-time corruption is a pure function of (sample, sample id): the id is
hashed with 64-bit FNV-1a and the hash seeds the generator that picks the
victim camera, the corruption mode (zero image or Gaussian blur with sigma
drawn from [3, 10]), and the blur strength. Dummy views are never corrupted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError

BLUR_KERNEL_SIZE = 11
BLUR_SIGMA_RANGE = (3.0, 10.0)
TRAIN_MASK_PROB = 0.25

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_U64 = 1 << 64


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) % _U64
    return h


@dataclass
class CorruptionSpec:
    mode: str  # none | zero | blur
    camera_index: int = -1
    blur_sigma: float = 0.0
    seed_source: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "zero", "blur"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")
        if self.mode == "blur" and not (BLUR_SIGMA_RANGE[0] <= self.blur_sigma <= BLUR_SIGMA_RANGE[1]):
            raise ConfigError(f"blur sigma {self.blur_sigma} outside {BLUR_SIGMA_RANGE}")


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ConfigError(f"kernel size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    k = np.exp(-np.arange(-r, r + 1, dtype=np.float64) ** 2 / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, kernel_size: int = BLUR_KERNEL_SIZE,
                  sigma: float = 5.0) -> np.ndarray:
    """Separable 2-D Gaussian with reflect padding; kernel is sum-normalized."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigError(f"expected a single-channel [H, W] image, got shape {img.shape}")
    k = gaussian_kernel(kernel_size, sigma)
    r = kernel_size // 2
    padded = np.ascontiguousarray(np.pad(img, ((0, 0), (r, r)), mode="reflect"))
    out = np.empty_like(img)
    kernels.blur_axis(padded, k, out)
    padded = np.ascontiguousarray(np.pad(out.T, ((0, 0), (r, r)), mode="reflect"))
    out2 = np.empty(img.T.shape)
    kernels.blur_axis(padded, k, out2)
    return np.ascontiguousarray(out2.T)


def _apply(images: list[np.ndarray], spec: CorruptionSpec) -> list[np.ndarray]:
    out = [img.copy() for img in images]
    if spec.mode == "zero":
        out[spec.camera_index] = np.zeros_like(out[spec.camera_index])
    elif spec.mode == "blur":
        out[spec.camera_index] = gaussian_blur(out[spec.camera_index],
                                               BLUR_KERNEL_SIZE, spec.blur_sigma)
    return out


def mask_views_train(images: list[np.ndarray], is_real: list[bool], p_m: float,
                     rng: np.random.Generator):
    """With probability p_m corrupt one real view (zero or blur, equal odds)."""
    real = [i for i, r in enumerate(is_real) if r]
    if rng.random() >= p_m or not real:
        return [img.copy() for img in images], CorruptionSpec("none")
    cam = int(real[rng.integers(0, len(real))])
    if rng.random() < 0.5:
        spec = CorruptionSpec("zero", camera_index=cam)
    else:
        sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
        spec = CorruptionSpec("blur", camera_index=cam, blur_sigma=sigma)
    return _apply(images, spec), spec


def corrupt_test(images: list[np.ndarray], is_real: list[bool], sample_id: str):
    """Deterministic per-sample corruption; only with >= 2 real views."""
    seed = fnv1a64(sample_id)
    real = [i for i, r in enumerate(is_real) if r]
    if len(real) < 2:
        return [img.copy() for img in images], CorruptionSpec("none", seed_source=seed)
    rng = np.random.default_rng(seed)
    cam = int(real[rng.integers(0, len(real))])
    if rng.random() < 0.5:
        spec = CorruptionSpec("zero", camera_index=cam, seed_source=seed)
    else:
        sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
        spec = CorruptionSpec("blur", camera_index=cam, blur_sigma=sigma, seed_source=seed)
    return _apply(images, spec), spec
