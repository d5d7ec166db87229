"""Input-side blocks: per-window instance normalization and patch tokenization.

Normalization captures each window's mean/variance so model outputs can be
mapped back to the original scale; patching slices a window into (possibly
overlapping) fixed-length segments used as tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, InvalidInput

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class InstanceStats:
    """Per-window statistics captured at normalization time."""

    mean: float
    std: float  # population standard deviation, before eps
    eps: float

    @property
    def std_eff(self) -> float:
        """The divisor actually used: sqrt(var + eps)."""
        return float(np.sqrt(self.std**2 + self.eps))


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int
    stride: int

    def __post_init__(self):
        if self.patch_len < 1 or self.stride < 1:
            raise InvalidInput("patch_len and stride must be positive")

    def n_patches(self, length: int) -> int:
        if length < self.patch_len:
            raise InsufficientData(
                f"window length {length} shorter than patch length {self.patch_len}"
            )
        return (length - self.patch_len) // self.stride + 1


def revin_normalize(x, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, InstanceStats]:
    """Standardize one window by its own mean and variance.

    Returns (x - mean) / sqrt(var + eps) along with the stats needed to
    invert the transform.  Constant windows map to all-zeros.
    """
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < 1:
        raise InvalidInput("window must contain at least one value")
    if eps < 0:
        raise InvalidInput("eps must be nonnegative")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("window contains non-finite values")
    mean = float(v.mean())
    var = float(v.var())
    stats = InstanceStats(mean=mean, std=float(np.sqrt(var)), eps=eps)
    denom = stats.std_eff
    if denom == 0.0:
        # constant window with eps=0: define the normalized window as zeros
        return np.zeros_like(v), stats
    return (v - mean) / denom, stats


def revin_denormalize(y, stats: InstanceStats) -> np.ndarray:
    """Invert revin_normalize: y * sqrt(var + eps) + mean."""
    out = np.asarray(y, dtype=np.float64)
    return out * stats.std_eff + stats.mean


def patchify(x, cfg: PatchConfig) -> np.ndarray:
    """Slice a window into (n_patches, patch_len) tokens.

    Patch i covers x[i*stride : i*stride + patch_len]; any trailing
    remainder shorter than a full patch is dropped.
    """
    v = np.asarray(x, dtype=np.float64).ravel()
    n = cfg.n_patches(v.size)
    idx = np.arange(n)[:, None] * cfg.stride + np.arange(cfg.patch_len)[None, :]
    return v[idx]


def normalize_windows(windows: np.ndarray, eps: float = DEFAULT_EPS):
    """Vectorized revin_normalize over rows of a (batch, length) array.

    Returns (normalized, means, std_effs) with per-row statistics.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 2:
        raise InvalidInput("normalize_windows expects a (batch, length) array")
    means = w.mean(axis=1)
    stds = np.sqrt(w.var(axis=1) + eps)
    safe = np.where(stds == 0.0, 1.0, stds)
    out = (w - means[:, None]) / safe[:, None]
    out[stds == 0.0] = 0.0
    return out, means, stds


def patchify_windows(windows: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Vectorized patchify over rows: (batch, L) -> (batch, n_patches, P)."""
    w = np.asarray(windows, dtype=np.float64)
    n = cfg.n_patches(w.shape[1])
    idx = np.arange(n)[:, None] * cfg.stride + np.arange(cfg.patch_len)[None, :]
    return w[:, idx]
