"""Gray normalization and classical stain-normalization baselines.

Includes Reinhard color transfer in the l-alpha-beta space, Macenko
stain-vector estimation and normalization, and per-channel histogram
specification.  Every function maps ``(d, d, 3)`` float tiles in [0, 1] to
tiles of the same shape and range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import check_color_tile

LUMA = np.array([0.299, 0.587, 0.114])

# Macenko defaults
OD_THRESHOLD = 0.15
ANGLE_PERCENTILE = 1.0
OD_FLOOR = 1e-6
MIN_TISSUE_FRACTION = 0.01

REINHARD_EPS = 1e-6


class InsufficientTissueError(ValueError):
    """Too few pixels above the optical-density threshold to estimate stains."""


def to_gray(tile: np.ndarray) -> np.ndarray:
    """Luma ``0.299 R + 0.587 G + 0.114 B``; works on ``(..., 3)`` arrays."""
    tile = np.asarray(tile, dtype=np.float64)
    if tile.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis, got shape {tile.shape}")
    r, g, b = tile[..., 0], tile[..., 1], tile[..., 2]
    # coefficients sum to 1, so anchor on green: equal channels come back bit-exact
    gray = g + LUMA[0] * (r - g) + LUMA[2] * (b - g)
    return np.clip(gray, 0.0, 1.0)


# --------------------------------------------------------------------------- #
# Reinhard
# --------------------------------------------------------------------------- #

_RGB2LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64
)
_LAB2LOG = np.linalg.inv(_LOG2LAB)
_LMS_FLOOR = 1e-6


def rgb_to_lab(pixels: np.ndarray) -> np.ndarray:
    """Ruderman l-alpha-beta coordinates of RGB pixels ``(..., 3)``."""
    lms = np.asarray(pixels, dtype=np.float64) @ _RGB2LMS.T
    return np.log10(np.maximum(lms, _LMS_FLOOR)) @ _LOG2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    return (10.0 ** (np.asarray(lab) @ _LAB2LOG.T)) @ _LMS2RGB.T


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64).reshape(3))
        if np.any(~(self.std > 0)):
            raise ValueError("channel std must be positive")

    def to_json(self) -> dict:
        return {"kind": "reinhard", "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelStats":
        return cls(obj["mean"], obj["std"])


def channel_stats(tiles: np.ndarray) -> ChannelStats:
    """l-alpha-beta mean/std pooled over every pixel of one tile or a stack."""
    lab = rgb_to_lab(np.asarray(tiles).reshape(-1, 3))
    return ChannelStats(lab.mean(axis=0), np.maximum(lab.std(axis=0), REINHARD_EPS))


def reinhard_normalize(src: np.ndarray, target: ChannelStats, clip: bool = True) -> np.ndarray:
    """Match the l-alpha-beta mean/std of ``src`` to ``target``.

    ``clip=False`` returns the pre-clipping result, which may leave [0, 1].
    """
    src = check_color_tile(src)
    lab = rgb_to_lab(src.reshape(-1, 3))
    mean = lab.mean(axis=0)
    std = np.maximum(lab.std(axis=0), REINHARD_EPS)
    out = lab_to_rgb((lab - mean) / std * target.std + target.mean).reshape(src.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


# --------------------------------------------------------------------------- #
# Macenko
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class StainMatrix:
    """Unit optical-density stain vectors (columns, hematoxylin first) and
    99th-percentile reference concentrations.  ``background`` is the
    transmitted-light intensity used to convert pixels to optical density."""

    vectors: np.ndarray
    max_concentrations: np.ndarray
    background: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != (3, 2):
            raise ValueError(f"stain vectors must be 3x2, got {v.shape}")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "max_concentrations", np.asarray(self.max_concentrations, dtype=np.float64).reshape(2))

    def to_json(self) -> dict:
        return {
            "kind": "macenko",
            "vectors": self.vectors.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
            "background": float(self.background),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StainMatrix":
        return cls(obj["vectors"], obj["max_concentrations"], obj.get("background", 1.0))


def optical_density(pixels: np.ndarray, background: float = 1.0) -> np.ndarray:
    return -np.log((np.asarray(pixels, dtype=np.float64) + OD_FLOOR) / background)


def nnls_two_stains(vectors: np.ndarray, od: np.ndarray) -> np.ndarray:
    """Exact per-pixel nonnegative least squares for a 3x2 stain matrix.

    ``od`` is ``(n, 3)``; returns concentrations ``(n, 2)``.  With two
    unknowns the constrained optimum is either the unconstrained solution or
    the best of the two single-stain projections (or zero).
    """
    s = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(od, dtype=np.float64)
    gram = s.T @ s
    b = y @ s
    try:
        x = np.linalg.solve(gram, b.T).T
    except np.linalg.LinAlgError:
        x = np.clip(y @ np.linalg.pinv(s).T, 0.0, None)
    bad = np.any(x < 0, axis=1)
    if np.any(bad):
        bb = b[bad]
        c1 = np.maximum(bb[:, 0] / gram[0, 0], 0.0)
        c2 = np.maximum(bb[:, 1] / gram[1, 1], 0.0)
        # residual up to the constant |y|^2: -2 x.b + x.G.x
        r1 = -2 * c1 * bb[:, 0] + c1 * c1 * gram[0, 0]
        r2 = -2 * c2 * bb[:, 1] + c2 * c2 * gram[1, 1]
        use1 = r1 <= r2
        fixed = np.zeros_like(bb)
        fixed[use1, 0] = c1[use1]
        fixed[~use1, 1] = c2[~use1]
        x[bad] = fixed
    return x


def _unit_nonnegative(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.clip(v, 0.0, None)
    return v / np.linalg.norm(v)


def estimate_stain_matrix(
    tile: np.ndarray,
    background: float = 1.0,
    beta: float = OD_THRESHOLD,
    alpha: float = ANGLE_PERCENTILE,
) -> StainMatrix:
    """Macenko stain-vector estimation on one tile or a stack of tiles.

    Pixels whose optical-density norm is below ``beta`` are treated as
    background.  The remaining OD cloud is projected on its top two principal
    directions and the ``alpha`` / ``100 - alpha`` percentile angles give the
    two stain vectors.
    """
    pixels = np.asarray(tile, dtype=np.float64).reshape(-1, 3)
    od = optical_density(pixels, background)
    keep = np.linalg.norm(od, axis=1) >= beta
    if keep.sum() < max(MIN_TISSUE_FRACTION * len(od), 3):
        raise InsufficientTissueError(
            f"insufficient tissue: {int(keep.sum())} of {len(od)} pixels above OD threshold {beta}"
        )
    od_hat = od[keep]
    _, eigvecs = np.linalg.eigh(np.cov(od_hat.T))
    plane = eigvecs[:, [2, 1]]
    proj = od_hat @ plane
    # orient the principal axes so the cloud sits in the right half-plane
    if proj[:, 0].mean() < 0:
        plane[:, 0] *= -1
        proj[:, 0] *= -1
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100 - alpha])
    v_lo = _unit_nonnegative(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v_hi = _unit_nonnegative(plane @ np.array([np.cos(hi), np.sin(hi)]))
    # hematoxylin-like vector (larger blue-channel absorbance) first
    vectors = np.column_stack([v_lo, v_hi] if v_lo[2] >= v_hi[2] else [v_hi, v_lo])
    conc = nnls_two_stains(vectors, od)
    max_c = np.percentile(conc, 99, axis=0)
    return StainMatrix(vectors, np.maximum(max_c, 1e-6), background)


def macenko_normalize(src: np.ndarray, target: StainMatrix) -> np.ndarray:
    """Deconvolve ``src`` with its own stain matrix and re-render through ``target``.

    The source is assumed to share the target's transmitted-light intensity.
    """
    src = check_color_tile(src)
    own = estimate_stain_matrix(src, background=target.background)
    od = optical_density(src.reshape(-1, 3), target.background)
    conc = nnls_two_stains(own.vectors, od)
    conc *= target.max_concentrations / own.max_concentrations
    out = target.background * np.exp(-conc @ target.vectors.T)
    return np.clip(out, 0.0, 1.0).reshape(src.shape)


def estimate_background(tiles: np.ndarray, percentile: float = 99.0) -> float:
    """Transmitted-light intensity guessed from the brightest pixels."""
    brightness = np.asarray(tiles, dtype=np.float64).reshape(-1, 3).mean(axis=1)
    return float(np.clip(np.percentile(brightness, percentile), 0.5, 1.0))


# --------------------------------------------------------------------------- #
# Histogram specification
# --------------------------------------------------------------------------- #

def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.int64)


def channel_histograms(tiles: np.ndarray) -> np.ndarray:
    """Normalized 256-bin histograms ``(3, 256)`` pooled over all pixels."""
    levels = quantize(np.asarray(tiles).reshape(-1, 3))
    hist = np.stack([np.bincount(levels[:, k], minlength=256) for k in range(3)]).astype(np.float64)
    return hist / hist.sum(axis=1, keepdims=True)


def histogram_specification(src: np.ndarray, target_hist: np.ndarray) -> np.ndarray:
    """Per-channel monotone lookup matching the source CDF to ``target_hist``.

    Each source level maps to the smallest target level whose CDF reaches the
    midpoint of the source CDF step, so tied pixels stay together and a
    constant channel lands on the target median.
    """
    src = check_color_tile(src)
    target_hist = np.asarray(target_hist, dtype=np.float64)
    if target_hist.shape != (3, 256):
        raise ValueError(f"target histograms must have shape (3, 256), got {target_hist.shape}")
    if np.any(target_hist < 0) or not np.allclose(target_hist.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("each target histogram must be nonnegative and sum to 1")
    levels = quantize(src.reshape(-1, 3))
    out = np.empty(levels.shape, dtype=np.float64)
    for k in range(3):
        counts = np.bincount(levels[:, k], minlength=256).astype(np.float64)
        cdf = np.cumsum(counts) / counts.sum()
        mid = cdf - counts / counts.sum() / 2.0
        t_cdf = np.cumsum(target_hist[k])
        lut = np.minimum(np.searchsorted(t_cdf, mid, side="left"), 255)
        out[:, k] = lut[levels[:, k]] / 255.0
    return out.reshape(src.shape)


# --------------------------------------------------------------------------- #
# Fitted target artifacts
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class HistogramTarget:
    hist: np.ndarray

    def to_json(self) -> dict:
        return {"kind": "hs", "hist": np.asarray(self.hist).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "HistogramTarget":
        return cls(np.asarray(obj["hist"], dtype=np.float64))


def _subsample(tiles: np.ndarray, max_tiles: int | None, seed: int) -> np.ndarray:
    tiles = np.asarray(tiles)
    if tiles.ndim == 3:
        tiles = tiles[None]
    if max_tiles is not None and len(tiles) > max_tiles:
        idx = np.sort(np.random.default_rng(seed).choice(len(tiles), max_tiles, replace=False))
        tiles = tiles[idx]
    return tiles


def fit_baseline(method: str, tiles: np.ndarray, max_tiles: int | None = 256, seed: int = 0):
    """Fit a pooled target artifact (ChannelStats, StainMatrix or HistogramTarget)."""
    tiles = _subsample(tiles, max_tiles, seed)
    if method == "reinhard":
        return channel_stats(tiles)
    if method == "macenko":
        return estimate_stain_matrix(tiles, background=estimate_background(tiles))
    if method == "hs":
        return HistogramTarget(channel_histograms(tiles))
    raise ValueError(f"unknown baseline {method!r}")


def apply_baseline(target, tile: np.ndarray) -> np.ndarray:
    if isinstance(target, ChannelStats):
        return reinhard_normalize(tile, target)
    if isinstance(target, StainMatrix):
        return macenko_normalize(tile, target)
    if isinstance(target, HistogramTarget):
        return histogram_specification(tile, target.hist)
    raise TypeError(f"not a baseline target: {type(target).__name__}")


def save_target(target, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(target.to_json(), fh)


def load_target(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    kinds = {"reinhard": ChannelStats, "macenko": StainMatrix, "hs": HistogramTarget}
    kind = obj.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown baseline artifact kind {kind!r}")
    return kinds[kind].from_json(obj)
