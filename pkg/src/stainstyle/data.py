"""Tile data model, manifest ingestion and synthetic stained-tile generation.

Tiles are plain numpy arrays: a color tile is ``(d, d, 3)`` float RGB in
[0, 1], a gray tile is ``(d, d)``.  The synthetic generator renders a
label-dependent nuclei/stroma layout through a Beer-Lambert stain model, so
every synthetic "institute" has a known ground-truth stain matrix.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for malformed tiles, manifests or style parameters."""


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_color_tile(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
        raise DataError(f"color tile must have shape (d, d, 3), got {pixels.shape}")
    if not _is_power_of_two(pixels.shape[0]):
        raise DataError(f"tile size {pixels.shape[0]} is not a power of two")
    if not np.all(np.isfinite(pixels)):
        raise DataError("color tile contains non-finite values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError("color tile values must lie in [0, 1]")
    return pixels


def check_gray_tile(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
        raise DataError(f"gray tile must have shape (d, d), got {pixels.shape}")
    if not np.all(np.isfinite(pixels)):
        raise DataError("gray tile contains non-finite values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError("gray tile values must lie in [0, 1]")
    return pixels


@dataclass(frozen=True)
class LabeledTile:
    tile: np.ndarray
    label: int
    institute: str

    def __post_init__(self):
        check_color_tile(self.tile)
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Dataset:
    """Immutable, ordered collection of labeled tiles of one split."""

    tiles: tuple[LabeledTile, ...]
    split: str = "train"
    _images: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tiles = tuple(self.tiles)
        object.__setattr__(self, "tiles", tiles)
        if not tiles:
            raise DataError("dataset is empty")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        sizes = {t.tile.shape[0] for t in tiles}
        if len(sizes) != 1:
            raise DataError(f"tiles have inconsistent sizes {sorted(sizes)}")
        images = np.stack([t.tile for t in tiles])
        images.setflags(write=False)
        object.__setattr__(self, "_images", images)
        # share memory with the stack instead of holding a second copy
        tiles = tuple(LabeledTile(images[i], t.label, t.institute) for i, t in enumerate(tiles))
        object.__setattr__(self, "tiles", tiles)

    def __len__(self) -> int:
        return len(self.tiles)

    def __getitem__(self, i: int) -> LabeledTile:
        return self.tiles[i]

    @property
    def d(self) -> int:
        return self.tiles[0].tile.shape[0]

    @property
    def images(self) -> np.ndarray:
        """Read-only ``(n, d, d, 3)`` stack of all tiles."""
        return self._images

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.tiles], dtype=np.int64)

    @property
    def class_counts(self) -> dict[int, int]:
        labels = self.labels
        return {0: int((labels == 0).sum()), 1: int((labels == 1).sum())}

    def with_images(self, images: np.ndarray) -> "Dataset":
        """Same labels and institutes, new pixels (e.g. after a stain transfer)."""
        if len(images) != len(self):
            raise DataError("image count does not match dataset size")
        return Dataset(
            tuple(LabeledTile(np.asarray(im), t.label, t.institute) for im, t in zip(images, self.tiles)),
            self.split,
        )


# --------------------------------------------------------------------------- #
# Manifests
# --------------------------------------------------------------------------- #

def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(tile: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(np.asarray(tile) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_manifest(path: str | Path, split: str = "train") -> Dataset:
    """Load a ``path,label,institute`` CSV manifest; paths are relative to it."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label", "institute"]:
            raise DataError(f"manifest header must be 'path,label,institute', got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise DataError("empty manifest")

    tiles = []
    d = None
    for i, row in enumerate(rows):
        label = row["label"].strip()
        if label not in ("0", "1"):
            raise DataError(f"row {i}: label must be 0 or 1, got {label!r}")
        image_path = path.parent / row["path"]
        if not image_path.is_file():
            raise DataError(f"row {i}: missing image file {image_path}")
        try:
            pixels = read_png(image_path)
        except Exception as exc:
            raise DataError(f"row {i}: cannot decode {image_path}: {exc}") from None
        if d is None:
            d = pixels.shape[0]
        if pixels.shape != (d, d, 3):
            raise DataError(f"row {i}: tile shape {pixels.shape} differs from {(d, d, 3)}")
        try:
            tiles.append(LabeledTile(pixels, int(label), row["institute"]))
        except DataError as exc:
            raise DataError(f"row {i}: {exc}") from None
    return Dataset(tuple(tiles), split)


def write_manifest(dataset: Dataset, directory: str | Path, name: str | None = None) -> Path:
    """Write tiles as PNGs under ``directory/<split>/`` plus ``<split>.csv``."""
    directory = Path(directory)
    name = name or dataset.split
    tile_dir = directory / name
    tile_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "institute"])
        for i, t in enumerate(dataset.tiles):
            rel = f"{name}/{i:06d}.png"
            write_png(t.tile, directory / rel)
            writer.writerow([rel, t.label, t.institute])
    return manifest


# --------------------------------------------------------------------------- #
# Synthetic stain styles
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class StainStyleParams:
    """Beer-Lambert parameterization of one institute's stain style.

    ``stain_matrix`` is 3x2 with unit-norm optical-density columns
    (hematoxylin-like first, eosin-like second).
    """

    stain_matrix: np.ndarray
    concentration_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    background_intensity: float = 0.95
    noise_sigma: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.stain_matrix, dtype=np.float64)
        object.__setattr__(self, "stain_matrix", s)
        scale = np.asarray(self.concentration_scale, dtype=np.float64)
        object.__setattr__(self, "concentration_scale", scale)
        self.validate()

    def validate(self) -> None:
        s = self.stain_matrix
        if s.shape != (3, 2) or not np.all(np.isfinite(s)):
            raise DataError(f"stain_matrix must be a finite 3x2 matrix, got shape {s.shape}")
        if np.any(s < 0):
            raise DataError("stain_matrix entries must be nonnegative")
        if not np.allclose(np.linalg.norm(s, axis=0), 1.0, atol=1e-6):
            raise DataError("stain_matrix columns must have unit norm")
        if stain_angle(s[:, 0], s[:, 1]) < 10.0:
            raise DataError("stain vectors must be at least 10 degrees apart")
        if self.concentration_scale.shape != (2,) or np.any(~(self.concentration_scale > 0)):
            raise DataError("concentration_scale must be two positive numbers")
        if not 0.8 < self.background_intensity <= 1.0:
            raise DataError("background_intensity must lie in (0.8, 1.0]")
        if not (self.noise_sigma >= 0 and np.isfinite(self.noise_sigma)):
            raise DataError("noise_sigma must be nonnegative")

    def to_json(self) -> dict:
        return {
            "stain_matrix": self.stain_matrix.tolist(),
            "concentration_scale": self.concentration_scale.tolist(),
            "background_intensity": float(self.background_intensity),
            "noise_sigma": float(self.noise_sigma),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StainStyleParams":
        try:
            return cls(
                stain_matrix=np.asarray(obj["stain_matrix"], dtype=np.float64),
                concentration_scale=np.asarray(obj["concentration_scale"], dtype=np.float64),
                background_intensity=float(obj["background_intensity"]),
                noise_sigma=float(obj["noise_sigma"]),
            )
        except KeyError as exc:
            raise DataError(f"style parameters missing key {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "StainStyleParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)


def stain_angle(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in degrees between two vectors."""
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def unit_columns(matrix: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    return m / np.linalg.norm(m, axis=0, keepdims=True)


# Ruifrok & Johnston H&E optical-density vectors.
RUIFROK_HE = unit_columns([[0.650, 0.072], [0.704, 0.990], [0.286, 0.105]])


def default_styles() -> tuple[StainStyleParams, StainStyleParams]:
    """Two institute styles used by the desk-scale benchmark.

    Style B's stain vectors are rotated away from style A's while keeping
    roughly the same luma absorbance, so gray images of the two styles look
    alike but their colors do not.
    """
    style_a = StainStyleParams(RUIFROK_HE, np.array([1.0, 1.0]), 0.95, 0.01)
    style_b = StainStyleParams(
        unit_columns([[0.28, 0.55], [0.72, 0.80], [0.64, 0.24]]), np.array([1.0, 1.0]), 0.95, 0.01
    )
    return style_a, style_b


# --------------------------------------------------------------------------- #
# Synthetic tissue
# --------------------------------------------------------------------------- #

_NUCLEI = {
    # label: (mean nuclei per 64x64 area, radius range in pixels at d=64)
    0: (10.0, (2.0, 3.2)),
    1: (22.0, (3.0, 4.8)),
}


def _smooth_field(rng: np.random.Generator, d: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((d, d)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def synth_concentrations(label: int, d: int, seed: int) -> np.ndarray:
    """Latent stain concentrations ``(2, d, d)`` (hematoxylin, eosin) of one tile.

    Tumor tiles carry more and larger nuclei.  Nuclei cores hold pure
    hematoxylin and lumen gaps hold no stain, so the optical-density cloud
    spans both pure stain directions.
    """
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label!r}")
    if not _is_power_of_two(d) or d < 16:
        raise DataError(f"d must be a power of two >= 16, got {d}")
    rng = np.random.default_rng([seed, label, d])
    scale = d / 64.0

    stroma = np.clip(0.45 + 0.15 * _smooth_field(rng, d, 6.0 * scale), 0.05, 1.0)
    lumen = _smooth_field(rng, d, 5.0 * scale) > 1.3
    stroma = np.where(lumen, 0.0, stroma)

    rate, (r_lo, r_hi) = _NUCLEI[label]
    n = rng.poisson(rate * scale * scale)
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float64)
    nuclei = np.zeros((d, d))
    for _ in range(n):
        cy, cx = rng.uniform(0, d, size=2)
        r = rng.uniform(r_lo, r_hi) * scale
        aspect = rng.uniform(1.0, 1.6)
        theta = rng.uniform(0, np.pi)
        strength = rng.uniform(0.7, 1.0)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        rho = np.sqrt((u / (r * aspect)) ** 2 + (v / r) ** 2)
        blob = strength / (1.0 + np.exp((rho - 1.0) * 8.0))
        nuclei = np.maximum(nuclei, blob)
    texture = 1.0 + 0.15 * _smooth_field(rng, d, 1.0)
    hema = np.clip(nuclei * texture, 0.0, 1.2)
    cover = np.clip(nuclei / 0.7, 0.0, 1.0)
    eosin = stroma * (1.0 - cover)
    return np.stack([hema, eosin])


def render_tile(
    style: StainStyleParams,
    concentrations: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Beer-Lambert render: ``background * exp(-S @ c)`` plus Gaussian noise, clipped."""
    c = np.asarray(concentrations, dtype=np.float64)
    od = np.einsum("kc,cij->ijk", style.stain_matrix, c)
    pixels = style.background_intensity * np.exp(-od)
    if style.noise_sigma > 0:
        if rng is None:
            raise DataError("a random generator is required when noise_sigma > 0")
        pixels = pixels + rng.normal(0.0, style.noise_sigma, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0)


def synth_tile(
    style: StainStyleParams,
    label: int,
    d: int = 64,
    seed: int = 0,
    institute: str = "synthetic",
) -> LabeledTile:
    """Sample one stained tile of the given label; deterministic in its arguments."""
    style.validate()
    conc = synth_concentrations(label, d, seed)
    conc = conc * style.concentration_scale[:, None, None]
    noise_rng = np.random.default_rng([seed, label, d, 1])
    return LabeledTile(render_tile(style, conc, noise_rng), label, institute)


def _synth_dataset(
    style: StainStyleParams, n: int, d: int, seeds: Iterable[int], split: str, institute: str
) -> Dataset:
    seeds = list(seeds)
    tiles = [synth_tile(style, i % 2, d, seeds[i], institute) for i in range(n)]
    return Dataset(tuple(tiles), split)


def make_synthetic_benchmark(
    style_a: StainStyleParams,
    style_b: StainStyleParams,
    n_train: int,
    n_val: int,
    n_test: int,
    d: int = 64,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Balanced train/val sets in style A (institute "A") and test set in style B ("B").

    Tissue layouts are drawn from disjoint seed ranges, so the test tiles are
    independent of train/val and only the stain style differs systematically.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n <= 0 or n % 2:
            raise DataError(f"{name} must be a positive even count, got {n}")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_val + n_test, replace=False)
    train = _synth_dataset(style_a, n_train, d, seeds[:n_train], "train", "A")
    val = _synth_dataset(style_a, n_val, d, seeds[n_train:n_train + n_val], "val", "A")
    test = _synth_dataset(style_b, n_test, d, seeds[n_train + n_val:], "test", "B")
    return train, val, test
