"""Synthetic two-domain land-cover scenes for desk-scale experiments.

Scenes are square rasters of geometric regions in the canonical taxonomy:
open area background, rectangular urban blocks, elliptical forest patches
and a sinuous river. A :class:`DomainStyle` controls the palette and the
texture noise, so a source domain can share the label generator with a
target domain while looking different.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .data_pipeline import DatasetDescriptor, RasterPair, write_manifest
from .taxonomy import CANONICAL

URBAN, OPEN_AREA, WATER, FOREST = 1, 2, 3, 4

BASE_PALETTE = {
    URBAN: (140, 130, 125),
    OPEN_AREA: (150, 140, 95),
    WATER: (60, 85, 110),
    FOREST: (70, 105, 65),
}


@dataclass(frozen=True)
class DomainStyle:
    hue_shift: float = 0.0        # fraction of the hue circle
    noise_sigma: float = 28.0     # per-pixel gaussian noise
    noise_smoothing: float = 0.0  # gaussian blur sigma applied to the noise field
    color_jitter: float = 18.0    # per-scene, per-class colour offset


TARGET_STYLE = DomainStyle()
SOURCE_STYLE = DomainStyle(hue_shift=0.08, noise_sigma=34.0, noise_smoothing=1.2, color_jitter=18.0)


def shifted_palette(style: DomainStyle) -> dict[int, np.ndarray]:
    palette = {}
    for cls, rgb in BASE_PALETTE.items():
        h, l, s = colorsys.rgb_to_hls(*(v / 255 for v in rgb))
        r, g, b = colorsys.hls_to_rgb((h + style.hue_shift) % 1.0, l, s)
        palette[cls] = np.array([r, g, b]) * 255
    return palette


def scene_labels(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    labels = np.full((size, size), OPEN_AREA, dtype=np.uint8)
    rows, cols = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        cr, cc = rng.uniform(0, size, 2)
        ar, ac = rng.uniform(size * 0.1, size * 0.3, 2)
        labels[((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1] = FOREST
    if rng.random() < 0.8:
        amp, freq, phase = rng.uniform(2, size * 0.15), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        center = rng.uniform(size * 0.2, size * 0.8)
        width = rng.uniform(2.5, size * 0.08)
        path = center + amp * np.sin(2 * np.pi * freq * cols / size + phase)
        river = np.abs(rows - path) <= width
        if rng.random() < 0.5:
            river = river.T
        labels[river] = WATER
    for _ in range(rng.integers(2, 7)):
        h, w = rng.integers(size // 10, size // 4, 2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        labels[r:r + h, c:c + w] = URBAN
    return labels


def render(labels: np.ndarray, rng: np.random.Generator, style: DomainStyle) -> np.ndarray:
    palette = shifted_palette(style)
    image = np.zeros(labels.shape + (3,))
    brightness = rng.normal(0.0, 10.0)
    for cls, rgb in palette.items():
        jitter = rng.normal(0.0, style.color_jitter, 3)
        image[labels == cls] = rgb + jitter + brightness
    noise = rng.normal(0.0, 1.0, labels.shape + (3,))
    if style.noise_smoothing > 0:
        noise = ndimage.gaussian_filter(noise, sigma=(style.noise_smoothing, style.noise_smoothing, 0))
        noise /= noise.std()
    image += style.noise_sigma * noise
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def make_scene(rng: np.random.Generator, size: int = 64, style: DomainStyle = TARGET_STYLE):
    labels = scene_labels(rng, size)
    return render(labels, rng, style), labels


def make_dataset(
    name: str,
    n_train: int,
    n_test: int,
    seed: int,
    style: DomainStyle = TARGET_STYLE,
    size: int = 64,
    zoom_level: int = 16,
    annotation_rules_id: str = "toy-rules-v1",
    meters_per_pixel: float = 2.5,
) -> DatasetDescriptor:
    rng = np.random.default_rng(seed)
    pairs = []
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            image, labels = make_scene(rng, size, style)
            pairs.append(RasterPair(image, labels, meters_per_pixel, meters_per_pixel, split, f"{name}_{split}_{i:04d}"))
    return DatasetDescriptor(name, zoom_level, CANONICAL, annotation_rules_id,
                             meters_per_pixel, meters_per_pixel, pairs)


def write_toy_domains(
    out_dir, seed: int = 0, n_target_train: int = 4, n_target_test: int = 32,
    n_source_train: int = 64, size: int = 64,
    source_style: Optional[DomainStyle] = None,
) -> tuple[Path, Path]:
    """Write target and source manifests (with PNG rasters) under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = make_dataset("toy_target", n_target_train, n_target_test, seed, TARGET_STYLE, size)
    source = make_dataset("toy_source", n_source_train, 0, seed + 1000,
                          source_style or SOURCE_STYLE, size)
    return (write_manifest(out_dir / "target.json", target),
            write_manifest(out_dir / "source.json", source))
