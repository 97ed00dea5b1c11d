"""Raster ingestion, grid tiling, random crops, sliding windows and stitching."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .taxonomy import ClassTaxonomy, LabelRangeError, RemapTable, check_label_range, remap_labels

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "MCCSEG_DATA_ROOT"
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Manifest could not be read or one of its pairs is invalid."""


@dataclass
class RasterPair:
    """RGB image (H, W, 3) uint8 with its aligned (H, W) uint8 class-index labels."""

    image: np.ndarray
    labels: np.ndarray
    meters_per_pixel_image: float = 1.0
    meters_per_pixel_label: float = 1.0
    split: str = "train"
    id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"pair {self.id!r}: image must be (H, W, 3), got {self.image.shape}")
        if self.labels.ndim != 2:
            raise ValueError(f"pair {self.id!r}: labels must be (H, W), got {self.labels.shape}")
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(
                f"pair {self.id!r}: image {self.image.shape[:2]} and labels {self.labels.shape} differ in shape"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def crop(self, row: int, col: int, height: int, width: int, id: Optional[str] = None) -> "RasterPair":
        return replace(
            self,
            image=self.image[row:row + height, col:col + width],
            labels=self.labels[row:row + height, col:col + width],
            id=self.id if id is None else id,
            metadata={**self.metadata, "origin": (row, col)},
        )


@dataclass
class DatasetDescriptor:
    name: str
    zoom_level: int
    taxonomy: ClassTaxonomy
    annotation_rules_id: str
    meters_per_pixel_image: float
    meters_per_pixel_label: float
    pairs: list = field(default_factory=list)

    def __post_init__(self):
        if self.zoom_level < 0:
            raise ValueError(f"zoom_level must be >= 0, got {self.zoom_level}")
        if self.meters_per_pixel_image <= 0 or self.meters_per_pixel_label <= 0:
            raise ValueError("meters_per_pixel values must be positive")
        if not self.annotation_rules_id:
            raise ValueError("annotation_rules_id must be non-empty")

    def split(self, name: str) -> list[RasterPair]:
        return [p for p in self.pairs if p.split == name]

    def remapped(self, table: RemapTable) -> "DatasetDescriptor":
        """Copy with every label raster pushed through ``table``."""
        if table.source != self.taxonomy:
            raise ValueError(f"remap table source taxonomy does not match dataset {self.name!r}")
        pairs = [replace(p, labels=remap_labels(p.labels, table)) for p in self.pairs]
        return replace(self, taxonomy=table.target, pairs=pairs)

    def downscaled(self, linear_factor: int) -> "DatasetDescriptor":
        """Resolution-matched copy; each factor of 2 drops one zoom level."""
        levels = math.log2(linear_factor)
        if levels != int(levels):
            raise ValueError(f"zoom matching needs a power-of-two factor, got {linear_factor}")
        return replace(
            self,
            zoom_level=self.zoom_level - int(levels),
            meters_per_pixel_image=self.meters_per_pixel_image * linear_factor,
            meters_per_pixel_label=self.meters_per_pixel_label * linear_factor,
            pairs=[downscale_pair(p, linear_factor) for p in self.pairs],
        )


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    origins: tuple[tuple[int, int], ...]
    source_shape: tuple[int, int]

    @classmethod
    def for_shape(cls, shape: tuple[int, int], tile_size: int) -> "TileGrid":
        h, w = shape
        if tile_size < 1 or tile_size > h or tile_size > w:
            raise ValueError(f"tile_size {tile_size} does not fit a {h}x{w} raster")
        origins = tuple(
            (r * tile_size, c * tile_size) for r in range(h // tile_size) for c in range(w // tile_size)
        )
        return cls(tile_size, origins, (h, w))

    @property
    def rows(self) -> int:
        return self.source_shape[0] // self.tile_size

    @property
    def cols(self) -> int:
        return self.source_shape[1] // self.tile_size


# -- raster io --------------------------------------------------------------

def read_raster(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        return np.asarray(im)


def write_raster(path: Union[str, Path], array: np.ndarray) -> None:
    path = Path(path)
    array = np.ascontiguousarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"rasters are 8-bit, got {array.dtype}")
    if path.suffix == ".npy":
        np.save(path, array)
    else:
        Image.fromarray(array).save(path)


def resolve_path(path: Union[str, Path], base: Optional[Union[str, Path]] = None) -> Path:
    """Resolve ``path`` against ``base``, else ``$MCCSEG_DATA_ROOT``, else the cwd."""
    path = Path(path)
    if path.is_absolute():
        return path
    if base is not None:
        return Path(base) / path
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / path if root else path


def load_manifest(path: Union[str, Path], load_rasters: bool = True) -> DatasetDescriptor:
    """Load a dataset manifest and validate every pair it references.

    Raster paths inside the manifest are relative to the manifest's own
    directory. All invalid pairs are collected and reported together.
    """
    path = resolve_path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"malformed manifest {path}: top level must be an object")

    required = ("name", "zoom_level", "annotation_rules_id", "meters_per_pixel_image",
                "meters_per_pixel_label", "taxonomy", "pairs")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ManifestError(f"malformed manifest {path}: missing keys {missing}")
    try:
        taxonomy = ClassTaxonomy(tuple(doc["taxonomy"]), int(doc.get("unknown_index", 0)))
        desc = DatasetDescriptor(
            name=str(doc["name"]),
            zoom_level=int(doc["zoom_level"]),
            taxonomy=taxonomy,
            annotation_rules_id=str(doc["annotation_rules_id"]),
            meters_per_pixel_image=float(doc["meters_per_pixel_image"]),
            meters_per_pixel_label=float(doc["meters_per_pixel_label"]),
        )
    except (TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e

    base = path.parent
    errors = []
    ids = set()
    for entry in doc["pairs"]:
        pid = str(entry.get("id", ""))
        try:
            if not pid:
                raise ManifestError("pair without id")
            if pid in ids:
                raise ManifestError("duplicate pair id")
            ids.add(pid)
            split = entry.get("split", "train")
            if split not in SPLITS:
                raise ManifestError(f"split must be one of {SPLITS}, got {split!r}")
            if not load_rasters:
                continue
            image = read_raster(resolve_path(entry["image"], base))
            labels = read_raster(resolve_path(entry["labels"], base))
            if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
                raise ManifestError(f"image must be 3-channel 8-bit, got {image.shape} {image.dtype}")
            if labels.ndim != 2 or labels.dtype != np.uint8:
                raise ManifestError(f"labels must be 1-channel 8-bit, got {labels.shape} {labels.dtype}")
            if image.shape[:2] != labels.shape:
                raise ManifestError(
                    f"shape mismatch: image {image.shape[0]}x{image.shape[1]}, "
                    f"labels {labels.shape[0]}x{labels.shape[1]}"
                )
            check_label_range(labels, len(taxonomy))
            desc.pairs.append(RasterPair(
                image, labels, desc.meters_per_pixel_image, desc.meters_per_pixel_label, split, pid,
            ))
        except (ManifestError, LabelRangeError, KeyError, OSError) as e:
            errors.append(f"pair {pid!r}: {e}")
    if errors:
        raise ManifestError(f"{path}: {len(errors)} invalid pair(s):\n  " + "\n  ".join(errors))
    logger.info("loaded %s: %d pairs", desc.name, len(desc.pairs))
    return desc


def write_manifest(path: Union[str, Path], desc: DatasetDescriptor, raster_dir: Optional[Path] = None) -> Path:
    """Write ``desc`` and its rasters (PNG) next to the manifest."""
    path = Path(path)
    raster_dir = Path(raster_dir) if raster_dir is not None else path.parent / path.stem
    raster_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in desc.pairs:
        img_path = raster_dir / f"{p.id}_image.png"
        lbl_path = raster_dir / f"{p.id}_labels.png"
        write_raster(img_path, p.image)
        write_raster(lbl_path, p.labels)
        entries.append({
            "id": p.id,
            "image": os.path.relpath(img_path, path.parent),
            "labels": os.path.relpath(lbl_path, path.parent),
            "split": p.split,
        })
    doc = {
        "name": desc.name,
        "zoom_level": desc.zoom_level,
        "annotation_rules_id": desc.annotation_rules_id,
        "meters_per_pixel_image": desc.meters_per_pixel_image,
        "meters_per_pixel_label": desc.meters_per_pixel_label,
        "taxonomy": list(desc.taxonomy.names),
        "unknown_index": desc.taxonomy.unknown_index,
        "pairs": entries,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
    return path


# -- tiling -----------------------------------------------------------------

def grid_tiles(pair: RasterPair, tile_size: int) -> list[RasterPair]:
    """Non-overlapping row-major tiles; the ragged right/bottom margin is dropped."""
    grid = TileGrid.for_shape(pair.shape, tile_size)
    return [
        pair.crop(r, c, tile_size, tile_size, id=f"{pair.id}_r{r}_c{c}")
        for r, c in grid.origins
    ]


def assemble_tiles(tiles: Sequence[np.ndarray], cols: int) -> np.ndarray:
    """Inverse of :func:`grid_tiles` for one array field, given row-major tiles."""
    rows = [np.concatenate(tiles[i:i + cols], axis=1) for i in range(0, len(tiles), cols)]
    return np.concatenate(rows, axis=0)


def random_crop(tile: RasterPair, crop_size: int, rng: np.random.Generator) -> RasterPair:
    h, w = tile.shape
    if crop_size < 1 or crop_size > h or crop_size > w:
        raise ValueError(f"crop_size {crop_size} does not fit a {h}x{w} tile")
    row = int(rng.integers(0, h - crop_size + 1))
    col = int(rng.integers(0, w - crop_size + 1))
    return tile.crop(row, col, crop_size, crop_size)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def sliding_windows(image: np.ndarray, window: int, stride: Optional[int] = None):
    """Cover ``image`` with ``window``-sized squares, last row/column flush to the edge.

    Returns a list of ``(view, (row, col))``. ``stride`` defaults to ``window``.
    """
    stride = window if stride is None else stride
    h, w = image.shape[:2]
    if window < 1 or window > h or window > w:
        raise ValueError(f"window {window} exceeds image {h}x{w}")
    if not 0 < stride <= window:
        raise ValueError(f"stride must satisfy 0 < stride <= window, got {stride}")
    return [
        (image[r:r + window, c:c + window], (r, c))
        for r in window_starts(h, window, stride)
        for c in window_starts(w, window, stride)
    ]


def stitch_predictions(windows, out_shape: tuple[int, int]) -> np.ndarray:
    """Average per-window class probabilities (C, h, w) and take the argmax."""
    h, w = out_shape
    total = None
    count = np.zeros((h, w), dtype=np.int64)
    for probs, (r, c) in windows:
        probs = np.asarray(probs, dtype=np.float64)
        if total is None:
            total = np.zeros((probs.shape[0], h, w))
        wh, ww = probs.shape[1:]
        total[:, r:r + wh, c:c + ww] += probs
        count[r:r + wh, c:c + ww] += 1
    if total is None:
        raise ValueError("no windows to stitch")
    if not count.all():
        gap = np.unravel_index(int(np.argmin(count)), count.shape)
        raise ValueError(f"windows leave pixel ({gap[0]}, {gap[1]}) uncovered")
    mean = total / count
    return mean.argmax(axis=0).astype(np.uint8)


def downscale_pair(pair: RasterPair, linear_factor: int) -> RasterPair:
    """Area-average the image and nearest-sample (block top-left) the labels."""
    if int(linear_factor) != linear_factor or linear_factor < 1:
        raise ValueError(f"linear_factor must be a positive integer, got {linear_factor}")
    f = int(linear_factor)
    if f == 1:
        return replace(pair, image=pair.image.copy(), labels=pair.labels.copy())
    h, w = pair.shape
    hc, wc = h - h % f, w - w % f
    metadata = dict(pair.metadata)
    if (hc, wc) != (h, w):
        metadata["cropped_to"] = (hc, wc)
    img = pair.image[:hc, :wc].astype(np.float64)
    img = img.reshape(hc // f, f, wc // f, f, 3).mean(axis=(1, 3))
    return replace(
        pair,
        image=np.clip(np.rint(img), 0, 255).astype(np.uint8),
        labels=np.ascontiguousarray(pair.labels[:hc:f, :wc:f]),
        meters_per_pixel_image=pair.meters_per_pixel_image * f,
        meters_per_pixel_label=pair.meters_per_pixel_label * f,
        metadata={**metadata, "downscale_factor": f},
    )
