"""Paired geometric augmentation with a progressive rotation limit, and normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

OPS = (
    "translate",
    "resize",
    "rotate",
    "shear",
    "invert_colors",
    "flip_horizontal",
    "flip_vertical",
)


@dataclass(frozen=True)
class AugmentPolicy:
    op_set: tuple[str, ...] = OPS
    ops_per_sample: int = 2
    rotation_max_degrees: float = 150.0
    rotation_sections: int = 10
    translate_fraction: float = 0.1
    shear_max_degrees: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        object.__setattr__(self, "op_set", tuple(self.op_set))
        unknown = set(self.op_set) - set(OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        if not 0 <= self.ops_per_sample <= len(self.op_set):
            raise ValueError(f"ops_per_sample {self.ops_per_sample} exceeds op_set size {len(self.op_set)}")
        if self.rotation_sections < 1:
            raise ValueError("rotation_sections must be >= 1")
        if self.rotation_max_degrees <= 0:
            raise ValueError("rotation_max_degrees must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization needs 3 means and 3 stds")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be strictly positive")


IMAGENET_STATS = NormalizationStats()


def rotation_limit(progress: float, policy: AugmentPolicy = AugmentPolicy()) -> float:
    """Current maximum rotation, stepping up one section at a time as training advances."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    sections = policy.rotation_sections
    section = min(sections - 1, math.floor(progress * sections))
    return (section + 1) * (policy.rotation_max_degrees / sections)


def draw_ops(rng: np.random.Generator, policy: AugmentPolicy) -> list[str]:
    idx = rng.choice(len(policy.op_set), size=policy.ops_per_sample, replace=False)
    return [policy.op_set[i] for i in idx]


# -- affine helpers (homogeneous, (row, col) coordinates) --------------------

def _about_center(linear: np.ndarray, shape, shift=(0.0, 0.0)) -> np.ndarray:
    h, w = shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    m = np.eye(3)
    m[:2, :2] = linear
    m[:2, 2] = center - linear @ center + np.asarray(shift, dtype=float)
    return m


def rotation_matrix(degrees: float, shape) -> np.ndarray:
    """Counter-clockwise (as displayed) rotation about the raster centre."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return _about_center(np.array([[c, -s], [s, c]]), shape)


def shear_matrix(degrees: float, shape) -> np.ndarray:
    k = math.tan(math.radians(degrees))
    return _about_center(np.array([[1.0, 0.0], [k, 1.0]]), shape)


def scale_matrix(factor: float, shape) -> np.ndarray:
    return _about_center(np.eye(2) * factor, shape)


def translation_matrix(drow: float, dcol: float, shape) -> np.ndarray:
    return _about_center(np.eye(2), shape, shift=(drow, dcol))


def warp_pair(image: np.ndarray, labels: np.ndarray, forward: np.ndarray, fill_label: int):
    """Apply one affine map to both rasters; exposed pixels get 0 / ``fill_label``."""
    # snap float noise so right-angle maps land exactly on pixel centres
    inv = np.round(np.linalg.inv(forward), 12)
    matrix, offset = inv[:2, :2], inv[:2, 2]
    out_labels = ndimage.affine_transform(
        labels, matrix, offset, order=0, mode="grid-constant", cval=fill_label, prefilter=False,
    )
    channels = [
        ndimage.affine_transform(
            image[..., ch].astype(np.float64), matrix, offset, order=1, mode="grid-constant", cval=0.0,
        )
        for ch in range(image.shape[2])
    ]
    out_image = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
    return out_image, out_labels.astype(labels.dtype)


def rotate_pair(image, labels, degrees: float, fill_label: int = 0):
    return warp_pair(image, labels, rotation_matrix(degrees, labels.shape), fill_label)


def apply_op(op: str, image, labels, rng: np.random.Generator, policy: AugmentPolicy,
             limit: float, fill_label: int):
    h, w = labels.shape
    if op == "flip_horizontal":
        return image[:, ::-1].copy(), labels[:, ::-1].copy()
    if op == "flip_vertical":
        return image[::-1].copy(), labels[::-1].copy()
    if op == "invert_colors":
        return 255 - image, labels.copy()
    if op == "rotate":
        m = rotation_matrix(rng.uniform(-limit, limit), (h, w))
    elif op == "shear":
        m = shear_matrix(rng.uniform(-policy.shear_max_degrees, policy.shear_max_degrees), (h, w))
    elif op == "resize":
        m = scale_matrix(rng.uniform(*policy.scale_range), (h, w))
    elif op == "translate":
        dr = int(rng.integers(-int(policy.translate_fraction * h), int(policy.translate_fraction * h) + 1))
        dc = int(rng.integers(-int(policy.translate_fraction * w), int(policy.translate_fraction * w) + 1))
        m = translation_matrix(dr, dc, (h, w))
    else:
        raise ValueError(f"unknown op {op!r}")
    return warp_pair(image, labels, m, fill_label)


def apply_augment(
    image: np.ndarray,
    labels: np.ndarray,
    progress: float,
    rng: np.random.Generator,
    policy: AugmentPolicy = AugmentPolicy(),
    unknown_index: int = 0,
    ops: Optional[Sequence[str]] = None,
):
    """Draw ``policy.ops_per_sample`` distinct ops and apply them to the pair in order.

    ``ops`` overrides the random draw (the op parameters are still drawn from
    ``rng``). Geometric ops resample the image bilinearly and the labels by
    nearest neighbour, so no new class values appear except ``unknown_index``.
    """
    if image.shape[:2] != labels.shape:
        raise ValueError(f"image {image.shape[:2]} and labels {labels.shape} are not aligned")
    limit = rotation_limit(progress, policy)
    if ops is None:
        ops = draw_ops(rng, policy)
    for op in ops:
        image, labels = apply_op(op, image, labels, rng, policy, limit, unknown_index)
    return image, labels


def normalize(image: np.ndarray, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32, ``(v / 255 - mean) / std`` per channel."""
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    out = (image.astype(np.float64) / 255.0 - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)
