"""Class taxonomies and label remapping onto the shared 5-class scheme."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

MAX_CLASSES = 256


class LabelRangeError(ValueError):
    """A label raster holds a value outside its taxonomy."""

    def __init__(self, value: int, coord: tuple[int, ...], num_classes: int):
        self.value = int(value)
        self.coord = tuple(int(c) for c in coord)
        super().__init__(
            f"label value {self.value} at pixel {self.coord} is outside "
            f"taxonomy range [0, {num_classes - 1}]"
        )


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple[str, ...]
    unknown_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("taxonomy needs at least one class")
        if len(self.names) > MAX_CLASSES:
            raise ValueError(f"taxonomy has {len(self.names)} classes; labels are 8-bit (max {MAX_CLASSES})")
        if any(not n for n in self.names):
            raise ValueError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")
        if not 0 <= self.unknown_index < len(self.names):
            raise ValueError(f"unknown_index {self.unknown_index} out of range")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def index(self, name_or_index: Union[str, int]) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            idx = int(name_or_index)
            if not 0 <= idx < len(self.names):
                raise KeyError(f"class index {idx} not in taxonomy of {len(self.names)} classes")
            return idx
        try:
            return self.names.index(name_or_index)
        except ValueError:
            raise KeyError(f"class {name_or_index!r} not in taxonomy {self.names}") from None


CANONICAL = ClassTaxonomy(("unknown", "urban", "open_area", "water", "forest"), 0)


@dataclass(frozen=True)
class RemapTable:
    """Total mapping from source class indices to target class indices."""

    source: ClassTaxonomy
    target: ClassTaxonomy
    mapping: tuple[int, ...] = field(default=())

    def __post_init__(self):
        mapping = tuple(int(m) for m in self.mapping)
        if len(mapping) != len(self.source):
            raise ValueError(
                f"mapping has {len(mapping)} entries, source taxonomy has {len(self.source)}"
            )
        bad = [m for m in mapping if not 0 <= m < len(self.target)]
        if bad:
            raise ValueError(f"mapping targets {bad} are not valid target indices")
        object.__setattr__(self, "mapping", mapping)

    @classmethod
    def identity(cls, taxonomy: ClassTaxonomy = CANONICAL) -> "RemapTable":
        return cls(taxonomy, taxonomy, tuple(range(len(taxonomy))))

    @classmethod
    def from_pairs(
        cls,
        source: ClassTaxonomy,
        target: ClassTaxonomy,
        pairs: Union[Mapping, Iterable[Sequence]],
    ) -> "RemapTable":
        """Build a table from ``(source name or index, target name)`` pairs.

        Source classes not listed map to the target's unknown class.
        """
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        mapping = [target.unknown_index] * len(source)
        seen = set()
        for src, dst in pairs:
            s = source.index(src)
            if s in seen:
                raise ValueError(f"source class {src!r} mapped twice")
            seen.add(s)
            mapping[s] = target.index(dst)
        return cls(source, target, tuple(mapping))

    @classmethod
    def from_config(cls, cfg: Mapping, target: ClassTaxonomy = CANONICAL) -> "RemapTable":
        """Parse ``{"source_taxonomy": [...], "unknown_index": k, "pairs": [[src, dst], ...]}``."""
        source = ClassTaxonomy(tuple(cfg["source_taxonomy"]), int(cfg.get("unknown_index", 0)))
        if "target_taxonomy" in cfg:
            target = ClassTaxonomy(
                tuple(cfg["target_taxonomy"]), int(cfg.get("target_unknown_index", 0))
            )
        return cls.from_pairs(source, target, cfg["pairs"])

    @classmethod
    def load(cls, path: Union[str, Path], target: ClassTaxonomy = CANONICAL) -> "RemapTable":
        with open(path) as f:
            return cls.from_config(json.load(f), target)

    def lookup(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.uint8)

    def compose(self, other: "RemapTable") -> "RemapTable":
        """Table equivalent to applying ``self`` then ``other``."""
        if other.source != self.target:
            raise ValueError("cannot compose: taxonomies do not chain")
        return RemapTable(self.source, other.target, tuple(other.mapping[m] for m in self.mapping))


@dataclass
class ValidationReport:
    to_unknown: list[int]
    unreachable: list[int]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings


def check_label_range(labels: np.ndarray, num_classes: int) -> None:
    """Raise LabelRangeError at the first pixel (row-major) outside ``[0, num_classes)``."""
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        coord = np.unravel_index(int(np.argmax(bad)), labels.shape)
        raise LabelRangeError(labels[coord], coord, num_classes)


def remap_labels(labels: np.ndarray, table: RemapTable) -> np.ndarray:
    """Map every pixel through ``table``; output is uint8 with the input's shape."""
    labels = np.asarray(labels)
    check_label_range(labels, len(table.source))
    return table.lookup()[labels.astype(np.intp, copy=False)]


def validate_remap(table: RemapTable) -> ValidationReport:
    """List source classes collapsed into unknown and target classes nothing maps to."""
    src_unknown = table.source.unknown_index
    dst_unknown = table.target.unknown_index
    to_unknown = [s for s, t in enumerate(table.mapping) if t == dst_unknown and s != src_unknown]
    reached = set(table.mapping)
    unreachable = [t for t in range(len(table.target)) if t != dst_unknown and t not in reached]
    warnings = [
        f"source class {s} ({table.source.names[s]}) maps to unknown" for s in to_unknown
    ] + [f"target class {t} unreachable" for t in unreachable]
    return ValidationReport(to_unknown, unreachable, warnings)
