"""Half-target / half-source mini-batch composition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

TARGET = "target"
SOURCE = "source"


class SampleStream:
    """Endless iterator over ``items`` that reshuffles at every epoch boundary.

    The permutation for each epoch comes from a generator seeded once, so the
    whole sequence is a deterministic function of ``seed``.
    """

    def __init__(self, items: Sequence, seed: int = 0, shuffle: bool = True):
        if len(items) == 0:
            raise ValueError("sample stream is empty")
        self.items = items
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self.epoch = -1
        self._order: np.ndarray = np.empty(0, dtype=np.intp)
        self._pos = 0

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return self

    def _new_epoch(self):
        self.epoch += 1
        n = len(self.items)
        self._order = self.rng.permutation(n) if self.shuffle else np.arange(n)
        self._pos = 0

    def next_index(self) -> int:
        if self._pos >= len(self._order):
            self._new_epoch()
        idx = int(self._order[self._pos])
        self._pos += 1
        return idx

    def __next__(self):
        return self.items[self.next_index()]


@dataclass
class MixedBatch:
    images: torch.Tensor  # (B, 3, H, W)
    labels: torch.Tensor  # (B, H, W) int64
    domain: tuple[str, ...]
    batch_id: str = ""

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def is_mixed(self) -> bool:
        half = self.size // 2
        return (
            self.size % 2 == 0
            and all(d == TARGET for d in self.domain[:half])
            and all(d == SOURCE for d in self.domain[half:])
        )

    @property
    def target_slice(self) -> slice:
        return slice(0, self.size // 2) if self.is_mixed else slice(0, self.size)

    @property
    def source_slice(self) -> slice:
        if not self.is_mixed:
            raise ValueError("batch has no source half")
        return slice(self.size // 2, self.size)


Transform = Callable[[object, str], tuple]


def _stack(samples, domain, batch_id):
    images = torch.stack([torch.as_tensor(np.asarray(img)) for img, _ in samples])
    labels = torch.stack([torch.as_tensor(np.asarray(lbl), dtype=torch.int64) for _, lbl in samples])
    return MixedBatch(images, labels, tuple(domain), batch_id)


def compose_batch(
    target_stream: SampleStream,
    source_stream: SampleStream,
    batch_size: int,
    transform: Optional[Transform] = None,
    batch_id: str = "",
) -> MixedBatch:
    """First half from ``target_stream``, second half from ``source_stream``.

    ``transform(item, domain)`` turns a stream item into ``(image, labels)``;
    without it items must already be such pairs.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even and >= 2, got {batch_size}")
    half = batch_size // 2
    transform = transform or (lambda item, domain: item)
    samples = [transform(next(target_stream), TARGET) for _ in range(half)]
    samples += [transform(next(source_stream), SOURCE) for _ in range(half)]
    return _stack(samples, [TARGET] * half + [SOURCE] * half, batch_id)


def single_domain_batch(
    stream: SampleStream,
    batch_size: int,
    transform: Optional[Transform] = None,
    batch_id: str = "",
) -> MixedBatch:
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    transform = transform or (lambda item, domain: item)
    samples = [transform(next(stream), TARGET) for _ in range(batch_size)]
    return _stack(samples, [TARGET] * batch_size, batch_id)
