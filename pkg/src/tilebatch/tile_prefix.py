"""Compressed block-to-task mapping: inclusive prefix sums of tile counts.

The array length is rounded to a multiple of the warp size so each lane of a
warp reads one entry. Filler entries hold either the total tile count or the
largest value of the index type; in both cases a filler lane's predicate
``B >= value`` is false for every valid block index ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tilebatch.errors import CapacityError, ConfigurationError, EmptyBatchError, EmptyTaskError
from tilebatch.task_model import StrategyCatalog, Task, tile_count

INDEX_DTYPE = np.uint32
INDEX_MAX = int(np.iinfo(INDEX_DTYPE).max)

REPEAT_LAST = "repeat_last"
MAX_VALUE = "max_value"
PADDINGS = (REPEAT_LAST, MAX_VALUE)


@dataclass(frozen=True, eq=False)
class TilePrefixArray:
    values: np.ndarray
    logical_len: int
    total_tiles: int
    warp_size: int
    padding: str = REPEAT_LAST

    def __len__(self) -> int:
        return len(self.values)

    @property
    def logical(self) -> np.ndarray:
        return self.values[: self.logical_len]

    def tile_counts(self) -> list[int]:
        return np.diff(self.logical.astype(np.int64), prepend=0).tolist()

    def base(self, h: int) -> int:
        """First block index of logical task ``h`` (0-based)."""
        return int(self.values[h - 1]) if h > 0 else 0

    def to_json(self) -> dict:
        return {
            "values": self.values.tolist(),
            "logical_len": self.logical_len,
            "total_tiles": self.total_tiles,
            "warp_size": self.warp_size,
            "padding": self.padding,
        }


@dataclass(frozen=True)
class Injection:
    """Strictly increasing map from non-empty task slot to real task index.

    ``sigma[i]`` is the 1-based real task index of the ``i``-th (0-based)
    non-empty task.
    """

    sigma: tuple

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(int(s) for s in self.sigma))
        if any(b <= a for a, b in zip(self.sigma, self.sigma[1:])):
            raise ConfigurationError(f"injection must be strictly increasing: {self.sigma}")
        if self.sigma and self.sigma[0] < 1:
            raise ConfigurationError("injection targets are 1-based task indices")

    def __call__(self, h: int) -> int:
        return self.sigma[h]

    def __len__(self) -> int:
        return len(self.sigma)

    def __iter__(self):
        return iter(self.sigma)

    @classmethod
    def identity(cls, n: int) -> "Injection":
        return cls(tuple(range(1, n + 1)))

    def to_json(self) -> dict:
        return {str(i + 1): s for i, s in enumerate(self.sigma)}


def prefix_from_counts(
    counts: Sequence[int], warp_size: int = 32, padding: str = REPEAT_LAST
) -> TilePrefixArray:
    """Inclusive prefix sum of ``counts`` padded to a multiple of ``warp_size``."""
    if padding not in PADDINGS:
        raise ConfigurationError(f"unknown padding {padding!r}")
    if warp_size < 1 or warp_size & (warp_size - 1):
        raise ConfigurationError(f"warp_size must be a power of two, got {warp_size}")
    n = len(counts)
    if n == 0:
        raise EmptyBatchError("no tasks to build a prefix over")
    padded_len = -(-n // warp_size) * warp_size
    values = np.empty(padded_len, dtype=INDEX_DTYPE)
    running = 0
    for i, c in enumerate(counts):
        if c < 0:
            raise ConfigurationError(f"negative tile count {c} at task {i + 1}")
        running += int(c)
        if running > INDEX_MAX:
            raise CapacityError(f"prefix sum {running} exceeds index capacity {INDEX_MAX}")
        values[i] = running
    values[n:] = running if padding == REPEAT_LAST else INDEX_MAX
    values.setflags(write=False)
    return TilePrefixArray(values, n, running, warp_size, padding)


def build_tile_prefix(
    tasks: Sequence[Task],
    catalog: StrategyCatalog,
    warp_size: int = 32,
    padding: str = REPEAT_LAST,
) -> TilePrefixArray:
    """Prefix array over ``tasks``; every task must need at least one tile."""
    if not tasks:
        raise EmptyBatchError("no tasks to build a prefix over")
    counts = [tile_count(t, catalog) for t in tasks]
    for t, c in zip(tasks, counts):
        if c == 0:
            raise EmptyTaskError(
                f"task {t.index} is empty; use build_nonempty_tile_prefix for batches with empty tasks"
            )
    return prefix_from_counts(counts, warp_size, padding)


def build_nonempty_tile_prefix(
    tasks: Sequence[Task],
    catalog: StrategyCatalog,
    warp_size: int = 32,
    padding: str = REPEAT_LAST,
) -> tuple[TilePrefixArray, Injection]:
    """Prefix array over the non-empty tasks only, plus the slot-to-task injection."""
    counts = [tile_count(t, catalog) for t in tasks]
    sigma = [pos for pos, c in enumerate(counts, start=1) if c > 0]
    if not sigma:
        raise EmptyBatchError("every task in the batch is empty")
    prefix = prefix_from_counts([c for c in counts if c > 0], warp_size, padding)
    return prefix, Injection(tuple(sigma))
