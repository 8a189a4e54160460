"""Tasks, tiling strategies and batches.

A batch is an ordered list of tasks. Each task is a GEMM-like unit of work
whose ``m x n`` output is cut into tiles by the tiling strategy selected by
its ``kind``; one tile is computed by one thread block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, NamedTuple, Optional, Sequence

from tilebatch.errors import ConfigurationError


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class GemmShape(NamedTuple):
    m: int
    n: int
    k: int


@dataclass(frozen=True)
class TilingStrategy:
    """Output tile geometry for one task type.

    ``id`` doubles as the task-type index used to select the task function.
    """

    id: int
    tile_m: int
    tile_n: int
    name: str = ""

    def __post_init__(self):
        if self.tile_m < 1 or self.tile_n < 1:
            raise ConfigurationError(
                f"strategy {self.id}: tile dims must be >= 1, got {self.tile_m}x{self.tile_n}"
            )

    def grid(self, m: int, n: int) -> tuple[int, int]:
        """(row tiles, column tiles) covering an ``m x n`` output."""
        return ceil_div(m, self.tile_m), ceil_div(n, self.tile_n)

    def tile_bounds(self, l: int, m: int, n: int) -> tuple[int, int, int, int]:
        """Clipped ``(row0, row1, col0, col1)`` of tile ``l`` (row-major tile order)."""
        _, cols = self.grid(m, n)
        rt, ct = divmod(l, cols)
        r0, c0 = rt * self.tile_m, ct * self.tile_n
        return r0, min(r0 + self.tile_m, m), c0, min(c0 + self.tile_n, n)


class StrategyCatalog:
    """Strategies keyed by id; ids must be exactly ``1..K``."""

    def __init__(self, strategies: Iterable[TilingStrategy]):
        self._by_id = {}
        for s in strategies:
            if s.id in self._by_id:
                raise ConfigurationError(f"duplicate strategy id {s.id}")
            self._by_id[s.id] = s
        if sorted(self._by_id) != list(range(1, len(self._by_id) + 1)):
            raise ConfigurationError(
                f"strategy ids must be contiguous from 1, got {sorted(self._by_id)}"
            )

    def __getitem__(self, strategy_id: int) -> TilingStrategy:
        try:
            return self._by_id[strategy_id]
        except KeyError:
            raise ConfigurationError(f"unknown strategy id {strategy_id}") from None

    def __contains__(self, strategy_id) -> bool:
        return strategy_id in self._by_id

    def __iter__(self) -> Iterator[TilingStrategy]:
        return iter(self._by_id[i] for i in sorted(self._by_id))

    def __len__(self) -> int:
        return len(self._by_id)

    def __repr__(self) -> str:
        return f"StrategyCatalog({list(self)!r})"

    @property
    def smallest(self) -> TilingStrategy:
        return min(self, key=lambda s: (s.tile_m * s.tile_n, s.id))

    @property
    def largest(self) -> TilingStrategy:
        return max(self, key=lambda s: (s.tile_m * s.tile_n, -s.id))

    def to_json(self) -> list[dict]:
        return [{"id": s.id, "tile_m": s.tile_m, "tile_n": s.tile_n} for s in self]


def default_catalog() -> StrategyCatalog:
    """Two GEMM strategies: 16x64 tiles for light experts, 128x128 otherwise."""
    return StrategyCatalog(
        [TilingStrategy(1, 16, 64, "small"), TilingStrategy(2, 128, 128, "large")]
    )


@dataclass(frozen=True, eq=False)
class TaskParams:
    """Per-task payload handed to a task function together with the tile index.

    The array fields are handles: the task function reads ``tokens`` through
    ``token_indices``, multiplies by ``weight`` and writes into ``output``.
    Any of them may be absent for demand-only (dry run) execution.
    """

    shape: GemmShape
    weight: Any = None
    token_indices: Any = None
    tokens: Any = None
    output: Any = None
    expert: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weight is not None and tuple(self.weight.shape) != (self.shape.k, self.shape.n):
            raise ConfigurationError(
                f"weight shape {tuple(self.weight.shape)} does not match "
                f"(k, n) = {(self.shape.k, self.shape.n)}"
            )
        if self.token_indices is not None and len(self.token_indices) != self.shape.m:
            raise ConfigurationError(
                f"token index array has {len(self.token_indices)} entries, expected m={self.shape.m}"
            )


@dataclass(frozen=True, eq=False)
class Task:
    index: int
    kind: int
    gemm_shape: GemmShape
    params: Optional[TaskParams] = None

    def __post_init__(self):
        m, n, k = self.gemm_shape
        if m < 0 or n < 1 or k < 1:
            raise ConfigurationError(f"task {self.index}: invalid shape {tuple(self.gemm_shape)}")
        if self.params is None:
            object.__setattr__(self, "params", TaskParams(GemmShape(m, n, k)))
        elif tuple(self.params.shape) != tuple(self.gemm_shape):
            raise ConfigurationError(f"task {self.index}: params shape differs from gemm_shape")

    @property
    def empty(self) -> bool:
        return self.gemm_shape.m == 0


def tile_count(task: Task, catalog: StrategyCatalog) -> int:
    """Number of tiles (thread blocks) ``task`` needs under its strategy."""
    strategy = catalog[task.kind]
    rows, cols = strategy.grid(task.gemm_shape.m, task.gemm_shape.n)
    return rows * cols


@dataclass(frozen=True, eq=False)
class Batch:
    tasks: tuple
    catalog: StrategyCatalog
    warp_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        ws = self.warp_size
        if ws < 1 or ws & (ws - 1):
            raise ConfigurationError(f"warp_size must be a power of two, got {ws}")
        for pos, task in enumerate(self.tasks, start=1):
            if task.index != pos:
                raise ConfigurationError(f"task at position {pos} has index {task.index}")
            if task.kind not in self.catalog:
                raise ConfigurationError(f"task {pos}: unknown strategy id {task.kind}")

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, index: int) -> Task:
        """1-based task lookup."""
        return self.tasks[index - 1]

    def tile_counts(self) -> list[int]:
        return [tile_count(t, self.catalog) for t in self.tasks]

    @classmethod
    def from_shapes(
        cls,
        shapes: Sequence[tuple[int, int, int, int]],
        catalog: StrategyCatalog,
        warp_size: int = 32,
    ) -> "Batch":
        """Build from ``(kind, m, n, k)`` tuples."""
        tasks = [
            Task(i, kind, GemmShape(m, n, k)) for i, (kind, m, n, k) in enumerate(shapes, start=1)
        ]
        return cls(tasks, catalog, warp_size)
