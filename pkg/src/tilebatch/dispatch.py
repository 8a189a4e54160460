"""Single-launch batching of heterogeneous tasks.

Every thread block decompresses its block index into a (task, tile) pair,
resolves the real task through the non-empty injection, and calls the task
function registered for that task's type with ``(tile index, task params)``.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from tilebatch.errors import ConfigurationError, DispatchError, TileBatchError
from tilebatch.simt import map_block
from tilebatch.task_model import Batch, StrategyCatalog, TaskParams
from tilebatch.tile_prefix import (
    REPEAT_LAST,
    Injection,
    TilePrefixArray,
    build_nonempty_tile_prefix,
)

SEQUENTIAL = "sequential"
PARALLEL = "parallel"
POLICIES = (SEQUENTIAL, PARALLEL)


class TileDemand(NamedTuple):
    """Resources one tile consumed: floating point operations and bytes moved."""

    flops: float
    bytes: float


TaskFunc = Callable[[int, TaskParams], Optional[TileDemand]]


class TaskFuncRegistry:
    """Task functions keyed by strategy id (the task type)."""

    def __init__(self, functions: Mapping[int, TaskFunc]):
        self.functions = dict(functions)

    def __getitem__(self, kind: int) -> TaskFunc:
        try:
            return self.functions[kind]
        except KeyError:
            raise DispatchError(f"no task function registered for task type {kind}") from None

    def __contains__(self, kind) -> bool:
        return kind in self.functions

    def __len__(self) -> int:
        return len(self.functions)

    def validate(self, catalog: StrategyCatalog) -> None:
        ids = sorted(s.id for s in catalog)
        if sorted(self.functions) != ids:
            raise ConfigurationError(
                f"registry covers types {sorted(self.functions)}, catalog defines {ids}"
            )


class DispatchRecord(NamedTuple):
    """One executed block of a launch."""

    block: int
    slot: int  # 0-based index into the prefix's logical tasks
    task: int  # 1-based real task index
    kind: int
    tile: int
    flops: Optional[float] = None
    bytes: Optional[float] = None


def _dispatch(batch, prefix, sigma, registry, block):
    mapping = map_block(prefix, block)
    hs = np.atleast_1d(mapping.task_index)
    ls = np.atleast_1d(mapping.tile_index)
    bs = np.atleast_1d(mapping.block_index)
    records = []
    resolved = {}  # slot -> (real task, task, task function)
    for b, h, l in zip(bs.tolist(), hs.tolist(), ls.tolist()):
        entry = resolved.get(h)
        if entry is None:
            task = batch.task(sigma(h))
            entry = resolved[h] = (task.index, task, registry[task.kind])
        real, task, fn = entry
        try:
            demand = fn(l, task.params)
        except TileBatchError:
            raise
        except Exception as exc:
            raise DispatchError(f"block {b} (task {real}, tile {l}) failed: {exc}", block=b) from exc
        flops, nbytes = (None, None) if demand is None else demand
        records.append(DispatchRecord(b, h, real, task.kind, l, flops, nbytes))
    return records if np.ndim(block) else records[0]


def dispatch_block(batch: Batch, prefix: TilePrefixArray, registry: TaskFuncRegistry, block):
    """Run the task function owning ``block`` in a batch without empty tasks.

    ``block`` may be an array of indices, in which case a list of records is
    returned in the same order.
    """
    if prefix.logical_len != len(batch):
        raise ConfigurationError(
            f"prefix covers {prefix.logical_len} tasks but the batch has {len(batch)}; "
            "batches with empty tasks need dispatch_block_extended"
        )
    return _dispatch(batch, prefix, Injection.identity(len(batch)), registry, block)


def dispatch_block_extended(
    batch: Batch,
    prefix: TilePrefixArray,
    sigma: Injection,
    registry: TaskFuncRegistry,
    block,
):
    """Like :func:`dispatch_block` but ``prefix`` covers only the non-empty tasks.

    The mapped slot ``h`` is translated to the real task ``sigma(h)``.
    """
    if len(sigma) != prefix.logical_len:
        raise ConfigurationError(
            f"injection has {len(sigma)} entries, prefix covers {prefix.logical_len} tasks"
        )
    if sigma.sigma and sigma.sigma[-1] > len(batch):
        raise ConfigurationError(f"injection targets task {sigma.sigma[-1]} beyond the batch")
    return _dispatch(batch, prefix, sigma, registry, block)


@dataclass(frozen=True, eq=False)
class ExecutionTrace:
    records: tuple
    prefix: TilePrefixArray
    sigma: Injection

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def total_tiles(self) -> int:
        return self.prefix.total_tiles

    def demands(self) -> tuple[np.ndarray, np.ndarray]:
        flops = np.array([r.flops if r.flops is not None else np.nan for r in self.records])
        nbytes = np.array([r.bytes if r.bytes is not None else np.nan for r in self.records])
        return flops, nbytes

    def to_json(self) -> dict:
        return {
            "total_tiles": self.total_tiles,
            "num_nonempty": self.prefix.logical_len,
            "records": [r._asdict() for r in self.records],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["block", "slot", "task", "kind", "tile", "flops", "bytes"])
        for r in self.records:
            writer.writerow([r.block, r.slot, r.task, r.kind, r.tile, r.flops, r.bytes])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _check_exactly_once(records, prefix: TilePrefixArray) -> None:
    counts = prefix.tile_counts()
    seen = set()
    for r in records:
        key = (r.slot, r.tile)
        if key in seen or not 0 <= r.tile < counts[r.slot]:
            raise AssertionError(f"block {r.block} dispatched task slot {r.slot} tile {r.tile} twice or out of range")
        seen.add(key)
    if len(seen) != prefix.total_tiles:
        raise AssertionError(f"{len(seen)} tiles dispatched, expected {prefix.total_tiles}")


def launch(
    batch: Batch,
    registry: TaskFuncRegistry,
    policy: str = SEQUENTIAL,
    *,
    prefix: Optional[TilePrefixArray] = None,
    sigma: Optional[Injection] = None,
    padding: str = REPEAT_LAST,
    workers: int = 4,
) -> ExecutionTrace:
    """Simulate one kernel launch with a block per tile of every non-empty task.

    The returned trace is sorted by block index regardless of policy. Each
    (task, tile) pair is checked to have run exactly once, which also makes
    the output regions written by concurrent blocks disjoint.
    """
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown execution policy {policy!r}")
    if prefix is None or sigma is None:
        prefix, sigma = build_nonempty_tile_prefix(batch.tasks, batch.catalog, batch.warp_size, padding)
    kinds = {batch.task(i).kind for i in sigma}
    missing = sorted(k for k in kinds if k not in registry)
    if missing:
        raise DispatchError(f"registry lacks task functions for types {missing}")

    blocks = np.arange(prefix.total_tiles, dtype=np.int64)
    if policy == SEQUENTIAL:
        records = dispatch_block_extended(batch, prefix, sigma, registry, blocks)
    else:
        parts = [p for p in np.array_split(blocks, max(1, min(workers * 4, len(blocks)))) if len(p)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = pool.map(
                lambda part: dispatch_block_extended(batch, prefix, sigma, registry, part), parts
            )
            records = [r for chunk in chunks for r in chunk]
        records.sort(key=lambda r: r.block)
    _check_exactly_once(records, prefix)
    return ExecutionTrace(tuple(records), prefix, sigma)
