"""Warp-level decompression of the tile prefix array.

Each lane ``t`` of a warp loads ``prefix[t]`` and evaluates ``B >= prefix[t]``.
The warp vote packs those predicates into a bit mask and its population count
is the number of tasks that end at or before block ``B``, which is exactly the
0-based index ``h`` of the task owning the block. The tile index is the offset
of ``B`` past the previous task's prefix entry.

Prefix arrays longer than one warp are scanned chunk by chunk, stopping at the
first chunk whose vote is not all ones.

Every function accepts either a single block index or an array of them. An
array is evaluated in lockstep, one warp per block, which is how the blocks of
a launch run concurrently on the device.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from tilebatch.errors import ConfigurationError, MappingRangeError
from tilebatch.tile_prefix import TilePrefixArray

MAX_WARP_SIZE = 64


@dataclass(frozen=True)
class MappingResult:
    """``(h, l)`` for block ``B``; fields are arrays when several blocks were mapped."""

    task_index: Any
    tile_index: Any
    block_index: Any

    def __iter__(self):
        return iter((self.task_index, self.tile_index))


def check_warp_size(warp_size: int) -> None:
    if not 1 <= warp_size <= MAX_WARP_SIZE or warp_size & (warp_size - 1):
        raise ConfigurationError(
            f"warp_size must be a power of two in [1, {MAX_WARP_SIZE}], got {warp_size}"
        )


def warp_vote(predicates):
    """Ballot over the last axis: bit ``t`` is set iff lane ``t``'s predicate holds.

    A 1-D input is one warp and yields an ``int``; higher-rank input is a
    stack of warps and yields a ``uint64`` array of masks.
    """
    p = np.asarray(predicates, dtype=bool)
    check_warp_size(p.shape[-1])
    # pack lane bits little-endian into 8 bytes and read them back as one uint64
    packed = np.packbits(p, axis=-1, bitorder="little")
    buf = np.zeros(p.shape[:-1] + (8,), dtype=np.uint8)
    buf[..., : packed.shape[-1]] = packed
    masks = buf.view("<u8")[..., 0]
    return int(masks) if p.ndim == 1 else masks


def popcount(mask):
    """Number of set bits, for an ``int`` or an unsigned integer array."""
    if isinstance(mask, (int, np.integer)):
        if mask < 0:
            raise ValueError("mask must be non-negative")
        return int(mask).bit_count()
    return np.bitwise_count(np.asarray(mask, dtype=np.uint64)).astype(np.int64)


def _as_blocks(prefix: TilePrefixArray, block) -> tuple[np.ndarray, bool]:
    scalar = np.ndim(block) == 0
    blocks = np.atleast_1d(np.asarray(block, dtype=np.int64))
    out = (blocks < 0) | (blocks >= prefix.total_tiles)
    if out.any():
        raise MappingRangeError(
            f"block index {int(blocks[out][0])} outside [0, {prefix.total_tiles})"
        )
    return blocks, scalar


def _scan(prefix: TilePrefixArray, block, max_chunks=None) -> MappingResult:
    blocks, scalar = _as_blocks(prefix, block)
    ws = prefix.warp_size
    check_warp_size(ws)
    values = prefix.values.astype(np.int64)
    h = np.zeros(blocks.shape, dtype=np.int64)
    active = np.arange(blocks.size)  # warps still scanning
    for chunk, start in enumerate(range(0, len(values), ws)):
        if max_chunks is not None and chunk >= max_chunks:
            break
        if active.size == 0:
            break
        # lane t of each block's warp: p = B >= prefix[start + t]
        preds = blocks[active, None] >= values[None, start : start + ws]
        counts = popcount(warp_vote(preds))
        h[active] += counts
        active = active[counts == ws]
    k = np.where(h > 0, values[np.maximum(h - 1, 0)], 0)
    l = blocks - k
    if scalar:
        return MappingResult(int(h[0]), int(l[0]), int(blocks[0]))
    return MappingResult(h, l, blocks)


def map_block_single_warp(prefix: TilePrefixArray, block) -> MappingResult:
    """One pass of one warp; the prefix must fit in a single warp."""
    if len(prefix) != prefix.warp_size:
        raise ConfigurationError(
            f"prefix of {prefix.logical_len} tasks spans {len(prefix) // prefix.warp_size} "
            "warp-widths; use map_block_chunked"
        )
    return _scan(prefix, block, max_chunks=1)


def map_block_chunked(prefix: TilePrefixArray, block) -> MappingResult:
    """Loop the warp over successive ``warp_size`` chunks of the prefix."""
    return _scan(prefix, block)


def map_block(prefix: TilePrefixArray, block) -> MappingResult:
    if len(prefix) == prefix.warp_size:
        return map_block_single_warp(prefix, block)
    return map_block_chunked(prefix, block)


def map_block_in_block(
    prefix: TilePrefixArray, block, num_warps: int = 4, broadcast: bool = True
) -> MappingResult:
    """Mapping as seen by every warp of a thread block.

    With ``broadcast`` warp 0 computes the mapping and the others read it back
    from shared memory; otherwise every warp runs the scan itself. Both modes
    must agree.
    """
    if num_warps < 1:
        raise ConfigurationError("num_warps must be >= 1")
    if broadcast:
        per_warp = [map_block(prefix, block)] * num_warps
    else:
        per_warp = [map_block(prefix, block) for _ in range(num_warps)]
    first = per_warp[0]
    for other in per_warp[1:]:
        if not (
            np.array_equal(other.task_index, first.task_index)
            and np.array_equal(other.tile_index, first.tile_index)
        ):
            raise AssertionError(f"warps disagree on block {block}")
    return first
