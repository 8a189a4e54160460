"""CPU reference execution of planned batches and the naive per-expert oracle.

Task functions compute real output tiles in float64. Test data is drawn as
small integers so that every product and sum is exact and the framework can
be compared with the oracle bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial
from typing import Optional

import numpy as np

from tilebatch.dispatch import SEQUENTIAL, ExecutionTrace, TaskFuncRegistry, TileDemand, launch
from tilebatch.errors import ConfigurationError, EmptyBatchError, VerificationFailure
from tilebatch.moe_planner import NATURAL, STABLE, MoEPlan, RoutingTable, build_moe_batch
from tilebatch.task_model import Batch, GemmShape, StrategyCatalog, Task, TaskParams, TilingStrategy, default_catalog

ELEMENT_SIZE = 2  # bytes per element on the modeled device (fp16/bf16)
DEFAULT_RTOL = 1e-12


def _check_tile(l: int, strategy: TilingStrategy, m: int, n: int) -> tuple[int, int, int, int]:
    tm, tn = strategy.tile_m, strategy.tile_n
    cols = -(-n // tn)
    if not 0 <= l < -(-m // tm) * cols:
        raise AssertionError(f"tile {l} out of range for {m}x{n} with {tm}x{tn} tiles")
    # same row-major order and clipping as TilingStrategy.tile_bounds, inlined for speed
    rt, ct = divmod(l, cols)
    r0, c0 = rt * tm, ct * tn
    return r0, min(r0 + tm, m), c0, min(c0 + tn, n)


def gemm_tile_taskfunc(
    l: int, p: TaskParams, strategy: TilingStrategy, element_size: int = ELEMENT_SIZE
) -> TileDemand:
    """Compute output tile ``l`` of ``tokens[token_indices] @ weight``.

    Token rows are loaded through the index array, never from a gathered copy.
    Edge tiles are clipped to the matrix. Without data attached the tile is
    only accounted for, not computed.
    """
    m, n, k = p.shape
    r0, r1, c0, c1 = _check_tile(l, strategy, m, n)
    if p.output is not None:
        rows = p.token_indices[r0:r1]
        p.output[r0:r1, c0:c1] = p.tokens[rows] @ p.weight[:, c0:c1]
    shadow = p.extra.get("writes")
    if shadow is not None:
        view = shadow[r0:r1, c0:c1]
        np.add(view, 1, out=view)
    rows, cols = r1 - r0, c1 - c0
    return TileDemand(2.0 * rows * cols * k, float((rows * k + k * cols + rows * cols) * element_size))


def rowsum_tile_taskfunc(
    l: int, p: TaskParams, strategy: TilingStrategy, element_size: int = ELEMENT_SIZE
) -> TileDemand:
    """Reduction task: ``output[r, :] = sum(tokens[token_indices[r], :])`` over a tile of rows.

    The output is ``m x n`` with every column holding the same row sum, so the
    task tiles like any other ``m x n`` task.
    """
    m, n, k = p.shape
    r0, r1, c0, c1 = _check_tile(l, strategy, m, n)
    if p.output is not None:
        rows = p.token_indices[r0:r1]
        p.output[r0:r1, c0:c1] = p.tokens[rows].sum(axis=1, keepdims=True)
    shadow = p.extra.get("writes")
    if shadow is not None:
        view = shadow[r0:r1, c0:c1]
        np.add(view, 1, out=view)
    rows, cols = r1 - r0, c1 - c0
    return TileDemand(float(rows * k * cols), float((rows * k + rows * cols) * element_size))


def gemm_registry(catalog: StrategyCatalog, element_size: int = ELEMENT_SIZE) -> TaskFuncRegistry:
    """Every strategy of ``catalog`` runs the GEMM tile function."""
    return TaskFuncRegistry(
        {s.id: partial(gemm_tile_taskfunc, strategy=s, element_size=element_size) for s in catalog}
    )


@dataclass(eq=False)
class DeviceBuffers:
    token_matrix: np.ndarray
    weights: np.ndarray
    expert_outputs: dict
    combined: Optional[np.ndarray] = None

    @classmethod
    def from_plan(cls, plan: MoEPlan) -> "DeviceBuffers":
        params = sorted((t.params for t in plan.batch.tasks), key=lambda p: p.expert)
        if params[0].weight is None:
            raise ConfigurationError("plan has no data attached")
        weights = np.stack([p.weight for p in params])
        return cls(params[0].tokens, weights, {p.expert: p.output for p in params})


def integer_data(
    num_tokens: int, num_experts: int, weight_shape: tuple[int, int], seed: int, low: int = -8, high: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Integer-valued float64 tokens ``(T, k)`` and weights ``(N, k, n)``."""
    k, n = weight_shape
    rng = np.random.default_rng(seed)
    tokens = rng.integers(low, high + 1, size=(num_tokens, k)).astype(np.float64)
    weights = rng.integers(low, high + 1, size=(num_experts, k, n)).astype(np.float64)
    return tokens, weights


def _token_gates(routing: RoutingTable, tokens: np.ndarray, expert: int, gates: np.ndarray) -> np.ndarray:
    hit = routing.choices[tokens] == expert
    return gates[tokens][hit]


def combine(plan: MoEPlan, gates: Optional[np.ndarray] = None) -> np.ndarray:
    """Gate-weighted sum of every token's expert outputs, experts in ascending id order."""
    routing = plan.routing
    gates = routing.gates if gates is None else np.asarray(gates, dtype=np.float64)
    k, n = plan.weight_shape
    by_expert = {t.params.expert: t.params for t in plan.batch.tasks}
    dtype = next(p.output.dtype for p in by_expert.values())
    out = np.zeros((routing.num_tokens, n), dtype=dtype)
    for e in range(1, routing.num_experts + 1):
        p = by_expert[e]
        if p.shape.m == 0:
            continue
        idx = np.asarray(p.token_indices)
        out[idx] += _token_gates(routing, idx, e, gates)[:, None] * p.output
    return out


def naive_moe_oracle(
    routing: RoutingTable,
    weights: np.ndarray,
    token_matrix: np.ndarray,
    gates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Expert-by-expert loop: gather routed rows, multiply, scatter-accumulate."""
    gates = routing.gates if gates is None else np.asarray(gates, dtype=np.float64)
    n = weights.shape[2]
    out = np.zeros((routing.num_tokens, n), dtype=np.result_type(weights, token_matrix))
    for e in range(1, routing.num_experts + 1):
        hit = routing.choices == e
        tokens = np.nonzero(hit.any(axis=1))[0]
        if len(tokens) == 0:
            continue
        gathered = np.ascontiguousarray(token_matrix[tokens])
        y = gathered @ weights[e - 1]
        out[tokens] += gates[hit][:, None] * y
    return out


def indexed_gemm(
    tokens: np.ndarray, indices: np.ndarray, weight: np.ndarray, strategy: TilingStrategy
) -> np.ndarray:
    """Run every tile of one expert GEMM through the index-array task function."""
    k, n = weight.shape
    shape = GemmShape(len(indices), n, k)
    out = np.zeros((shape.m, n), dtype=np.result_type(tokens, weight))
    p = TaskParams(shape, weight=weight, token_indices=indices, tokens=tokens, output=out)
    rows, cols = strategy.grid(shape.m, n)
    for l in range(rows * cols):
        gemm_tile_taskfunc(l, p, strategy)
    return out


def materialized_gemm(tokens: np.ndarray, indices: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Copy the routed rows into a contiguous tensor first, then multiply."""
    gathered = np.ascontiguousarray(tokens[np.asarray(indices)])
    return gathered @ weight


@dataclass(eq=False)
class VerificationReport:
    tiles_executed: int
    max_abs_diff: float
    max_rel_diff: float
    exact_match: bool
    tile_cover_ok: bool
    passed: bool
    first_mismatch: Optional[list] = None
    output: Optional[np.ndarray] = field(default=None, repr=False)
    trace: Optional[ExecutionTrace] = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "tiles_executed": self.tiles_executed,
            "max_abs_diff": self.max_abs_diff,
            "max_rel_diff": self.max_rel_diff,
            "exact_match": self.exact_match,
            "tile_cover_ok": self.tile_cover_ok,
            "passed": self.passed,
            "first_mismatch": self.first_mismatch,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def compare(actual: np.ndarray, expected: np.ndarray, rtol: float = DEFAULT_RTOL):
    """``(max_abs, max_rel, exact, first differing coordinate or None, within tolerance)``."""
    if actual.shape != expected.shape:
        raise ConfigurationError(f"shape mismatch {actual.shape} vs {expected.shape}")
    diff = np.abs(actual - expected)
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = float(np.abs(expected).max()) if expected.size else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    exact = bool(np.array_equal(actual, expected))
    first = None if exact else [int(i) for i in np.argwhere(actual != expected)[0]]
    return max_abs, max_rel, exact, first, exact or max_rel <= rtol


def _tile_cover_ok(batch: Batch) -> bool:
    for t in batch.tasks:
        writes = t.params.extra.get("writes")
        if writes is not None and not (writes == 1).all():
            return False
    return True


def run_and_verify(
    routing: RoutingTable,
    weights: np.ndarray,
    token_matrix: np.ndarray,
    catalog: Optional[StrategyCatalog] = None,
    *,
    ordering: str = NATURAL,
    bucket_mode: str = STABLE,
    policy: str = SEQUENTIAL,
    gates: Optional[np.ndarray] = None,
    rtol: float = DEFAULT_RTOL,
    warp_size: int = 32,
    seed: int = 0,
    raise_on_mismatch: bool = True,
) -> VerificationReport:
    """Plan, launch, combine and compare against :func:`naive_moe_oracle`.

    Raises :class:`VerificationFailure` when the outputs differ beyond ``rtol``
    or a tile was written other than exactly once.
    """
    catalog = catalog or default_catalog()
    expected = naive_moe_oracle(routing, weights, token_matrix, gates)
    try:
        plan = build_moe_batch(
            routing, weights.shape[1:], weights, token_matrix, catalog, ordering,
            bucket_mode=bucket_mode, warp_size=warp_size, seed=seed, track_writes=True,
        )
    except EmptyBatchError:
        return VerificationReport(0, 0.0, 0.0, True, True, True, output=expected)
    trace = launch(plan.batch, gemm_registry(catalog), policy, prefix=plan.prefix, sigma=plan.sigma)
    actual = combine(plan, gates)
    max_abs, max_rel, exact, first, ok = compare(actual, expected, rtol)
    cover = _tile_cover_ok(plan.batch)
    report = VerificationReport(len(trace), max_abs, max_rel, exact, cover, ok and cover, first, actual, trace)
    if raise_on_mismatch and not report.passed:
        where = f"first differing coordinate {first}" if first else "tile cover violated"
        raise VerificationFailure(
            f"framework output differs from oracle (max abs diff {max_abs}); {where}",
            coordinate=first, report=report,
        )
    return report


def run_and_verify_batch(
    batch: Batch, seed: int = 0, policy: str = SEQUENTIAL, rtol: float = DEFAULT_RTOL
) -> VerificationReport:
    """Attach integer data to a generic GEMM batch, launch it and check each task."""
    rng = np.random.default_rng(seed)
    tasks, expected = [], []
    for t in batch.tasks:
        m, n, k = t.gemm_shape
        tokens = rng.integers(-8, 9, size=(m, k)).astype(np.float64)
        weight = rng.integers(-8, 9, size=(k, n)).astype(np.float64)
        params = TaskParams(
            t.gemm_shape, weight=weight, token_indices=np.arange(m), tokens=tokens,
            output=np.zeros((m, n)), extra={"writes": np.zeros((m, n), dtype=np.int32)},
        )
        tasks.append(Task(t.index, t.kind, t.gemm_shape, params))
        expected.append(tokens @ weight)
    data_batch = Batch(tasks, batch.catalog, batch.warp_size)
    try:
        trace = launch(data_batch, gemm_registry(batch.catalog), policy)
    except EmptyBatchError:
        return VerificationReport(0, 0.0, 0.0, True, True, True)
    flat_actual = np.concatenate([t.params.output.ravel() for t in tasks])
    flat_expected = np.concatenate([e.ravel() for e in expected])
    max_abs, max_rel, exact, first, ok = compare(flat_actual, flat_expected, rtol)
    cover = _tile_cover_ok(data_batch)
    report = VerificationReport(len(trace), max_abs, max_rel, exact, cover, ok and cover, first, None, trace)
    if not report.passed:
        raise VerificationFailure("batch output differs from direct GEMM", coordinate=first, report=report)
    return report
