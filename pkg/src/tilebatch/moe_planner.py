"""Turn one MoE inference step into a batch of expert GEMM tasks.

Each expert is a task whose ``m`` is the number of tokens routed to it. Tokens
are not gathered into contiguous per-expert tensors; instead every expert
gets a token index array and its task function loads rows of the shared token
matrix through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from tilebatch.errors import ConfigurationError, EmptyBatchError, RoutingError
from tilebatch.task_model import Batch, GemmShape, StrategyCatalog, Task, TaskParams
from tilebatch.tile_prefix import REPEAT_LAST, Injection, TilePrefixArray, build_nonempty_tile_prefix

STABLE = "stable"
SCATTER = "scatter"
BUCKET_MODES = (STABLE, SCATTER)

NATURAL = "natural"
ALTERNATING = "alternating"
HALF_INTERVAL = "half_interval"
ORDERINGS = (NATURAL, ALTERNATING, HALF_INTERVAL)

COMPUTE_BOUND = "compute"
MEMORY_BOUND = "memory"

DEFAULT_SMALL_MAX_M = 64


@dataclass(frozen=True, eq=False)
class RoutingTable:
    """Top-k expert choices per token.

    ``choices[t]`` holds the 1-based expert ids token ``t`` is routed to and
    ``gates[t]`` the matching combine weights (uniform ``1/top_k`` if omitted).
    """

    num_tokens: int
    num_experts: int
    top_k: int
    choices: np.ndarray
    gates: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.top_k < 1 or self.top_k > self.num_experts:
            raise RoutingError(f"top_k={self.top_k} must be in [1, num_experts={self.num_experts}]")
        choices = np.array(self.choices, dtype=np.int64).reshape(-1, self.top_k)
        if choices.shape != (self.num_tokens, self.top_k):
            raise RoutingError(
                f"choices shape {choices.shape} != (num_tokens, top_k) = {(self.num_tokens, self.top_k)}"
            )
        if choices.size and (choices.min() < 1 or choices.max() > self.num_experts):
            raise RoutingError(f"expert ids must lie in [1, {self.num_experts}]")
        srt = np.sort(choices, axis=1)
        if (srt[:, 1:] == srt[:, :-1]).any():
            t = int(np.nonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))[0][0])
            raise RoutingError(f"token {t} chooses the same expert twice: {choices[t].tolist()}")
        choices.setflags(write=False)
        object.__setattr__(self, "choices", choices)
        if self.gates is None:
            gates = np.full(choices.shape, 1.0 / self.top_k)
        else:
            gates = np.asarray(self.gates, dtype=np.float64)
            if gates.shape != choices.shape:
                raise RoutingError(f"gates shape {gates.shape} != choices shape {choices.shape}")
        gates.setflags(write=False)
        object.__setattr__(self, "gates", gates)

    def gate(self, token: int, expert: int) -> float:
        (pos,) = np.nonzero(self.choices[token] == expert)[0]
        return float(self.gates[token, pos])

    def loads(self) -> np.ndarray:
        """Tokens routed to each expert, indexed by ``expert - 1``."""
        return np.bincount(self.choices.ravel() - 1, minlength=self.num_experts)


@dataclass(frozen=True, eq=False)
class TokenIndexArrays:
    """Per-expert token index arrays; ``buckets[e - 1]`` belongs to expert ``e``."""

    buckets: tuple
    mode: str = STABLE

    def __len__(self) -> int:
        return len(self.buckets)

    def bucket(self, expert: int) -> np.ndarray:
        return self.buckets[expert - 1]

    def lengths(self) -> list[int]:
        return [len(b) for b in self.buckets]

    def to_json(self) -> dict:
        return {str(e): b.tolist() for e, b in enumerate(self.buckets, start=1)}


@dataclass(frozen=True)
class ExpertWorkload:
    expert: int
    load: int
    bound: str = COMPUTE_BOUND


def build_token_index_arrays(
    routing: RoutingTable,
    mode: str = STABLE,
    arrival_order: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> TokenIndexArrays:
    """Bucket token indices by expert.

    ``stable`` sorts every bucket ascending. ``scatter`` emulates an atomic
    fetch-and-add per expert counter: tokens arrive in ``arrival_order`` (a
    seeded shuffle when omitted) and each claims the next free slot of every
    bucket it is routed to. Bucket contents are identical in both modes.
    """
    if mode not in BUCKET_MODES:
        raise ConfigurationError(f"unknown bucket mode {mode!r}")
    n_tok, top_k = routing.choices.shape
    if mode == STABLE:
        flat = routing.choices.ravel() - 1
        tokens = np.repeat(np.arange(n_tok, dtype=np.int64), top_k)
        order = np.argsort(flat, kind="stable")
        bounds = np.cumsum(np.bincount(flat, minlength=routing.num_experts))[:-1]
        buckets = np.split(tokens[order], bounds)
    else:
        if arrival_order is None:
            arrival_order = np.random.default_rng(seed).permutation(n_tok)
        arrival_order = np.asarray(arrival_order, dtype=np.int64)
        if sorted(arrival_order.tolist()) != list(range(n_tok)):
            raise RoutingError("arrival_order must be a permutation of the token indices")
        loads = routing.loads()
        buckets = [np.empty(n, dtype=np.int64) for n in loads]
        counters = [0] * routing.num_experts
        for t in arrival_order.tolist():
            for e in routing.choices[t].tolist():
                slot = counters[e - 1]  # atomicAdd(&counter[e], 1)
                counters[e - 1] = slot + 1
                buckets[e - 1][slot] = t
    for b in buckets:
        b.setflags(write=False)
    return TokenIndexArrays(tuple(buckets), mode)


def gemm_bytes(m: int, n: int, k: int, element_size: int = 2) -> float:
    return float((m * k + k * n + m * n) * element_size)


def arithmetic_intensity(m: int, n: int, k: int, element_size: int = 2) -> float:
    """FLOPs per byte of an ``m x k`` by ``k x n`` GEMM with a single pass over memory."""
    if m == 0:
        return 0.0
    return 2.0 * m * n * k / gemm_bytes(m, n, k, element_size)


def expert_workloads(
    arrays: TokenIndexArrays,
    weight_shape: tuple[int, int],
    machine_balance: Optional[float] = None,
    element_size: int = 2,
) -> list[ExpertWorkload]:
    """Load and boundedness per expert.

    An expert is memory-bound when its GEMM's arithmetic intensity falls below
    ``machine_balance`` (peak FLOP/s over peak bytes/s). Without a balance every
    expert is tagged compute-bound.
    """
    k, n = weight_shape
    out = []
    for e, m in enumerate(arrays.lengths(), start=1):
        bound = COMPUTE_BOUND
        if machine_balance is not None and arithmetic_intensity(m, n, k, element_size) < machine_balance:
            bound = MEMORY_BOUND
        out.append(ExpertWorkload(e, m, bound))
    return out


def threshold_rule(catalog: StrategyCatalog, small_max_m: int = DEFAULT_SMALL_MAX_M) -> Callable[[int], int]:
    """Small-tile strategy for ``m <= small_max_m``, large-tile strategy otherwise."""
    if len(catalog) < 2:
        raise ConfigurationError("threshold rule needs at least two strategies")
    small, large = catalog.smallest.id, catalog.largest.id
    return lambda m: small if m <= small_max_m else large


def plan_expert_tasks(
    arrays: TokenIndexArrays,
    weight_shape: tuple[int, int],
    catalog: StrategyCatalog,
    select: Optional[Callable[[int], int]] = None,
) -> list[Task]:
    """One task per expert, in expert id order; empty buckets give ``m = 0`` tasks."""
    select = select or threshold_rule(catalog)
    k, n = weight_shape
    tasks = []
    for e, m in enumerate(arrays.lengths(), start=1):
        shape = GemmShape(m, n, k)
        tasks.append(Task(e, select(m), shape, TaskParams(shape, token_indices=arrays.bucket(e), expert=e)))
    return tasks


def _bit_reverse(i: int, width: int) -> int:
    r = 0
    for _ in range(width):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def half_interval_slots(n: int) -> list[int]:
    """Slot of the i-th busiest expert: van der Corput order restricted to ``[0, n)``."""
    width = max(0, (n - 1).bit_length())
    return [r for r in (_bit_reverse(j, width) for j in range(1 << width)) if r < n]


def order_experts(workloads: Sequence[ExpertWorkload], strategy: str = NATURAL) -> list[int]:
    """Permutation of expert ids giving the task order inside the batch.

    ``alternating`` interleaves the busier half with the lighter half of the
    load-descending list; ``half_interval`` spreads the busiest experts as far
    apart as possible by placing the i-th busiest at bit-reversed slot i.
    """
    if strategy not in ORDERINGS:
        raise ConfigurationError(f"unknown ordering {strategy!r}")
    ids = sorted(w.expert for w in workloads)
    if strategy == NATURAL:
        return ids
    by_load = [w.expert for w in sorted(workloads, key=lambda w: (-w.load, w.expert))]
    if strategy == ALTERNATING:
        half = -(-len(by_load) // 2)
        busy, light = by_load[:half], by_load[half:]
        order = []
        for i, b in enumerate(busy):
            order.append(b)
            if i < len(light):
                order.append(light[i])
        return order
    order = [0] * len(by_load)
    for expert, slot in zip(by_load, half_interval_slots(len(by_load))):
        order[slot] = expert
    return order


@dataclass(frozen=True, eq=False)
class MoEPlan:
    """Batch plus everything needed to launch and combine it.

    Unpacks as ``batch, prefix, sigma``.
    """

    batch: Batch
    prefix: TilePrefixArray
    sigma: Injection
    routing: RoutingTable
    arrays: TokenIndexArrays
    order: tuple
    weight_shape: tuple

    def __iter__(self):
        return iter((self.batch, self.prefix, self.sigma))

    def expert_of(self, task_index: int) -> int:
        return self.order[task_index - 1]

    @property
    def num_nonempty(self) -> int:
        return self.prefix.logical_len

    def to_json(self) -> dict:
        counts = self.batch.tile_counts()
        return {
            "num_experts": self.routing.num_experts,
            "num_nonempty": self.num_nonempty,
            "num_empty": len(self.batch) - self.num_nonempty,
            "order": list(self.order),
            "tasks": [
                {
                    "task": t.index,
                    "expert": t.params.expert,
                    "m": t.gemm_shape.m,
                    "kind": t.kind if counts[i] else None,
                    "tiles": counts[i],
                }
                for i, t in enumerate(self.batch.tasks)
            ],
            "prefix": self.prefix.to_json(),
            "sigma": self.sigma.to_json(),
        }


def build_moe_batch(
    routing: RoutingTable,
    weight_shape: tuple[int, int],
    weights: Optional[np.ndarray],
    token_matrix: Optional[np.ndarray],
    catalog: StrategyCatalog,
    ordering: str = NATURAL,
    *,
    bucket_mode: str = STABLE,
    select: Optional[Callable[[int], int]] = None,
    warp_size: int = 32,
    padding: str = REPEAT_LAST,
    seed: int = 0,
    track_writes: bool = False,
) -> MoEPlan:
    """Plan one MoE step as a batch with non-empty prefix and injection.

    ``weights`` is ``(num_experts, k, n)`` and ``token_matrix`` ``(num_tokens, k)``;
    pass ``None`` for both to plan without data (demand-only execution).
    Output buffers of shape ``(m_e, n)`` are allocated per expert, plus an
    integer write counter of the same shape when ``track_writes`` is set.
    """
    k, n = weight_shape
    if (weights is None) != (token_matrix is None):
        raise ConfigurationError("weights and token_matrix must be given together")
    if weights is not None:
        if weights.shape != (routing.num_experts, k, n):
            raise ConfigurationError(f"weights shape {weights.shape} != {(routing.num_experts, k, n)}")
        if token_matrix.shape != (routing.num_tokens, k):
            raise ConfigurationError(f"token matrix shape {token_matrix.shape} != {(routing.num_tokens, k)}")
    arrays = build_token_index_arrays(routing, bucket_mode, seed=seed)
    by_expert = plan_expert_tasks(arrays, weight_shape, catalog, select)
    order = order_experts([ExpertWorkload(t.index, t.gemm_shape.m) for t in by_expert], ordering)

    tasks = []
    for pos, e in enumerate(order, start=1):
        src = by_expert[e - 1]
        m = src.gemm_shape.m
        params = TaskParams(
            src.gemm_shape,
            weight=None if weights is None else weights[e - 1],
            token_indices=arrays.bucket(e),
            tokens=token_matrix,
            output=None if weights is None else np.zeros((m, n), dtype=np.result_type(weights, token_matrix)),
            expert=e,
            extra={"writes": np.zeros((m, n), dtype=np.int32)} if track_writes else {},
        )
        tasks.append(Task(pos, src.kind, src.gemm_shape, params))
    batch = Batch(tasks, catalog, warp_size)
    try:
        prefix, sigma = build_nonempty_tile_prefix(batch.tasks, catalog, warp_size, padding)
    except EmptyBatchError:
        raise EmptyBatchError("no tokens routed to any expert") from None
    return MoEPlan(batch, prefix, sigma, routing, arrays, tuple(order), (k, n))


def balanced_routing(num_tokens: int, num_experts: int, top_k: int) -> RoutingTable:
    """Round-robin routing: token ``t`` picks experts ``t*top_k + j (mod N)``."""
    j = np.arange(top_k)
    t = np.arange(num_tokens)[:, None]
    return RoutingTable(num_tokens, num_experts, top_k, (t * top_k + j) % num_experts + 1)


def best_case_routing(num_tokens: int, num_experts: int, top_k: int) -> RoutingTable:
    """Every token routed to experts ``1..top_k``."""
    choices = np.tile(np.arange(1, top_k + 1), (num_tokens, 1))
    return RoutingTable(num_tokens, num_experts, top_k, choices)


def worst_case_routing(num_tokens: int, num_experts: int, top_k: int) -> RoutingTable:
    """Best case, except each remaining expert steals exactly one token.

    Token ``i`` (for ``i < num_experts - top_k``) swaps its last busy expert for
    expert ``top_k + 1 + i``.
    """
    others = num_experts - top_k
    if num_tokens < others:
        raise RoutingError(f"worst case needs at least {others} tokens, got {num_tokens}")
    choices = np.tile(np.arange(1, top_k + 1), (num_tokens, 1))
    choices[np.arange(others), top_k - 1] = top_k + 1 + np.arange(others)
    return RoutingTable(num_tokens, num_experts, top_k, choices)


def random_routing(num_tokens: int, num_experts: int, top_k: int, seed: int) -> RoutingTable:
    rng = np.random.default_rng(seed)
    keys = rng.random((num_tokens, num_experts))
    choices = np.argsort(keys, axis=1)[:, :top_k] + 1
    return RoutingTable(num_tokens, num_experts, top_k, choices)


SCENARIOS = ("balanced", "best", "worst", "random")


def scenario_routing(
    scenario: str, num_tokens: int, num_experts: int, top_k: int, seed: Optional[int] = None
) -> RoutingTable:
    if scenario == "balanced":
        return balanced_routing(num_tokens, num_experts, top_k)
    if scenario == "best":
        return best_case_routing(num_tokens, num_experts, top_k)
    if scenario == "worst":
        return worst_case_routing(num_tokens, num_experts, top_k)
    if scenario == "random":
        if seed is None:
            raise ConfigurationError("random scenario requires a seed")
        return random_routing(num_tokens, num_experts, top_k, seed)
    raise ConfigurationError(f"unknown scenario {scenario!r}")
