import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bit_reversal_slots, lattice_tile_count, membership_buckets
from tilebatch.errors import ConfigurationError, EmptyBatchError, RoutingError
from tilebatch.moe_planner import (
    ALTERNATING,
    COMPUTE_BOUND,
    HALF_INTERVAL,
    MEMORY_BOUND,
    NATURAL,
    ORDERINGS,
    SCATTER,
    STABLE,
    ExpertWorkload,
    RoutingTable,
    TokenIndexArrays,
    balanced_routing,
    best_case_routing,
    build_moe_batch,
    build_token_index_arrays,
    expert_workloads,
    order_experts,
    plan_expert_tasks,
    random_routing,
    scenario_routing,
    worst_case_routing,
)
from tilebatch.task_model import default_catalog, tile_count


def arrays_from_lengths(lengths):
    buckets, start = [], 0
    for n in lengths:
        buckets.append(np.arange(start, start + n))
        start += n
    return TokenIndexArrays(tuple(buckets))


def test_bucket_small_example():
    r = RoutingTable(2, 3, 2, [[1, 3], [2, 3]])
    for mode in (STABLE, SCATTER):
        arr = build_token_index_arrays(r, mode)
        got = {e: sorted(arr.bucket(e).tolist()) for e in (1, 2, 3)}
        assert got == {1: [0], 2: [1], 3: [0, 1]}


def test_best_case_bucket_shape():
    arr = build_token_index_arrays(best_case_routing(50, 10, 3))
    assert arr.lengths() == [50, 50, 50] + [0] * 7


def test_random_routing_full_scale_membership():
    r = random_routing(4096, 64, 8, seed=1)
    arr = build_token_index_arrays(r)
    assert sum(arr.lengths()) == 32768
    ref = membership_buckets(r.choices.tolist(), 64)
    assert {e: arr.bucket(e).tolist() for e in range(1, 65)} == ref


@given(seed=st.integers(0, 2**16), tokens=st.integers(1, 60), experts=st.integers(1, 12), data=st.data())
def test_scatter_contents_equal_stable(seed, tokens, experts, data):
    k = data.draw(st.integers(1, experts))
    r = random_routing(tokens, experts, k, seed)
    stable = build_token_index_arrays(r, STABLE)
    arrival = data.draw(st.permutations(range(tokens)))
    scatter = build_token_index_arrays(r, SCATTER, arrival_order=arrival)
    ref = membership_buckets(r.choices.tolist(), experts)
    for e in range(1, experts + 1):
        assert stable.bucket(e).tolist() == ref[e]
        assert sorted(scatter.bucket(e).tolist()) == ref[e]
        # scatter order follows arrival order
        pos = {t: i for i, t in enumerate(arrival)}
        assert [pos[t] for t in scatter.bucket(e)] == sorted(pos[t] for t in ref[e])


def test_stable_buckets_deterministic():
    r = random_routing(300, 16, 4, seed=9)
    a = build_token_index_arrays(r).to_json()
    b = build_token_index_arrays(r).to_json()
    assert a == b


@pytest.mark.parametrize(
    "choices, n, k",
    [
        ([[1, 4]], 3, 2),  # id out of range
        ([[0, 1]], 3, 2),
        ([[2, 2]], 3, 2),  # duplicate
        ([[1, 2, 3]], 2, 3),  # top_k > N
        ([[1], [2]], 3, 2),  # wrong shape
    ],
)
def test_routing_validation(choices, n, k):
    with pytest.raises(RoutingError):
        RoutingTable(len(choices), n, k, choices)


def test_plan_threshold_example():
    cat = default_catalog()
    weight_shape = (32, 128)
    tasks = plan_expert_tasks(arrays_from_lengths([0, 1, 500]), weight_shape, cat)
    counts = [tile_count(t, cat) for t in tasks]
    assert [t.gemm_shape.m for t in tasks] == [0, 1, 500]
    assert [t.kind for t in tasks[1:]] == [1, 2]
    small, large = cat[1], cat[2]
    assert counts == [
        0,
        lattice_tile_count(1, 128, small.tile_m, small.tile_n),
        lattice_tile_count(500, 128, large.tile_m, large.tile_n),
    ] == [0, 2, 4]


def test_plan_single_nonempty():
    tasks = plan_expert_tasks(arrays_from_lengths([0, 0, 9, 0]), (8, 8), default_catalog())
    assert [t.empty for t in tasks] == [True, True, False, True]


def test_plan_balanced_full_scale():
    cat = default_catalog()
    arr = build_token_index_arrays(balanced_routing(4096, 64, 8))
    assert set(arr.lengths()) == {512}
    tasks = plan_expert_tasks(arr, (3584, 2560), cat)
    assert {t.kind for t in tasks} == {2}
    counts = {tile_count(t, cat) for t in tasks}
    assert counts == {lattice_tile_count(512, 2560, 128, 128)} == {80}


def test_threshold_boundary():
    tasks = plan_expert_tasks(arrays_from_lengths([64, 65]), (8, 8), default_catalog())
    assert [t.kind for t in tasks] == [1, 2]


def test_boundedness_tag():
    arr = arrays_from_lengths([1, 4000])
    w = expert_workloads(arr, (1024, 1024), machine_balance=200.0)
    assert [x.bound for x in w] == [MEMORY_BOUND, COMPUTE_BOUND]
    assert [x.load for x in w] == [1, 4000]


def wl(loads):
    return [ExpertWorkload(e, m) for e, m in enumerate(loads, start=1)]


def test_order_equal_loads():
    for s in ORDERINGS:
        order = order_experts(wl([5] * 6), s)
        assert sorted(order) == list(range(1, 7))
    assert order_experts(wl([5] * 6), NATURAL) == list(range(1, 7))


def test_order_alternating_example():
    # a=1 (9), b=2 (1), c=3 (8), d=4 (2) -> [a, d, c, b]
    assert order_experts(wl([9, 1, 8, 2]), ALTERNATING) == [1, 4, 3, 2]


def test_order_half_interval_example():
    loads = list(range(8, 0, -1))  # expert i has load 9 - i
    order = order_experts(wl(loads), HALF_INTERVAL)
    slots = bit_reversal_slots(3)
    assert slots == [0, 4, 2, 6, 1, 5, 3, 7]
    for rank, slot in enumerate(slots):
        assert order[slot] == rank + 1


def test_half_interval_ties_lower_id_first():
    order = order_experts(wl([3, 7, 7, 1]), HALF_INTERVAL)
    # by load: 2, 3, 1, 4 -> slots 0, 2, 1, 3
    assert order == [2, 1, 3, 4]


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=80), st.sampled_from(ORDERINGS))
def test_order_is_permutation(loads, strategy):
    order = order_experts(wl(loads), strategy)
    assert sorted(order) == list(range(1, len(loads) + 1))


def test_unknown_ordering():
    with pytest.raises(ConfigurationError):
        order_experts(wl([1]), "zigzag")


def test_worst_case_full_scale():
    r = worst_case_routing(4096, 64, 8)
    loads = r.loads().tolist()
    assert sorted(loads)[:56] == [1] * 56
    assert sum(loads) == 4096 * 8
    plan = build_moe_batch(r, (3584, 2560), None, None, default_catalog())
    assert plan.num_nonempty == 64 and len(plan.sigma) == 64
    assert {t.kind for t in plan.batch.tasks} == {1, 2}


def test_best_case_full_scale():
    r = best_case_routing(4096, 64, 8)
    plan = build_moe_batch(r, (3584, 2560), None, None, default_catalog(), HALF_INTERVAL)
    batch, prefix, sigma = plan
    assert prefix.logical_len == 8 and len(sigma) == 8
    assert len(batch) - plan.num_nonempty == 56
    assert sorted(plan.expert_of(h) for h in sigma) == list(range(1, 9))
    js = plan.to_json()
    assert js["num_empty"] == 56 and sum(t["kind"] is None for t in js["tasks"]) == 56


def test_zero_tokens_empty_batch():
    r = RoutingTable(0, 4, 2, np.zeros((0, 2), dtype=int))
    with pytest.raises(EmptyBatchError):
        build_moe_batch(r, (4, 4), None, None, default_catalog())


def test_moe_batch_wires_params():
    rng = np.random.default_rng(0)
    r = random_routing(40, 6, 2, seed=4)
    W = rng.integers(-8, 9, size=(6, 5, 3)).astype(float)
    X = rng.integers(-8, 9, size=(40, 5)).astype(float)
    plan = build_moe_batch(r, (5, 3), W, X, default_catalog(), ALTERNATING)
    for t in plan.batch.tasks:
        e = t.params.expert
        assert e == plan.expert_of(t.index)
        assert t.params.weight is W[e - 1] or np.shares_memory(t.params.weight, W)
        assert t.params.token_indices.tolist() == plan.arrays.bucket(e).tolist()
        assert t.params.output.shape == (t.gemm_shape.m, 3)
    with pytest.raises(ConfigurationError):
        build_moe_batch(r, (5, 3), W, None, default_catalog())


def test_random_scenario_needs_seed():
    with pytest.raises(ConfigurationError):
        scenario_routing("random", 10, 4, 2)
    assert scenario_routing("random", 10, 4, 2, seed=3).choices.shape == (10, 2)
