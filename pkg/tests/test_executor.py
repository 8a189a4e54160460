import numpy as np
import pytest

from oracles import membership_buckets, naive_matmul
from tilebatch import executor
from tilebatch.dispatch import PARALLEL, SEQUENTIAL, launch
from tilebatch.errors import VerificationFailure
from tilebatch.executor import (
    ELEMENT_SIZE,
    DeviceBuffers,
    gemm_tile_taskfunc,
    indexed_gemm,
    integer_data,
    materialized_gemm,
    naive_moe_oracle,
    run_and_verify,
    run_and_verify_batch,
)
from tilebatch.moe_planner import (
    BUCKET_MODES,
    ORDERINGS,
    RoutingTable,
    balanced_routing,
    best_case_routing,
    build_moe_batch,
    random_routing,
    worst_case_routing,
)
from tilebatch.task_model import Batch, GemmShape, TaskParams, TilingStrategy, default_catalog


def test_scalar_gemm():
    p = TaskParams(
        GemmShape(1, 1, 1),
        weight=np.array([[3.0]]),
        token_indices=np.array([0]),
        tokens=np.array([[2.0]]),
        output=np.zeros((1, 1)),
    )
    d = gemm_tile_taskfunc(0, p, TilingStrategy(1, 16, 64))
    assert p.output[0, 0] == 6.0
    assert d.flops == 2.0 and d.bytes == 3 * ELEMENT_SIZE


def test_identity_weight():
    rng = np.random.default_rng(2)
    tokens = rng.integers(-8, 9, size=(30, 12)).astype(float)
    idx = np.array([4, 0, 29, 7, 7, 13])
    out = indexed_gemm(tokens, idx, np.eye(12), TilingStrategy(1, 4, 5))
    assert np.array_equal(out, tokens[idx])


def test_edge_tiles_against_triple_loop():
    rng = np.random.default_rng(8)
    tokens = rng.integers(-8, 9, size=(100, 33)).astype(float)
    weight = rng.integers(-8, 9, size=(33, 70)).astype(float)
    s = TilingStrategy(1, 64, 32)
    assert s.grid(100, 70) == (2, 3)
    out = indexed_gemm(tokens, np.arange(100), weight, s)
    assert out.tolist() == naive_matmul(tokens.tolist(), weight.tolist())


def test_tile_demand_clipped():
    s = TilingStrategy(1, 64, 32)
    p = TaskParams(GemmShape(100, 70, 33))
    d = gemm_tile_taskfunc(5, p, s)  # 36 x 6 corner tile
    assert d.flops == 2 * 36 * 6 * 33
    assert d.bytes == (36 * 33 + 33 * 6 + 36 * 6) * ELEMENT_SIZE
    with pytest.raises(AssertionError):
        gemm_tile_taskfunc(6, p, s)


def test_oracle_top1_rows_are_expert_rows():
    rng = np.random.default_rng(1)
    tokens, weights = integer_data(20, 4, (6, 5), seed=1)
    r = RoutingTable(20, 4, 1, rng.integers(1, 5, size=(20, 1)), gates=np.full((20, 1), 0.5))
    out = naive_moe_oracle(r, weights, tokens)
    for t in range(20):
        e = int(r.choices[t, 0])
        assert out[t].tolist() == (0.5 * (tokens[t] @ weights[e - 1])).tolist()


def test_oracle_two_experts_average():
    tokens, weights = integer_data(10, 2, (4, 3), seed=3)
    r = RoutingTable(10, 2, 2, [[1, 2]] * 10)
    out = naive_moe_oracle(r, weights, tokens)
    expected = (tokens @ weights[0] + tokens @ weights[1]) / 2
    assert np.array_equal(out, expected)


def test_oracle_honours_gates_independently():
    tokens, weights = integer_data(6, 3, (4, 2), seed=5)
    choices = [[1, 3], [2, 1], [3, 2], [1, 2], [3, 1], [2, 3]]
    gates = np.array([[0.25, 0.75]] * 6)
    r = RoutingTable(6, 3, 2, choices, gates)
    out = naive_moe_oracle(r, weights, tokens)
    for t, (a, b) in enumerate(choices):
        ref = 0.25 * (tokens[t] @ weights[a - 1]) + 0.75 * (tokens[t] @ weights[b - 1])
        assert np.allclose(out[t], ref, rtol=0, atol=1e-12)


def test_balanced_scaled_bit_exact():
    r = balanced_routing(256, 8, 2)
    tokens, weights = integer_data(256, 8, (64, 48), seed=7)
    rep = run_and_verify(r, weights, tokens)
    assert rep.exact_match and rep.max_abs_diff == 0.0 and rep.passed and rep.tile_cover_ok
    assert rep.tiles_executed == len(rep.trace) > 0


@pytest.mark.parametrize("ordering", ORDERINGS)
@pytest.mark.parametrize("mode", BUCKET_MODES)
def test_all_generators_all_orderings(ordering, mode):
    tokens, weights = integer_data(300, 16, (24, 40), seed=11)
    for r in (
        balanced_routing(300, 16, 4),
        best_case_routing(300, 16, 4),
        worst_case_routing(300, 16, 4),
        random_routing(300, 16, 4, seed=2),
    ):
        rep = run_and_verify(r, weights, tokens, ordering=ordering, bucket_mode=mode, seed=3)
        assert rep.exact_match


def test_real_valued_data_within_tolerance():
    rng = np.random.default_rng(4)
    tokens = rng.standard_normal((200, 96))
    weights = rng.standard_normal((8, 96, 80))
    r = random_routing(200, 8, 2, seed=6)
    gates = rng.random((200, 2))
    rep = run_and_verify(r, weights, tokens, gates=gates, rtol=1e-12)
    assert rep.passed and rep.max_rel_diff <= 1e-12


def test_empty_batch_vacuous():
    r = RoutingTable(0, 4, 2, np.zeros((0, 2), dtype=int))
    tokens, weights = integer_data(0, 4, (4, 4), seed=0)
    rep = run_and_verify(r, weights, tokens)
    assert rep.tiles_executed == 0 and rep.exact_match and rep.passed


def test_mismatch_reports_coordinate(monkeypatch):
    real = executor.gemm_tile_taskfunc

    def corrupt(l, p, strategy, element_size=ELEMENT_SIZE):
        d = real(l, p, strategy, element_size)
        if p.expert == 3 and l == 0:
            p.output[0, 0] += 1.0
        return d

    monkeypatch.setattr(executor, "gemm_tile_taskfunc", corrupt)
    r = balanced_routing(32, 4, 2)
    tokens, weights = integer_data(32, 4, (8, 8), seed=1)
    with pytest.raises(VerificationFailure) as info:
        run_and_verify(r, weights, tokens)
    first_token = int(membership_buckets(r.choices.tolist(), 4)[3][0])
    assert info.value.coordinate == [first_token, 0]
    assert not info.value.report.passed


def test_tile_cover_shadow_buffer():
    r = random_routing(500, 12, 3, seed=8)
    tokens, weights = integer_data(500, 12, (16, 200), seed=2)
    plan = build_moe_batch(r, (16, 200), weights, tokens, default_catalog(), track_writes=True)
    launch(plan.batch, executor.gemm_registry(plan.batch.catalog), prefix=plan.prefix, sigma=plan.sigma)
    for t in plan.batch.tasks:
        w = t.params.extra["writes"]
        assert w.shape == (t.gemm_shape.m, 200) and (w == 1).all()


def test_ordering_invariance_of_output():
    r = worst_case_routing(128, 16, 4)
    tokens, weights = integer_data(128, 16, (32, 24), seed=9)
    outs = [run_and_verify(r, weights, tokens, ordering=o).output for o in ORDERINGS]
    traces = [run_and_verify(r, weights, tokens, ordering=o).trace.to_csv() for o in ORDERINGS]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])
    assert len(set(traces)) > 1


def test_parallel_equals_sequential():
    r = random_routing(400, 10, 2, seed=12)
    tokens, weights = integer_data(400, 10, (32, 96), seed=4)
    seq = run_and_verify(r, weights, tokens, policy=SEQUENTIAL)
    par = run_and_verify(r, weights, tokens, policy=PARALLEL)
    assert seq.output.tobytes() == par.output.tobytes()
    assert seq.trace.dumps() == par.trace.dumps()


def test_device_buffers_from_plan():
    r = random_routing(50, 5, 2, seed=1)
    tokens, weights = integer_data(50, 5, (4, 6), seed=2)
    plan = build_moe_batch(r, (4, 6), weights, tokens, default_catalog(), "half_interval")
    buf = DeviceBuffers.from_plan(plan)
    assert np.array_equal(buf.weights, weights) and buf.token_matrix is tokens
    assert sorted(buf.expert_outputs) == [1, 2, 3, 4, 5]


def test_gather_equivalence_examples():
    rng = np.random.default_rng(13)
    for _ in range(10):
        tokens = rng.integers(-8, 9, size=(90, 17)).astype(float)
        w = rng.integers(-8, 9, size=(17, 45)).astype(float)
        idx = rng.choice(90, size=int(rng.integers(1, 90)), replace=False)
        for s in default_catalog():
            assert np.array_equal(indexed_gemm(tokens, idx, w, s), materialized_gemm(tokens, idx, w))


def test_generic_batch_verify():
    b = Batch.from_shapes([(1, 40, 70, 9), (2, 0, 8, 8), (2, 130, 129, 3)], default_catalog(), 8)
    rep = run_and_verify_batch(b, seed=2)
    assert rep.exact_match and rep.tile_cover_ok
    assert rep.tiles_executed == 3 * 2 + 2 * 2


def test_tile_check_matches_strategy_bounds():
    for tm, tn, m, n in [(64, 32, 100, 70), (16, 64, 1, 2560), (128, 128, 512, 2560), (3, 5, 7, 11)]:
        s = TilingStrategy(1, tm, tn)
        rows, cols = s.grid(m, n)
        for l in range(rows * cols):
            assert executor._check_tile(l, s, m, n) == s.tile_bounds(l, m, n)
