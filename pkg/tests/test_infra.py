import itertools
import logging
from fractions import Fraction

import numpy as np
import pytest

from mugv.errors import ConfigurationError, DimensionError, InputError
from mugv.infra import (ClusterSpec, ModelSpec, balance_batches, bubble_fraction, composed_modulate,
                        factor_triples, fused_modulate, plan_parallelism, rank_loads, round_robin,
                        simulate_pipeline)


def brute_force_makespan(costs, ranks):
    best = float("inf")
    for assign in itertools.product(range(ranks), repeat=len(costs)):
        best = min(best, max(rank_loads(costs, assign, ranks)))
    return best


def test_lpt_worked_example():
    costs = [8, 7, 6, 5, 4, 3, 2, 1]
    assert rank_loads(costs, balance_batches(costs, 2), 2) == [18, 18]


@pytest.mark.parametrize("seed", range(6))
def test_lpt_within_graham_bound(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    ranks = int(rng.integers(2, 4))
    costs = [int(c) for c in rng.integers(1, 20, n)]
    lpt = max(rank_loads(costs, balance_batches(costs, ranks), ranks))
    assert lpt <= Fraction(4, 3) * brute_force_makespan(costs, ranks)
    assert lpt <= max(rank_loads(costs, round_robin(costs, ranks), ranks))


def test_lpt_edge_cases(caplog):
    assert rank_loads([5] * 6, balance_batches([5] * 6, 3), 3) == [10, 10, 10]
    assert balance_batches([3, 1, 2], 1) == [0, 0, 0]
    with caplog.at_level(logging.WARNING):
        assert sorted(balance_batches([1, 2], 4)) == [0, 1]
    assert "empty" in caplog.text
    for bad in ([], [1, 0]):
        with pytest.raises(InputError):
            balance_batches(bad, 2)
    with pytest.raises(InputError):
        balance_batches([1], 0)


def test_factor_triples():
    triples = factor_triples(8)
    assert len(triples) == 10 and len(set(triples)) == 10
    assert all(a * b * c == 8 for a, b, c in triples)
    assert factor_triples(1) == [(1, 1, 1)]


def test_plan_world_one_has_no_communication():
    plans = plan_parallelism(ModelSpec(4, 64, 256, 8), ClusterSpec(1), 4)
    assert len(plans) == 1
    p = plans[0]
    assert (p.dp, p.tp, p.pp) == (1, 1, 1) and p.comm_time == 0 and p.bubble_fraction == 0


def test_plans_sorted_and_zero_comm_monotone():
    model = ModelSpec(16, 1024, 4096, 32)
    plans = plan_parallelism(model, ClusterSpec(16), 8)
    times = [p.step_time for p in plans]
    assert times == sorted(times)
    free = ClusterSpec(16, intra_bandwidth=1e30, inter_bandwidth=1e30)
    fast = {(p.dp, p.tp, p.pp): p.step_time for p in plan_parallelism(model, free, 8)}
    for p in plans:
        assert fast[(p.dp, p.tp, p.pp)] <= p.step_time
    with pytest.raises(ConfigurationError):
        ClusterSpec(0)
    with pytest.raises(ConfigurationError):
        ModelSpec(0, 1, 1, 1)
    with pytest.raises(InputError):
        plan_parallelism(model, ClusterSpec(2), 0)


def test_bubble_example():
    assert bubble_fraction(2, 8) == pytest.approx(1 / 9)
    assert simulate_pipeline([Fraction(1)] * 2, 8).bubble_fraction == Fraction(1, 9)


@pytest.mark.parametrize("pp", range(1, 5))
def test_simulator_matches_closed_form_exactly(pp):
    for m in range(1, 9):
        tl = simulate_pipeline([Fraction(3, 2)] * pp, m)
        assert tl.bubble_fraction == Fraction(pp - 1, m + pp - 1)
        assert tl.makespan == Fraction(3, 2) * (m + pp - 1)
        assert all(b == Fraction(3, 2) * m for b in tl.busy)
        assert len(tl.events) == pp * m


def test_simulator_busy_time_and_ordering():
    times = [Fraction(1), Fraction(3), Fraction(2)]
    tl = simulate_pipeline(times, 5)
    assert tl.busy == [t * 5 for t in times]
    starts = {(s, j): (a, b) for s, j, a, b in tl.events}
    for s in range(1, 3):
        for j in range(5):
            assert starts[(s, j)][0] >= starts[(s - 1, j)][1]
    # the slowest stage dominates: makespan = fill + m * bottleneck + drain
    assert tl.makespan == 1 + 3 * 5 + 2
    with pytest.raises(InputError):
        simulate_pipeline([1.0], 0)
    with pytest.raises(InputError):
        simulate_pipeline([1.0, 0.0], 2)


def test_fused_modulate_bit_equal():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 1000)).astype(np.float32)
    res = rng.normal(size=x.shape).astype(np.float32)
    bias, scale, shift = (rng.normal(size=1000).astype(np.float32) for _ in range(3))
    visits = np.zeros(x.shape, dtype=np.int64)
    out = fused_modulate(x, bias, scale, shift, res, visits=visits)
    assert np.array_equal(out, composed_modulate(x, bias, scale, shift, res))
    assert (visits == 1).all()


def test_fused_modulate_trivial_cases():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6)).astype(np.float32)
    zero = np.zeros(6, np.float32)
    assert np.array_equal(fused_modulate(x, zero, zero, zero, np.zeros_like(x)), x)
    r = rng.normal(size=x.shape).astype(np.float32)
    assert np.array_equal(fused_modulate(x, zero, -np.ones(6, np.float32), zero, r), r)
    per_token = rng.normal(size=(4, 1)).astype(np.float32)
    assert np.array_equal(fused_modulate(x, per_token, per_token, per_token, r),
                          composed_modulate(x, per_token, per_token, per_token, r))
    x64 = x.astype(np.float64)
    assert fused_modulate(x64, zero, zero, zero, x64).dtype == np.float64


def test_fused_modulate_shape_errors():
    x = np.zeros((4, 6), np.float32)
    with pytest.raises(DimensionError):
        fused_modulate(x, np.zeros(5), 0, 0, x)
    with pytest.raises(DimensionError):
        fused_modulate(x, 0, 0, 0, np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        fused_modulate(x, 0, 0, 0, x, visits=np.zeros(3, np.int64))
