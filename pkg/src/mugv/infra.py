"""Training-infrastructure algorithms at desk scale.

* ``balance_batches``: longest-processing-time greedy assignment of samples to ranks.
* ``plan_parallelism``: analytic step-time model over every (dp, tp, pp) factorisation.
* ``simulate_pipeline``: event-driven synchronous pipeline, the oracle for the bubble term.
* ``fused_modulate``: bias add, scale/shift modulation and residual add in one pass.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import ConfigurationError, DimensionError, InputError

log = logging.getLogger(__name__)


def balance_batches(costs: Sequence[float], ranks: int) -> list[int]:
    """Rank index per item.  Largest cost first onto the lightest rank; ties -> lowest rank."""
    if ranks < 1:
        raise InputError("ranks must be >= 1")
    if len(costs) == 0:
        raise InputError("costs must be nonempty")
    if any(c <= 0 for c in costs):
        raise InputError("costs must be positive")
    if ranks > len(costs):
        log.warning("%d ranks for %d items: some ranks stay empty", ranks, len(costs))
    order = sorted(range(len(costs)), key=lambda i: (-costs[i], i))
    heap = [(0.0, r) for r in range(ranks)]
    assignment = [0] * len(costs)
    for i in order:
        load, r = heapq.heappop(heap)
        assignment[i] = r
        heapq.heappush(heap, (load + costs[i], r))
    return assignment


def rank_loads(costs: Sequence[float], assignment: Sequence[int], ranks: int) -> list[float]:
    loads = [0.0] * ranks
    for c, r in zip(costs, assignment):
        loads[r] += c
    return loads


def round_robin(costs: Sequence[float], ranks: int) -> list[int]:
    return [i % ranks for i in range(len(costs))]


@dataclass
class ClusterSpec:
    world_size: int
    device_flops: float = 989e12
    intra_bandwidth: float = 450e9
    inter_bandwidth: float = 50e9
    devices_per_node: int = 8
    efficiency: float = 0.5

    def __post_init__(self):
        if self.world_size < 1 or self.devices_per_node < 1:
            raise ConfigurationError("world_size and devices_per_node must be positive")
        if min(self.device_flops, self.intra_bandwidth, self.inter_bandwidth) <= 0:
            raise ConfigurationError("throughput and bandwidths must be positive")
        if not 0 < self.efficiency <= 1:
            raise ConfigurationError("efficiency must lie in (0, 1]")


@dataclass
class ModelSpec:
    """Enough of a transformer to cost one training step."""

    depth: int
    hidden: int
    tokens_per_sample: int
    global_batch: int
    bytes_per_value: int = 2
    params: int | None = None
    sequence_parallel: bool = True

    def __post_init__(self):
        if min(self.depth, self.hidden, self.tokens_per_sample, self.global_batch, self.bytes_per_value) < 1:
            raise ConfigurationError("model sizes must be positive")

    @property
    def num_params(self) -> int:
        # attention (4h^2) + cross-attention (~2h^2) + 4x FFN (8h^2) per block
        return self.params if self.params is not None else 14 * self.depth * self.hidden ** 2

    @property
    def step_flops(self) -> float:
        tokens = self.tokens_per_sample * self.global_batch
        dense = 6.0 * self.num_params * tokens
        attn = 12.0 * self.depth * self.tokens_per_sample ** 2 * self.hidden * self.global_batch
        return dense + attn


@dataclass
class ParallelPlan:
    dp: int
    tp: int
    pp: int
    microbatches: int
    step_time: float
    comm_fraction: float
    bubble_fraction: float
    compute_time: float = 0.0
    comm_time: float = 0.0
    activation_bytes_per_device: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def bubble_fraction(pp: int, m: int) -> float:
    return (pp - 1) / (m + pp - 1)


def factor_triples(n: int) -> list[tuple[int, int, int]]:
    """All ordered (dp, tp, pp) with dp * tp * pp == n."""
    out = []
    for tp in range(1, n + 1):
        if n % tp:
            continue
        for pp in range(1, n // tp + 1):
            if (n // tp) % pp:
                continue
            out.append((n // tp // pp, tp, pp))
    return out


def estimate_plan(model: ModelSpec, cluster: ClusterSpec, dp: int, tp: int, pp: int, m: int) -> ParallelPlan:
    world = dp * tp * pp
    bubble = bubble_fraction(pp, m)
    ideal = model.step_flops / (world * cluster.device_flops * cluster.efficiency)
    compute = ideal / (1.0 - bubble)

    b = model.bytes_per_value
    tokens_per_replica = model.tokens_per_sample * model.global_batch / dp
    act_bytes = tokens_per_replica * model.hidden * b
    tp_bw = cluster.intra_bandwidth if tp <= cluster.devices_per_node else cluster.inter_bandwidth
    # two all-reduces forward and two backward per layer on this stage's layers
    tp_comm = (model.depth / pp) * 4 * act_bytes * 2 * (tp - 1) / tp / tp_bw
    pp_comm = 2 * (pp - 1) * (act_bytes / tp) / m / cluster.inter_bandwidth if pp > 1 else 0.0
    dp_bw = cluster.intra_bandwidth if world <= cluster.devices_per_node else cluster.inter_bandwidth
    grad_bytes = model.num_params * b / (tp * pp)
    dp_comm = grad_bytes * 2 * (dp - 1) / dp / dp_bw
    comm = tp_comm + pp_comm + dp_comm
    total = compute + comm

    per_layer_act = act_bytes / m * (1 / tp if model.sequence_parallel else 1)
    return ParallelPlan(dp, tp, pp, m, total, comm / total if total > 0 else 0.0, bubble,
                        compute, comm, per_layer_act * model.depth / pp)


def plan_parallelism(model: ModelSpec, cluster: ClusterSpec, m: int) -> list[ParallelPlan]:
    """Every factorisation of the world size, fastest predicted step first."""
    if m < 1:
        raise InputError("microbatches must be >= 1")
    plans = [estimate_plan(model, cluster, dp, tp, pp, m)
             for dp, tp, pp in factor_triples(cluster.world_size)]
    return sorted(plans, key=lambda p: (p.step_time, p.tp, p.pp))


@dataclass
class PipelineTimeline:
    events: list[tuple[int, int, float, float]] = field(default_factory=list)  # stage, mb, start, end
    makespan: float = 0.0
    busy: list[float] = field(default_factory=list)
    bubble_fraction: float = 0.0


def simulate_pipeline(stage_times: Sequence, m: int) -> PipelineTimeline:
    """Synchronous pipeline: each stage runs microbatches in order and hands them downstream.

    Stage times may be any exact numeric type (``fractions.Fraction`` gives exact bubbles).
    """
    if m < 1:
        raise InputError("m must be >= 1")
    if not stage_times or any(t <= 0 for t in stage_times):
        raise InputError("stage times must be positive")
    pp = len(stage_times)
    zero = stage_times[0] * 0
    stage_free = [zero] * pp
    next_mb = [0] * pp
    ready: list[list] = [[] for _ in range(pp)]  # arrival times of microbatches per stage
    ready[0] = [zero] * m
    queue: list = []
    timeline = PipelineTimeline(busy=[zero] * pp)

    def try_start(s, now):
        j = next_mb[s]
        if j < m and j < len(ready[s]) and stage_free[s] <= now:
            start = max(now, ready[s][j])
            end = start + stage_times[s]
            stage_free[s] = end
            next_mb[s] += 1
            heapq.heappush(queue, (end, s, j, start))

    try_start(0, zero)
    while queue:
        end, s, j, start = heapq.heappop(queue)
        timeline.events.append((s, j, start, end))
        timeline.busy[s] += end - start
        timeline.makespan = max(timeline.makespan, end)
        if s + 1 < pp:
            ready[s + 1].append(end)
            try_start(s + 1, end)
        try_start(s, end)
    timeline.events.sort(key=lambda e: (e[2], e[0]))
    timeline.bubble_fraction = 1 - sum(timeline.busy) / (pp * timeline.makespan)
    return timeline


@numba.njit(cache=True)
def _fused_kernel(x, res, bias, scale, shift, out, visits):
    one = x.dtype.type(1)
    count = visits.size > 0
    for i in range(x.size):
        v = x[i] + bias[i]
        v = v * (one + scale[i]) + shift[i]
        out[i] = res[i] + v
        if count:
            visits[i] += 1


def _broadcast_flat(a, shape, dtype, name):
    a = np.asarray(a, dtype=dtype)
    try:
        return np.ascontiguousarray(np.broadcast_to(a, shape)).reshape(-1)
    except ValueError:
        raise DimensionError(f"{name} of shape {a.shape} does not broadcast to {shape}") from None


def fused_modulate(x, bias, scale, shift, residual, visits: np.ndarray | None = None) -> np.ndarray:
    """``residual + ((x + bias) * (1 + scale) + shift)`` in a single sweep over x.

    ``bias``/``scale``/``shift`` broadcast against x (per channel on the last
    axis, or per token).  Passing an int64 ``visits`` array of x's shape
    records how many times each element of x was read.
    """
    x = np.asarray(x)
    residual = np.asarray(residual)
    if x.shape != residual.shape:
        raise DimensionError(f"x {x.shape} and residual {residual.shape} differ")
    dtype = np.result_type(x.dtype, np.float32)
    flat_x = np.ascontiguousarray(x, dtype=dtype).reshape(-1)
    flat_r = np.ascontiguousarray(residual, dtype=dtype).reshape(-1)
    b = _broadcast_flat(bias, x.shape, dtype, "bias")
    sc = _broadcast_flat(scale, x.shape, dtype, "scale")
    sh = _broadcast_flat(shift, x.shape, dtype, "shift")
    out = np.empty_like(flat_x)
    counter = np.zeros(0, dtype=np.int64) if visits is None else visits.reshape(-1)
    if visits is not None and visits.size != x.size:
        raise DimensionError("visits must have one slot per element of x")
    _fused_kernel(flat_x, flat_r, b, sc, sh, out, counter)
    return out.reshape(x.shape)


def composed_modulate(x, bias, scale, shift, residual) -> np.ndarray:
    """Reference: three separate elementwise passes."""
    dtype = np.result_type(np.asarray(x).dtype, np.float32)
    x = np.asarray(x, dtype=dtype)
    h = x + np.asarray(bias, dtype=dtype)
    h = h * (dtype.type(1) + np.asarray(scale, dtype=dtype)) + np.asarray(shift, dtype=dtype)
    return np.asarray(residual, dtype=dtype) + h
