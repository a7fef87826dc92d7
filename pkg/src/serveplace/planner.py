"""Parallel configurations and pipeline stage partitioning for inference.

Stage latency is the sum of per-layer latencies (scaled for intra-op
degree), so the inter-op plan reduces to a min-max contiguous partition
solved by dynamic programming.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

from .profiles import ClusterSpec, ModelProfile, OverheadFactors, DEFAULT_BANDWIDTH


@dataclass(frozen=True, order=True)
class ParallelConfig:
    inter_op: int = 1
    intra_op: int = 1

    def __post_init__(self):
        if self.inter_op < 1 or self.intra_op < 1:
            raise ValueError(f"invalid parallel config ({self.inter_op}, {self.intra_op})")

    @property
    def num_devices(self) -> int:
        return self.inter_op * self.intra_op

    def __str__(self):
        return f"({self.inter_op},{self.intra_op})"


@dataclass(frozen=True)
class ParallelizedModel:
    model: ModelProfile
    config: ParallelConfig
    stage_boundaries: tuple   # 1-based inclusive (first, last) layer per stage
    stage_latencies: tuple
    single_request_latency: float
    weight_bytes_per_device: float

    @property
    def name(self) -> str:
        return self.model.name

    @property
    def max_stage_latency(self) -> float:
        return max(self.stage_latencies)

    @property
    def comm_latency(self) -> float:
        """Latency not attributed to any stage (boundary transfers)."""
        return self.single_request_latency - sum(self.stage_latencies)

    def batched(self, batch: int) -> Tuple[tuple, float]:
        """Stage latencies and extra latency for a batch of ``batch`` requests."""
        f = 1 + self.model.batch_latency_slope * (batch - 1)
        return tuple(d * f for d in self.stage_latencies), self.comm_latency * f


def intra_scaled(latency: float, n: int, gamma: float) -> float:
    return latency * (1.0 / n + gamma * (n - 1) / n)


def stage_latency(profile: ModelProfile, i: int, k: int, intra_op: int = 1) -> float:
    """Latency of a stage made of layers ``i..k`` (1-based, inclusive)."""
    K = profile.num_layers
    if not 1 <= i <= k <= K:
        raise IndexError(f"layer range [{i}, {k}] invalid for {K} layers")
    g = profile.intra_op_comm_factor
    return sum(intra_scaled(profile.layer_latencies[j], intra_op, g)
               for j in range(i - 1, k))


def _min_max_partition(lats: List[float], s: int) -> List[Tuple[int, int]]:
    K = len(lats)
    prefix = [0.0]
    for x in lats:
        prefix.append(prefix[-1] + x)
    INF = float("inf")
    # F[t][k]: best max-stage latency putting layers 1..k into t stages
    F = [[INF] * (K + 1) for _ in range(s + 1)]
    arg = [[0] * (K + 1) for _ in range(s + 1)]
    F[0][0] = 0.0
    for t in range(1, s + 1):
        for k in range(t, K + 1):
            best, best_i = INF, 0
            # stage t covers layers i..k; strict < keeps the earliest split
            for i in range(t, k + 1):
                v = max(F[t - 1][i - 1], prefix[k] - prefix[i - 1])
                if v < best:
                    best, best_i = v, i
            F[t][k] = best
            arg[t][k] = best_i
    bounds = []
    k = K
    for t in range(s, 0, -1):
        i = arg[t][k]
        bounds.append((i, k))
        k = i - 1
    return bounds[::-1]


def partition_pipeline(profile: ModelProfile, stages: int, intra_op: int = 1,
                       bandwidth: float = DEFAULT_BANDWIDTH) -> ParallelizedModel:
    K = profile.num_layers
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if stages > K:
        raise ValueError(f"cannot split {K} layers into {stages} stages")
    g = profile.intra_op_comm_factor
    scaled = [intra_scaled(x, intra_op, g) for x in profile.layer_latencies]
    bounds = _min_max_partition(scaled, stages)
    stage_lats = tuple(sum(scaled[i - 1:k]) for i, k in bounds)
    comm = sum(profile.activation_bytes_per_boundary[k - 1] for _, k in bounds[:-1]) / bandwidth
    return ParallelizedModel(
        model=profile,
        config=ParallelConfig(stages, intra_op),
        stage_boundaries=tuple(bounds),
        stage_latencies=stage_lats,
        single_request_latency=sum(stage_lats) + comm,
        weight_bytes_per_device=profile.weight_bytes / (stages * intra_op),
    )


def parallelize(profile: ModelProfile, config: ParallelConfig,
                cluster: Optional[ClusterSpec] = None) -> ParallelizedModel:
    bw = cluster.interstage_bandwidth_bytes_per_sec if cluster else DEFAULT_BANDWIDTH
    return partition_pipeline(profile, config.inter_op, config.intra_op, bandwidth=bw)


def enumerate_configs(group_size: int) -> List[ParallelConfig]:
    """All (inter_op, intra_op) pairs whose product is ``group_size``."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return [ParallelConfig(s, group_size // s)
            for s in range(1, group_size + 1) if group_size % s == 0]


def apply_overhead_factors(base_latency: float, stages: int,
                           factors: OverheadFactors) -> Tuple[float, float]:
    """Return (single-request latency, max stage latency) under synthetic overheads."""
    if stages < 1:
        raise ValueError("stages must be >= 1")
    L = base_latency
    d_s = factors.alpha * L
    d_m = max(factors.alpha * L / stages, factors.beta * L / stages)
    return d_s, d_m


def parallelize_with_overheads(profile: ModelProfile, stages: int,
                               factors: OverheadFactors = OverheadFactors()) -> ParallelizedModel:
    """Pipeline the model with stage times set by overhead factors, bypassing the DP.

    The slowest stage gets the max-stage latency, the remaining stages share
    what is left of the single-request latency evenly.
    """
    d_s, d_m = apply_overhead_factors(profile.latency, stages, factors)
    if stages == 1:
        lats = (d_s,)
    else:
        rest = (d_s - d_m) / (stages - 1)
        if rest < 0:
            raise ValueError("overheads leave a negative latency for the remaining stages")
        lats = (d_m,) + (rest,) * (stages - 1)
    # boundaries are nominal: layers spread evenly
    K = profile.num_layers
    if stages > K:
        raise ValueError(f"cannot split {K} layers into {stages} stages")
    sizes = [K // stages + (1 if j < K % stages else 0) for j in range(stages)]
    bounds, start = [], 1
    for sz in sizes:
        bounds.append((start, start + sz - 1))
        start += sz
    return ParallelizedModel(
        model=profile,
        config=ParallelConfig(stages, 1),
        stage_boundaries=tuple(bounds),
        stage_latencies=lats,
        single_request_latency=d_s if stages > 1 else lats[0],
        weight_bytes_per_device=profile.weight_bytes / stages,
    )


def config_table(profile: ModelProfile, group_size: int,
                 cluster: Optional[ClusterSpec] = None) -> List[dict]:
    """One row per parallel config: s, n, D_s, D_m, mem/device."""
    rows = []
    for cfg in enumerate_configs(group_size):
        if cfg.inter_op > profile.num_layers:
            continue
        pm = parallelize(profile, cfg, cluster)
        rows.append({
            "s": cfg.inter_op,
            "n": cfg.intra_op,
            "D_s": pm.single_request_latency,
            "D_m": pm.max_stage_latency,
            "mem_per_device": pm.weight_bytes_per_device,
        })
    return rows
