"""Simulator-guided placement search.

``greedy_selection`` fills a fixed set of device groups with model replicas
by beam search, scoring every candidate with a simulation.
``search_placement`` enumerates model buckets, device buckets, group
partitions and parallel configs around it.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layout import Group, Placement, empty_groups
from .planner import ParallelConfig, ParallelizedModel, enumerate_configs, parallelize
from .profiles import ClusterSpec, ModelProfile
from .simulator import SimOptions, simulate
from .workload import Workload

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBudget:
    beam_size: int = 1
    max_bucket_count: int = 2
    group_sizes: Optional[Tuple[int, ...]] = None
    eval_duration: Optional[float] = None
    seed: int = 0
    bucket_threshold: float = 4.0
    discrepancy_bound: float = 3.0
    options: SimOptions = field(default_factory=SimOptions)

    def __post_init__(self):
        if self.beam_size < 1 or self.max_bucket_count < 1:
            raise ValueError("beam_size and max_bucket_count must be >= 1")
        if self.group_sizes is not None and any(g < 1 for g in self.group_sizes):
            raise ValueError("group sizes must be >= 1")
        if self.eval_duration is not None and not self.eval_duration > 0:
            raise ValueError("eval_duration must be > 0")
        if not (self.bucket_threshold > 0 and self.discrepancy_bound > 0):
            raise ValueError("thresholds must be > 0")

    def eval_workload(self, workload: Workload) -> Workload:
        if self.eval_duration is None or self.eval_duration >= workload.duration:
            return workload
        return workload.truncate(self.eval_duration)


class _Parallelizer:
    """Caches parallelized models per (model, config)."""

    def __init__(self, cluster: ClusterSpec):
        self.cluster = cluster
        self._cache: Dict[tuple, Optional[ParallelizedModel]] = {}

    def __call__(self, model: ModelProfile, config: ParallelConfig) -> Optional[ParallelizedModel]:
        key = (model.name, config)
        if key not in self._cache:
            if config.inter_op > model.num_layers:
                self._cache[key] = None
            else:
                self._cache[key] = parallelize(model, config, self.cluster)
        return self._cache[key]


def _score(groups, workload, options) -> float:
    return simulate(Placement(list(groups)), workload, options).slo_attainment


def greedy_selection(models: Sequence[ModelProfile], groups: Sequence[Group], workload: Workload,
                     cluster: ClusterSpec, budget: SearchBudget = SearchBudget(),
                     history: Optional[list] = None) -> Placement:
    """Beam search over replica additions; returns the best selection seen.

    ``groups`` fixes device sets and configs (any models already hosted are
    kept). If given, ``history`` receives the best objective after each
    iteration.
    """
    W = budget.eval_workload(workload)
    opts = budget.options
    mem = cluster.device_memory_bytes
    par = _Parallelizer(cluster)
    start = tuple(groups)
    best_groups, best_att = start, _score(start, W, opts)
    beam = [start]
    while True:
        cands: Dict[tuple, tuple] = {}
        for sel in beam:
            for mi, m in enumerate(models):
                for gi, g in enumerate(sel):
                    pm = par(m, g.config)
                    if pm is None or not g.fits(pm, mem):
                        continue
                    new = sel[:gi] + (g.add(pm),) + sel[gi + 1:]
                    key = Placement(list(new)).key()
                    if key not in cands:
                        cands[key] = (new, mi, gi)
        if not cands:
            break
        scored = []
        for new, mi, gi in cands.values():
            att = _score(new, W, opts)
            scored.append((-att, sum(len(g.models) for g in new), mi, gi, new))
        scored.sort(key=lambda x: x[:4])
        beam = [x[4] for x in scored[:budget.beam_size]]
        top_att = -scored[0][0]
        if top_att > best_att:
            best_groups, best_att = scored[0][4], top_att
        if history is not None:
            history.append(best_att)
        if best_att >= 1.0:
            break  # nothing can beat full attainment
    out = Placement(list(best_groups))
    out.objective = (best_att if W is workload
                     else simulate(out, workload, opts).slo_attainment)
    return out


def greedy_selection_fast(models: Sequence[ModelProfile], groups: Sequence[Group],
                          workload: Workload, cluster: ClusterSpec,
                          budget: SearchBudget = SearchBudget(),
                          history: Optional[list] = None) -> Placement:
    """One simulation per step: give the model with the most unserved requests
    a replica on the least-busy group that can hold it."""
    W = budget.eval_workload(workload)
    opts = budget.options
    mem = cluster.device_memory_bytes
    par = _Parallelizer(cluster)
    order = {m.name: i for i, m in enumerate(models)}
    sel = list(groups)
    best_groups, best_att = None, -1.0
    while True:
        rep = simulate(Placement(sel), W, opts)
        if rep.slo_attainment > best_att:
            best_groups, best_att = list(sel), rep.slo_attainment
        if history is not None:
            history.append(best_att)
        unserved = {n: c for n, c in rep.unserved_by_model().items() if n in order and c > 0}
        if not unserved:
            break
        busy = rep.busy_fraction()
        placed = False
        for name in sorted(unserved, key=lambda n: (-unserved[n], order[n])):
            m = models[order[name]]
            options = []
            for gi, g in enumerate(sel):
                pm = par(m, g.config)
                if pm is not None and g.fits(pm, mem):
                    options.append((busy.get(gi, 0.0), gi, pm))
            if options:
                _, gi, pm = min(options, key=lambda x: x[:2])
                sel[gi] = sel[gi].add(pm)
                placed = True
                break
        if not placed:
            break
    out = Placement(best_groups)
    out.objective = (best_att if W is workload
                     else simulate(out, workload, opts).slo_attainment)
    return out


# -- enumeration ----------------------------------------------------------

def model_buckets(models: Sequence[ModelProfile], threshold: float = 4.0,
                  max_buckets: int = 2) -> List[List[List[ModelProfile]]]:
    """Candidate partitions of the models into latency buckets.

    Models are sorted by single-device latency and cut into contiguous
    buckets, only between distinct latencies, such that no bucket spans a
    latency ratio above ``threshold``.
    """
    ms = sorted(models, key=lambda m: (m.latency, m.name))
    if not ms:
        return [[]]
    lat = [m.latency for m in ms]
    cuts = [i for i in range(1, len(ms)) if lat[i] > lat[i - 1]]

    def valid(parts):
        return all(p[-1].latency <= threshold * p[0].latency for p in parts)

    out = []
    for k in range(0, max_buckets):
        for chosen in itertools.combinations(cuts, k):
            bounds = (0,) + chosen + (len(ms),)
            parts = [ms[a:b] for a, b in zip(bounds, bounds[1:])]
            if valid(parts):
                out.append(parts)
    if not out:
        # more buckets needed than allowed: cut wherever the ratio demands
        parts, cur = [], [ms[0]]
        for m in ms[1:]:
            if m.latency > threshold * cur[0].latency:
                parts.append(cur)
                cur = [m]
            else:
                cur.append(m)
        parts.append(cur)
        out.append(parts)
    return out


def bucket_demand(buckets: Sequence[Sequence[ModelProfile]], workload: Workload) -> List[float]:
    counts = workload.counts()
    return [float(sum(counts.get(m.name, 0) for m in b)) for b in buckets]


def _discrepancy(buckets, devices, demand) -> float:
    cap = [n / float(np.mean([m.latency for m in b])) for b, n in zip(buckets, devices)]
    tot_cap, tot_dem = sum(cap), sum(demand)
    if tot_dem == 0:
        return 1.0
    ratios = [(d / tot_dem) / (c / tot_cap) for d, c in zip(demand, cap)]
    lo, hi = min(ratios), max(ratios)
    return np.inf if lo == 0 else hi / lo


def prune_device_buckets(buckets: Sequence[Sequence[ModelProfile]],
                         assignments: Sequence[Sequence[int]], demand: Sequence[float],
                         bound: float = 3.0) -> List[tuple]:
    """Drop device-count assignments whose demand/capacity shares are too uneven.

    Capacity of a bucket is its device count over the mean single-device
    latency of its models. If every assignment would be dropped, the least
    uneven one is kept.
    """
    assignments = [tuple(a) for a in assignments]
    if len(buckets) <= 1:
        return assignments
    scored = [(_discrepancy(buckets, a, demand), a) for a in assignments]
    kept = [a for d, a in scored if d <= bound]
    if not kept and scored:
        kept = [min(scored, key=lambda x: x[0])[1]]
    return kept


def device_bucket_assignments(num_devices: int, k: int) -> List[tuple]:
    """All ways to give each of k buckets at least one device."""
    if k > num_devices:
        return []
    return [tuple(b - a for a, b in zip((0,) + c, c + (num_devices,)))
            for c in itertools.combinations(range(1, num_devices), k - 1)]


def _remainder_config(size: int, cfg: ParallelConfig) -> ParallelConfig:
    n = cfg.intra_op
    if size % n == 0:
        return ParallelConfig(size // n, n)
    return ParallelConfig(size, 1)


def group_partitions(num_devices: int, group_sizes: Optional[Sequence[int]] = None):
    """(group size list, config list) pairs: equal groups plus an optional remainder."""
    sizes = group_sizes or [g for g in range(1, num_devices + 1) if num_devices % g == 0]
    out = []
    for g in sorted(set(s for s in sizes if s <= num_devices)):
        full, rem = divmod(num_devices, g)
        for cfg in enumerate_configs(g):
            parts = [(g, cfg)] * full
            if rem:
                parts.append((rem, _remainder_config(rem, cfg)))
            out.append(parts)
    return out


def _relabel(groups: Sequence[Group], offset: int) -> List[Group]:
    return [Group(tuple(d + offset for d in g.devices), g.config, g.models) for g in groups]


def search_placement(models: Sequence[ModelProfile], cluster: ClusterSpec, workload: Workload,
                     budget: SearchBudget = SearchBudget(), fast: bool = False) -> Placement:
    """Enumerate bucketings, device splits, group partitions and configs;
    solve each bucket with greedy selection and keep the best concatenation."""
    selector = greedy_selection_fast if fast else greedy_selection
    best: Optional[Placement] = None
    cache: Dict[tuple, List[Group]] = {}
    for buckets in model_buckets(models, budget.bucket_threshold, budget.max_bucket_count):
        k = len(buckets)
        demand = bucket_demand(buckets, workload)
        assignments = prune_device_buckets(
            buckets, device_bucket_assignments(cluster.num_devices, k), demand,
            budget.discrepancy_bound)
        for devices in assignments:
            groups: List[Group] = []
            offset = 0
            for b, n in zip(buckets, devices):
                key = (tuple(m.name for m in b), n)
                if key not in cache:
                    cache[key] = _solve_bucket(b, n, workload, cluster, budget, selector)
                groups.extend(_relabel(cache[key], offset))
                offset += n
            plm = Placement(groups)
            plm.objective = simulate(plm, workload, budget.options).slo_attainment
            log.debug("buckets=%s devices=%s attainment=%.4f",
                      [len(b) for b in buckets], devices, plm.objective)
            if best is None or plm.objective > best.objective:
                best = plm
    return best


def _solve_bucket(bucket, num_devices, workload, cluster, budget, selector) -> List[Group]:
    names = {m.name for m in bucket}
    W = workload.for_models(names)
    best_groups, best_att = None, -1.0
    for parts in group_partitions(num_devices, budget.group_sizes):
        plm = selector(bucket, empty_groups(parts), W, cluster, budget)
        if plm.objective > best_att:
            best_groups, best_att = plm.groups, plm.objective
    return best_groups
