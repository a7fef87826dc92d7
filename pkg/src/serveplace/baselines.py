"""Reference strategies: selective replication, windowed re-placement,
per-model manual config choice and round-robin placement."""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .layout import Group, Placement, empty_groups
from .placement import SearchBudget, _Parallelizer, greedy_selection
from .planner import ParallelConfig, enumerate_configs, parallelize
from .profiles import ClusterSpec, ModelProfile
from .simulator import SimOptions, SimReport, Simulation, simulate
from .workload import Workload


def single_device_groups(num_devices: int) -> List[Group]:
    return empty_groups([(1, ParallelConfig(1, 1))] * num_devices)


def selective_replication(models: Sequence[ModelProfile], cluster: ClusterSpec,
                          workload: Workload, budget: SearchBudget = SearchBudget()) -> Placement:
    """Greedy selection with every device its own (1, 1) group: no model parallelism."""
    return greedy_selection(models, single_device_groups(cluster.num_devices),
                            workload, cluster, budget)


def clockwork_pp(models: Sequence[ModelProfile], cluster: ClusterSpec, workload: Workload,
                 window: float = 60.0, budget: SearchBudget = SearchBudget(),
                 replace_every: int = 1, placements: Optional[list] = None) -> SimReport:
    """Re-run selective replication at window boundaries on that window's arrivals.

    Swaps cost nothing. Work in flight at a boundary completes on its old
    devices; requests still waiting are dispatched again under the new
    placement. ``replace_every=2`` re-places at every other boundary.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    horizon = max(workload.duration, float(workload.arrivals[-1]) if len(workload) else 0.0)
    nwin = max(1, math.ceil(horizon / window))
    sim = Simulation(workload, budget.options, cluster)
    for k in range(0, nwin, replace_every):
        start = k * window
        last = k + replace_every >= nwin
        end = math.inf if last else (k + replace_every) * window
        # oracle knowledge: the window's actual arrivals drive its placement
        seen = workload if nwin == 1 else workload.window(start, end)
        plm = selective_replication(models, cluster, seen, budget)
        if placements is not None:
            placements.append(plm)
        sim.install(plm, start)
        sim.run(until=end)
    return sim.report()


def manual_best_config(model: ModelProfile, group_size: int, workload: Workload,
                       cluster: ClusterSpec, options: SimOptions = SimOptions()
                       ) -> Tuple[Optional[ParallelConfig], Optional[SimReport]]:
    """Try every (s, n) with s * n = group_size on a dedicated group; keep the best."""
    best_cfg, best_rep = None, None
    W = workload.for_models([model.name])
    for cfg in enumerate_configs(group_size):
        if cfg.inter_op > model.num_layers:
            continue
        pm = parallelize(model, cfg, cluster)
        if pm.weight_bytes_per_device > cluster.device_memory_bytes:
            continue
        rep = simulate(Placement([Group(tuple(range(group_size)), cfg, (pm,))]), W, options)
        if best_rep is None or rep.slo_attainment > best_rep.slo_attainment:
            best_cfg, best_rep = cfg, rep
    return best_cfg, best_rep


def manual_best_placement(models: Sequence[ModelProfile], cluster: ClusterSpec,
                          workload: Workload, group_size: Optional[int] = None,
                          options: SimOptions = SimOptions()) -> Placement:
    """Dedicated equal-size groups, one per model, each with its best config."""
    if not models:
        return Placement([])
    size = group_size or max(1, cluster.num_devices // len(models))
    groups, d = [], 0
    for m in models:
        if d + size > cluster.num_devices:
            break
        cfg, _ = manual_best_config(m, size, workload, cluster, options)
        if cfg is not None:
            groups.append(Group(tuple(range(d, d + size)), cfg, (parallelize(m, cfg, cluster),)))
            d += size
    plm = Placement(groups)
    plm.objective = simulate(plm, workload, options).slo_attainment
    return plm


def round_robin_placement(models: Sequence[ModelProfile], cluster: ClusterSpec,
                          workload: Workload, group_size: int = 4,
                          config: Optional[ParallelConfig] = None,
                          options: SimOptions = SimOptions()) -> Placement:
    """Equal groups with a shared config; models dealt to groups in turn.

    Each model gets one replica on the next group (cyclically) with room for it.
    """
    size = min(group_size, cluster.num_devices)
    config = config or ParallelConfig(size, 1)
    groups = empty_groups([(size, config)] * (cluster.num_devices // size))
    par = _Parallelizer(cluster)
    mem = cluster.device_memory_bytes
    nxt = 0
    for m in models:
        for step in range(len(groups)):
            gi = (nxt + step) % len(groups)
            pm = par(m, groups[gi].config)
            if pm is not None and groups[gi].fits(pm, mem):
                groups[gi] = groups[gi].add(pm)
                nxt = gi + 1
                break
    plm = Placement(groups)
    plm.objective = simulate(plm, workload, options).slo_attainment
    return plm
