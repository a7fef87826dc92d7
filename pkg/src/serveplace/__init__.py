"""Simulator and placement optimizer for serving many models on a shared device cluster."""

from .baselines import clockwork_pp, manual_best_config, round_robin_placement, selective_replication
from .estimators import (ClockworkPP, GreedyPlacement, ManualBestConfig, PlacementSearch, RoundRobin,
                         SelectiveReplication, make_strategy)
from .layout import Group, InfeasiblePlacementError, Placement
from .placement import SearchBudget, greedy_selection, greedy_selection_fast, search_placement
from .planner import ParallelConfig, ParallelizedModel, parallelize, partition_pipeline
from .profiles import ClusterSpec, ModelProfile, generate_model_set, synthetic_profile
from .queueing import max_overhead_frontier, md1_latency, w_pipeline, w_simple
from .simulator import SimOptions, SimReport, simulate
from .workload import GammaWindowResampler, Workload, ingest_trace, synthetic_workload

__version__ = "0.1.0"
