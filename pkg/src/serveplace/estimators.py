"""Placement strategies as scikit-learn style estimators.

``fit(workload)`` searches a placement (``placement_``), ``predict(workload)``
simulates it and returns a :class:`SimReport`, ``score(workload)`` is the
SLO attainment. Hyper-parameters are plain constructor arguments, so
``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cluster, check_models, check_workload
from .baselines import (clockwork_pp, manual_best_placement, round_robin_placement,
                        selective_replication)
from .layout import empty_groups
from .placement import SearchBudget, greedy_selection, greedy_selection_fast, search_placement
from .planner import ParallelConfig
from .simulator import SimOptions, simulate


class _PlacementEstimator(BaseEstimator):

    def _options(self):
        return SimOptions(max_batch=getattr(self, "max_batch", None))

    def _budget(self, **kw):
        return SearchBudget(options=self._options(), **kw)

    def _validate(self, X):
        self.models_ = check_models(self.models)
        self.cluster_ = check_cluster(self.cluster)
        return check_workload(X, self.models_)

    def fit(self, X, y=None):
        X = self._validate(X)
        self.placement_ = self._search(X)
        self.placement_.check(self.cluster_)
        return self

    def predict(self, X):
        check_is_fitted(self, "placement_")
        X = check_workload(X, self.models_)
        return simulate(self.placement_, X, self._options(), self.cluster_)

    def score(self, X, y=None):
        return self.predict(X).slo_attainment


class PlacementSearch(_PlacementEstimator):
    """Full search: model buckets, device buckets, group partitions, configs,
    greedy replica selection inside each."""

    def __init__(self, models=(), cluster=None, beam_size=1, max_bucket_count=2,
                 group_sizes=None, eval_duration=None, bucket_threshold=4.0,
                 discrepancy_bound=3.0, fast=False, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.beam_size = beam_size
        self.max_bucket_count = max_bucket_count
        self.group_sizes = group_sizes
        self.eval_duration = eval_duration
        self.bucket_threshold = bucket_threshold
        self.discrepancy_bound = discrepancy_bound
        self.fast = fast
        self.max_batch = max_batch

    def _search(self, X):
        budget = self._budget(
            beam_size=self.beam_size, max_bucket_count=self.max_bucket_count,
            group_sizes=tuple(self.group_sizes) if self.group_sizes else None,
            eval_duration=self.eval_duration, bucket_threshold=self.bucket_threshold,
            discrepancy_bound=self.discrepancy_bound)
        return search_placement(self.models_, self.cluster_, X, budget, fast=self.fast)


class GreedyPlacement(_PlacementEstimator):
    """Greedy replica selection on fixed equal-size groups sharing one config."""

    def __init__(self, models=(), cluster=None, group_size=4, inter_op=None,
                 beam_size=1, eval_duration=None, fast=False, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.group_size = group_size
        self.inter_op = inter_op
        self.beam_size = beam_size
        self.eval_duration = eval_duration
        self.fast = fast
        self.max_batch = max_batch

    def _search(self, X):
        size = min(self.group_size, self.cluster_.num_devices)
        s = self.inter_op or size
        if size % s:
            raise ValueError(f"inter_op {s} does not divide group size {size}")
        cfg = ParallelConfig(s, size // s)
        groups = empty_groups([(size, cfg)] * (self.cluster_.num_devices // size))
        select = greedy_selection_fast if self.fast else greedy_selection
        return select(self.models_, groups, X, self.cluster_,
                      self._budget(beam_size=self.beam_size, eval_duration=self.eval_duration))


class SelectiveReplication(_PlacementEstimator):
    """Whole-model replicas on single devices only."""

    def __init__(self, models=(), cluster=None, beam_size=1, eval_duration=None, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.beam_size = beam_size
        self.eval_duration = eval_duration
        self.max_batch = max_batch

    def _search(self, X):
        return selective_replication(self.models_, self.cluster_, X,
                                     self._budget(beam_size=self.beam_size,
                                                  eval_duration=self.eval_duration))


class RoundRobin(_PlacementEstimator):
    def __init__(self, models=(), cluster=None, group_size=4, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.group_size = group_size
        self.max_batch = max_batch

    def _search(self, X):
        return round_robin_placement(self.models_, self.cluster_, X, self.group_size,
                                     options=self._options())


class ManualBestConfig(_PlacementEstimator):
    """One dedicated group per model with its best-attaining (s, n)."""

    def __init__(self, models=(), cluster=None, group_size=None, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.group_size = group_size
        self.max_batch = max_batch

    def _search(self, X):
        return manual_best_placement(self.models_, self.cluster_, X, self.group_size,
                                     self._options())


class ClockworkPP(_PlacementEstimator):
    """Windowed zero-cost re-placement with selective replication.

    There is no static placement to learn: ``fit`` only validates, and
    ``predict`` re-places on the arrivals it is given.
    """

    def __init__(self, models=(), cluster=None, window=60.0, replace_every=1,
                 beam_size=1, max_batch=None):
        self.models = models
        self.cluster = cluster
        self.window = window
        self.replace_every = replace_every
        self.beam_size = beam_size
        self.max_batch = max_batch

    def fit(self, X, y=None):
        self._validate(X)
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "fitted_")
        X = check_workload(X, self.models_)
        self.placements_ = []
        return clockwork_pp(self.models_, self.cluster_, X, self.window,
                            self._budget(beam_size=self.beam_size), self.replace_every,
                            placements=self.placements_)


STRATEGIES = {
    "alpaserve": PlacementSearch,
    "sr": SelectiveReplication,
    "clockwork-pp": ClockworkPP,
    "manual-best": ManualBestConfig,
    "greedy": GreedyPlacement,
    "round-robin": RoundRobin,
}


def make_strategy(name, models, cluster, **params):
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    valid = cls().get_params()
    return cls(models=models, cluster=cluster, **{k: v for k, v in params.items() if k in valid})
