"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Sequence

from .profiles import ClusterSpec, ModelProfile, ProfileError
from .workload import Workload, WorkloadError


def check_models(models: Sequence[ModelProfile]) -> list:
    models = list(models)
    if not models:
        raise ProfileError("no models")
    for m in models:
        if not isinstance(m, ModelProfile):
            raise TypeError(f"expected ModelProfile, got {type(m).__name__}")
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ProfileError("duplicate model names")
    return models


def check_cluster(cluster) -> ClusterSpec:
    if not isinstance(cluster, ClusterSpec):
        raise TypeError(f"expected ClusterSpec, got {type(cluster).__name__}")
    return cluster


def check_workload(X, models: Sequence[ModelProfile] = None) -> Workload:
    """Workload must be sorted and only reference known models."""
    if not isinstance(X, Workload):
        raise TypeError(f"expected Workload, got {type(X).__name__}")
    if not X.is_sorted():
        raise WorkloadError("workload is not sorted by (arrival, id)")
    if models is not None and len(X):
        known = {m.name for m in models}
        unknown = set(X.model_names) - known
        if unknown:
            raise WorkloadError(f"workload references unknown models {sorted(unknown)[:5]}")
    return X
