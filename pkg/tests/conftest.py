import pytest
from hypothesis import settings

from serveplace.layout import Group, Placement
from serveplace.planner import ParallelConfig, parallelize
from serveplace.profiles import GB, ClusterSpec, synthetic_profile

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def flat_model(name="m", latency=0.4, weight_gb=1.0, layers=24, **kw):
    """Even layers and no boundary traffic, so D_s = D exactly."""
    kw.setdefault("activation_bytes", 0)
    return synthetic_profile(name, latency, int(weight_gb * GB), num_layers=layers, **kw)


def one_group(models, s=1, n=1, first=0):
    cfg = ParallelConfig(s, n)
    return Group(tuple(range(first, first + s * n)), cfg,
                 tuple(parallelize(m, cfg) for m in models))


def placement(*groups):
    return Placement(list(groups))


@pytest.fixture
def cluster8():
    return ClusterSpec(8)
