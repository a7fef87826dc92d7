"""Placement data types: device groups, their parallel config and hosted replicas."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .planner import ParallelConfig, ParallelizedModel
from .profiles import ClusterSpec, ModelProfile

MEMORY_SLACK = 1e-9  # relative tolerance on per-device memory sums


class InfeasiblePlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Group:
    devices: tuple
    config: ParallelConfig
    models: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "models", tuple(self.models))
        if len(self.devices) != self.config.num_devices:
            raise InfeasiblePlacementError(
                f"group with {len(self.devices)} devices cannot use config {self.config}")

    @property
    def model_names(self) -> Tuple[str, ...]:
        return tuple(m.name for m in self.models)

    @property
    def memory_per_device(self) -> float:
        return sum(m.weight_bytes_per_device for m in self.models)

    def hosts(self, name: str) -> bool:
        return any(m.name == name for m in self.models)

    def fits(self, pm: ParallelizedModel, device_memory: float) -> bool:
        return (pm.config == self.config and not self.hosts(pm.name)
                and self.memory_per_device + pm.weight_bytes_per_device
                <= device_memory * (1 + MEMORY_SLACK))

    def add(self, pm: ParallelizedModel) -> "Group":
        return replace(self, models=self.models + (pm,))


@dataclass
class Placement:
    groups: List[Group] = field(default_factory=list)
    objective: Optional[float] = None

    @property
    def num_replicas(self) -> int:
        return sum(len(g.models) for g in self.groups)

    @property
    def num_devices(self) -> int:
        return sum(len(g.devices) for g in self.groups)

    def hosted_models(self) -> List[str]:
        return sorted({n for g in self.groups for n in g.model_names})

    def replicas(self) -> Dict[str, List[int]]:
        out: Dict[str, List[int]] = {}
        for gi, g in enumerate(self.groups):
            for name in g.model_names:
                out.setdefault(name, []).append(gi)
        return out

    def key(self) -> tuple:
        return tuple((g.devices, g.config.inter_op, g.config.intra_op,
                      tuple(sorted(g.model_names))) for g in self.groups)

    def check(self, cluster: Optional[ClusterSpec] = None) -> None:
        """Raise if device lists overlap, leave the cluster or exceed memory."""
        seen = set()
        for gi, g in enumerate(self.groups):
            for d in g.devices:
                if d in seen:
                    raise InfeasiblePlacementError(f"device {d} is in more than one group")
                if cluster is not None and not 0 <= d < cluster.num_devices:
                    raise InfeasiblePlacementError(f"device {d} is outside the cluster")
                seen.add(d)
            names = g.model_names
            if len(set(names)) != len(names):
                raise InfeasiblePlacementError(f"group {gi} hosts a model twice")
            for m in g.models:
                if m.config != g.config:
                    raise InfeasiblePlacementError(
                        f"group {gi}: {m.name} parallelized as {m.config}, group uses {g.config}")
            if cluster is not None and g.memory_per_device > cluster.device_memory_bytes * (1 + MEMORY_SLACK):
                raise InfeasiblePlacementError(
                    f"group {gi} needs {g.memory_per_device:.4g} bytes per device, "
                    f"budget is {cluster.device_memory_bytes:.4g}")

    def is_feasible(self, cluster: ClusterSpec) -> bool:
        try:
            self.check(cluster)
        except InfeasiblePlacementError:
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "groups": [{
                "devices": list(g.devices),
                "inter_op": g.config.inter_op,
                "intra_op": g.config.intra_op,
                "models": [{
                    "name": m.name,
                    "stage_boundaries": [list(b) for b in m.stage_boundaries],
                    "stage_latencies": list(m.stage_latencies),
                    "single_request_latency": m.single_request_latency,
                    "weight_bytes_per_device": m.weight_bytes_per_device,
                } for m in g.models],
            } for g in self.groups],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict, profiles: Sequence[ModelProfile]) -> "Placement":
        by_name = {p.name: p for p in profiles}
        groups = []
        for gd in d["groups"]:
            cfg = ParallelConfig(int(gd["inter_op"]), int(gd["intra_op"]))
            models = []
            for md in gd["models"]:
                if md["name"] not in by_name:
                    raise InfeasiblePlacementError(f"unknown model {md['name']!r}")
                models.append(ParallelizedModel(
                    model=by_name[md["name"]],
                    config=cfg,
                    stage_boundaries=tuple(tuple(b) for b in md["stage_boundaries"]),
                    stage_latencies=tuple(md["stage_latencies"]),
                    single_request_latency=md["single_request_latency"],
                    weight_bytes_per_device=md["weight_bytes_per_device"],
                ))
            groups.append(Group(tuple(gd["devices"]), cfg, tuple(models)))
        return cls(groups, d.get("objective"))

    @classmethod
    def from_json(cls, text_or_path, profiles) -> "Placement":
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as f:
                text = f.read()
        return cls.from_dict(json.loads(text), profiles)

    def table(self) -> str:
        lines = [f"{'group':>5}  {'devices':<16} {'(s,n)':<8} {'mem/dev GB':>10}  models"]
        for gi, g in enumerate(self.groups):
            devs = ",".join(map(str, g.devices))
            lines.append(f"{gi:>5}  {devs:<16} {str(g.config):<8} "
                         f"{g.memory_per_device / 1e9:>10.2f}  {' '.join(g.model_names) or '-'}")
        if self.objective is not None:
            lines.append(f"SLO attainment: {self.objective:.4f}")
        return "\n".join(lines)


def empty_groups(sizes_and_configs: Sequence[Tuple[int, ParallelConfig]], first_device: int = 0) -> List[Group]:
    """Consecutive device groups with no hosted models."""
    groups, d = [], first_device
    for size, cfg in sizes_and_configs:
        groups.append(Group(tuple(range(d, d + size)), cfg))
        d += size
    return groups
