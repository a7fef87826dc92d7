"""Model descriptions, cluster description and model-set files.

A model is described at layer granularity: per-layer latency on one device
(batch size 1), per-layer weight bytes and the activation size crossing each
layer boundary. Every parallel execution estimate is derived from these.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence

import yaml

GB = 10**9

DEFAULT_LAYERS = 24
DEFAULT_BATCH_SLOPE = 1.0
DEFAULT_INTRA_OP_COMM = 0.15
DEFAULT_ACTIVATION_BYTES = 8 * 10**6
DEFAULT_DEVICE_MEMORY = 13 * GB
DEFAULT_BANDWIDTH = 10 * GB

# (name, weight bytes, single-device latency in seconds)
TABLE_MODELS = {
    "BERT-1.3B": (int(2.4 * GB), 0.151),
    "BERT-2.7B": (int(5.4 * GB), 0.238),
    "BERT-6.7B": (int(13.4 * GB), 0.395),
    "BERT-104B": (int(208 * GB), 4.6),
    "MoE-1.3B": (int(2.6 * GB), 0.150),
    "MoE-2.4B": (int(4.8 * GB), 0.171),
    "MoE-5.3B": (int(10.6 * GB), 0.234),
}

# instance count of each model in each named model set
MODEL_SETS = {
    "S1": {"BERT-1.3B": 32},
    "S2": {"BERT-6.7B": 32},
    "S3": {
        "BERT-1.3B": 10,
        "BERT-2.7B": 10,
        "BERT-6.7B": 10,
        "MoE-1.3B": 10,
        "MoE-2.4B": 10,
        "MoE-5.3B": 10,
    },
    "S4": {"BERT-104B": 4},
}


class ProfileError(ValueError):
    """A model set or cluster description violates an invariant."""


@dataclass(frozen=True)
class ModelProfile:
    name: str
    layer_latencies: tuple
    layer_weight_bytes: tuple
    activation_bytes_per_boundary: tuple
    batch_latency_slope: float = DEFAULT_BATCH_SLOPE
    intra_op_comm_factor: float = DEFAULT_INTRA_OP_COMM

    def __post_init__(self):
        for attr in ("layer_latencies", "layer_weight_bytes",
                     "activation_bytes_per_boundary"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        validate_profile(self)

    @property
    def num_layers(self) -> int:
        return len(self.layer_latencies)

    @property
    def latency(self) -> float:
        """Single-device latency at batch size 1."""
        return sum(self.layer_latencies)

    @property
    def weight_bytes(self) -> int:
        return sum(self.layer_weight_bytes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layer_latencies": list(self.layer_latencies),
            "layer_weight_bytes": list(self.layer_weight_bytes),
            "activation_bytes_per_boundary": list(self.activation_bytes_per_boundary),
            "batch_latency_slope": self.batch_latency_slope,
            "intra_op_comm_factor": self.intra_op_comm_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelProfile":
        expected = {"name", "layer_latencies", "layer_weight_bytes",
                    "activation_bytes_per_boundary", "batch_latency_slope",
                    "intra_op_comm_factor"}
        if not isinstance(d, dict):
            raise ProfileError(f"model document must be a mapping, got {type(d).__name__}")
        unknown = set(d) - expected
        if unknown:
            raise ProfileError(f"unknown fields {sorted(unknown)}")
        missing = {"name", "layer_latencies", "layer_weight_bytes"} - set(d)
        if missing:
            raise ProfileError(f"missing fields {sorted(missing)}")
        n = len(d["layer_latencies"])
        acts = d.get("activation_bytes_per_boundary",
                     [DEFAULT_ACTIVATION_BYTES] * max(n - 1, 0))
        return cls(
            name=str(d["name"]),
            layer_latencies=[float(x) for x in d["layer_latencies"]],
            layer_weight_bytes=list(d["layer_weight_bytes"]),
            activation_bytes_per_boundary=list(acts),
            batch_latency_slope=float(d.get("batch_latency_slope", DEFAULT_BATCH_SLOPE)),
            intra_op_comm_factor=float(d.get("intra_op_comm_factor", DEFAULT_INTRA_OP_COMM)),
        )


def validate_profile(p: ModelProfile) -> None:
    if not p.layer_latencies:
        raise ProfileError(f"{p.name}: layer_latencies is empty")
    if len(p.layer_weight_bytes) != len(p.layer_latencies):
        raise ProfileError(
            f"{p.name}: layer_weight_bytes has {len(p.layer_weight_bytes)} entries, "
            f"expected {len(p.layer_latencies)}")
    if len(p.activation_bytes_per_boundary) != len(p.layer_latencies) - 1:
        raise ProfileError(
            f"{p.name}: activation_bytes_per_boundary has "
            f"{len(p.activation_bytes_per_boundary)} entries, "
            f"expected {len(p.layer_latencies) - 1}")
    for i, x in enumerate(p.layer_latencies):
        if not (x > 0 and math.isfinite(x)):
            raise ProfileError(f"{p.name}: layer_latencies[{i}] = {x!r} must be > 0")
    for fname in ("layer_weight_bytes", "activation_bytes_per_boundary"):
        for i, x in enumerate(getattr(p, fname)):
            if not x >= 0:
                raise ProfileError(f"{p.name}: {fname}[{i}] = {x!r} must be >= 0")
    if not p.batch_latency_slope >= 0:
        raise ProfileError(f"{p.name}: batch_latency_slope = {p.batch_latency_slope!r} must be >= 0")
    if not p.intra_op_comm_factor >= 0:
        raise ProfileError(f"{p.name}: intra_op_comm_factor = {p.intra_op_comm_factor!r} must be >= 0")


@dataclass(frozen=True)
class ClusterSpec:
    num_devices: int
    device_memory_bytes: float = DEFAULT_DEVICE_MEMORY
    interstage_bandwidth_bytes_per_sec: float = DEFAULT_BANDWIDTH

    def __post_init__(self):
        if int(self.num_devices) != self.num_devices or self.num_devices < 1:
            raise ProfileError(f"num_devices = {self.num_devices!r} must be >= 1")
        if not self.device_memory_bytes > 0:
            raise ProfileError(f"device_memory_bytes = {self.device_memory_bytes!r} must be > 0")
        if not self.interstage_bandwidth_bytes_per_sec > 0:
            raise ProfileError("interstage_bandwidth_bytes_per_sec must be > 0")

    def with_devices(self, n: int) -> "ClusterSpec":
        return ClusterSpec(n, self.device_memory_bytes, self.interstage_bandwidth_bytes_per_sec)


@dataclass(frozen=True)
class OverheadFactors:
    """Synthetic model-parallel overheads.

    ``alpha`` inflates total pipeline latency (communication); ``beta``
    inflates the slowest stage (uneven partition).
    """
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 1:
            raise ProfileError(f"alpha = {self.alpha!r} must be >= 1")
        if not self.beta >= 1:
            raise ProfileError(f"beta = {self.beta!r} must be >= 1")


def single_device_latency(profile: ModelProfile, batch: int = 1) -> float:
    if batch < 1:
        raise ValueError(f"batch = {batch} must be >= 1")
    return profile.latency * (1 + profile.batch_latency_slope * (batch - 1))


def split_evenly(total, parts: int) -> list:
    """Split ``total`` into ``parts`` values whose left-to-right sum is ``total``."""
    if isinstance(total, int):
        base, rem = divmod(total, parts)
        return [base + (1 if i < rem else 0) for i in range(parts)]
    head = [total / parts] * (parts - 1)
    return head + [total - sum(head)]


def synthetic_profile(name: str, latency: float, weight_bytes: int,
                      num_layers: int = DEFAULT_LAYERS, heterogeneous: bool = False,
                      activation_bytes: int = DEFAULT_ACTIVATION_BYTES,
                      batch_latency_slope: float = DEFAULT_BATCH_SLOPE,
                      intra_op_comm_factor: float = DEFAULT_INTRA_OP_COMM) -> ModelProfile:
    """Build a layer-level profile from a whole-model latency and size.

    With ``heterogeneous`` the first and last layers carry twice the latency
    of the others (embedding / head layers).
    """
    if num_layers < 1:
        raise ProfileError("num_layers must be >= 1")
    if heterogeneous and num_layers >= 3:
        weights = [2.0] + [1.0] * (num_layers - 2) + [2.0]
        unit = latency / sum(weights)
        lats = [w * unit for w in weights[:-1]]
        lats.append(latency - sum(lats))
    else:
        lats = split_evenly(float(latency), num_layers)
    return ModelProfile(
        name=name,
        layer_latencies=lats,
        layer_weight_bytes=split_evenly(int(weight_bytes), num_layers),
        activation_bytes_per_boundary=[activation_bytes] * (num_layers - 1),
        batch_latency_slope=batch_latency_slope,
        intra_op_comm_factor=intra_op_comm_factor,
    )


def generate_model_set(set_name: str, num_layers: int = DEFAULT_LAYERS,
                       heterogeneous: bool = False, **kwargs) -> List[ModelProfile]:
    """Materialize one of the named model sets (S1..S4) as profiles."""
    try:
        counts = MODEL_SETS[set_name]
    except KeyError:
        raise ProfileError(f"unknown model set {set_name!r}; "
                           f"choose from {sorted(MODEL_SETS)}") from None
    profiles = []
    for base, count in counts.items():
        size, latency = TABLE_MODELS[base]
        for i in range(count):
            profiles.append(synthetic_profile(
                f"{base}-{i:02d}", latency, size, num_layers=num_layers,
                heterogeneous=heterogeneous, **kwargs))
    return profiles


def load_model_set(path) -> List[ModelProfile]:
    text = Path(path).read_text()
    try:
        docs = [d for d in yaml.safe_load_all(text) if d is not None]
    except yaml.YAMLError as e:
        raise ProfileError(f"{path}: parse error: {e}") from e
    if not docs:
        raise ProfileError(f"{path}: no models")
    profiles = [ModelProfile.from_dict(d) for d in docs]
    names = [p.name for p in profiles]
    if len(set(names)) != len(names):
        raise ProfileError(f"{path}: duplicate model names")
    return profiles


def dump_model_set(profiles: Iterable[ModelProfile], path) -> None:
    docs = [p.to_dict() for p in profiles]
    Path(path).write_text(yaml.safe_dump_all(docs, sort_keys=False))


def profiles_by_name(profiles: Sequence[ModelProfile]) -> dict:
    return {p.name: p for p in profiles}
