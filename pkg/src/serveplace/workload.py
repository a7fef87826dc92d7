"""Request arrival processes, trace ingestion and windowed Gamma resampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

TRACE_COLUMNS = ["function", "window_start_s", "window_len_s", "count"]
WORKLOAD_COLUMNS = ["id", "model", "arrival_s", "slo_s"]


class WorkloadError(ValueError):
    pass


class Request(NamedTuple):
    id: int
    model: str
    arrival: float
    slo: float


@dataclass(frozen=True)
class ArrivalProcess:
    kind: str = "gamma"
    rate: float = 1.0
    cv: float = 1.0
    seed: Optional[int] = 0

    def __post_init__(self):
        if self.kind not in ("poisson", "gamma", "trace-replay"):
            raise WorkloadError(f"unknown arrival process kind {self.kind!r}")
        if not self.rate > 0:
            raise WorkloadError(f"rate = {self.rate!r} must be > 0")
        if not self.cv > 0:
            raise WorkloadError(f"cv = {self.cv!r} must be > 0")
        if self.kind == "poisson" and self.cv != 1:
            raise WorkloadError("a poisson process has cv = 1")


class Workload:
    """Requests as parallel columns, sorted by arrival with ties by id."""

    def __init__(self, ids, models, arrivals, slos, duration: float,
                 meta: Optional[dict] = None, check: bool = True):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.models = np.asarray(models, dtype=object)
        self.arrivals = np.asarray(arrivals, dtype=np.float64)
        self.slos = np.asarray(slos, dtype=np.float64)
        self.duration = float(duration)
        self.meta = dict(meta or {})
        n = len(self.ids)
        if not (len(self.models) == len(self.arrivals) == len(self.slos) == n):
            raise WorkloadError("workload columns have different lengths")
        if check and n:
            if np.any(self.arrivals < 0):
                raise WorkloadError("negative arrival time")
            if np.any(~(self.slos > 0)):
                raise WorkloadError("slo must be > 0")
            if not self.is_sorted():
                raise WorkloadError("workload is not sorted by (arrival, id)")

    @classmethod
    def empty(cls, duration: float = 0.0) -> "Workload":
        return cls([], [], [], [], duration)

    @classmethod
    def from_requests(cls, requests: Iterable[Request], duration: Optional[float] = None,
                      meta=None) -> "Workload":
        reqs = sorted(requests, key=lambda r: (r.arrival, r.id))
        if duration is None:
            duration = reqs[-1].arrival if reqs else 0.0
        return cls([r.id for r in reqs], [r.model for r in reqs],
                   [r.arrival for r in reqs], [r.slo for r in reqs], duration, meta)

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, Workload):
            return NotImplemented
        return (self.duration == other.duration
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.models, other.models)
                and np.array_equal(self.arrivals, other.arrivals)
                and np.array_equal(self.slos, other.slos))

    def is_sorted(self) -> bool:
        a, i = self.arrivals, self.ids
        if len(a) < 2:
            return True
        da = np.diff(a)
        return bool(np.all((da > 0) | ((da == 0) & (np.diff(i) > 0))))

    @property
    def requests(self) -> List[Request]:
        return [Request(int(i), m, float(t), float(s))
                for i, m, t, s in zip(self.ids, self.models, self.arrivals, self.slos)]

    @property
    def model_names(self) -> List[str]:
        return sorted(set(self.models.tolist()))

    def counts(self) -> Dict[str, int]:
        names, c = np.unique(self.models.astype(str), return_counts=True) if len(self) else ([], [])
        return {str(n): int(k) for n, k in zip(names, c)}

    def select(self, mask) -> "Workload":
        return Workload(self.ids[mask], self.models[mask], self.arrivals[mask],
                        self.slos[mask], self.duration, self.meta, check=False)

    def for_models(self, names) -> "Workload":
        names = set(names)
        mask = np.fromiter((m in names for m in self.models), bool, len(self))
        return self.select(mask)

    def window(self, start: float, end: float) -> "Workload":
        lo = np.searchsorted(self.arrivals, start, side="left")
        hi = np.searchsorted(self.arrivals, end, side="left")
        w = self.select(slice(lo, hi))
        w.duration = end if end < math.inf else self.duration
        return w

    def truncate(self, duration: float) -> "Workload":
        return self.window(0.0, duration)

    def with_slo(self, slo_by_model: Dict[str, float]) -> "Workload":
        slos = np.array([slo_by_model[m] for m in self.models], dtype=np.float64)
        return Workload(self.ids, self.models, self.arrivals, slos, self.duration,
                        self.meta, check=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(WORKLOAD_COLUMNS)
            for r in self.requests:
                w.writerow([r.id, r.model, repr(r.arrival), repr(r.slo)])

    @classmethod
    def from_csv(cls, path, duration: Optional[float] = None) -> "Workload":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != WORKLOAD_COLUMNS:
                raise WorkloadError(f"{path}: expected header {','.join(WORKLOAD_COLUMNS)}")
            reqs = [Request(int(r["id"]), r["model"], float(r["arrival_s"]), float(r["slo_s"]))
                    for r in reader]
        return cls.from_requests(reqs, duration)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gamma_arrivals(rng: np.random.Generator, rate: float, cv: float,
                   start: float, end: float) -> np.ndarray:
    """Renewal arrivals with Gamma gaps (mean 1/rate, given cv) in (start, end)."""
    if rate <= 0 or end <= start:
        return np.empty(0)
    shape = 1.0 / (cv * cv)
    scale = cv * cv / rate
    expected = rate * (end - start)
    chunk = int(expected + 10 * math.sqrt(expected + 1) * max(cv, 1.0) + 16)
    out = []
    t = start
    while True:
        gaps = rng.gamma(shape, scale, size=chunk)
        times = t + np.cumsum(gaps)
        if times[-1] >= end:
            out.append(times[times < end])
            break
        out.append(times)
        t = times[-1]
    return np.concatenate(out)


def generate(process: ArrivalProcess, model: str, duration: float,
             slo: float = math.inf) -> Workload:
    if not duration > 0:
        raise WorkloadError("duration must be > 0")
    if process.kind == "trace-replay":
        raise WorkloadError("trace-replay processes come from ingest_trace")
    times = gamma_arrivals(_rng(process.seed), process.rate, process.cv, 0.0, duration)
    n = len(times)
    meta = {"processes": {model: {"kind": process.kind, "rate": process.rate,
                                  "cv": process.cv, "seed": process.seed}}}
    return Workload(np.arange(n), np.full(n, model, dtype=object), times,
                    np.full(n, slo), duration, meta)


def merge(workloads: Sequence[Workload]) -> Workload:
    """Merge streams into one, re-numbering ids in arrival order."""
    workloads = [w for w in workloads]
    if not workloads:
        return Workload.empty()
    arrivals = np.concatenate([w.arrivals for w in workloads])
    models = np.concatenate([w.models for w in workloads])
    slos = np.concatenate([w.slos for w in workloads])
    # stable sort keeps component order on equal timestamps
    order = np.argsort(arrivals, kind="stable")
    meta = {}
    for w in workloads:
        for k, v in w.meta.items():
            if isinstance(v, dict):
                meta.setdefault(k, {}).update(v)
            else:
                meta[k] = v
    return Workload(np.arange(len(order)), models[order], arrivals[order], slos[order],
                    max(w.duration for w in workloads), meta)


def power_law_split(total_rate: float, models: Sequence[str], exponent: float = 0.5) -> List[float]:
    """Per-model rates with model i (1-based) weighted by i ** -exponent."""
    if not models:
        raise WorkloadError("no models")
    if exponent < 0:
        raise WorkloadError("exponent must be >= 0")
    w = np.arange(1, len(models) + 1, dtype=float) ** -exponent
    rates = total_rate * w / w.sum()
    # put rounding residue on the first model so the rates sum to the total
    rates[0] = total_rate - rates[1:].sum()
    return rates.tolist()


def synthetic_workload(models: Sequence[str], rates: Sequence[float], cvs, duration: float,
                       seed: int = 0, slos=None) -> Workload:
    """Independent Gamma streams, one per model, merged.

    ``cvs`` and ``slos`` may be scalars or per-model sequences. Each stream
    gets its own child seed.
    """
    M = len(models)
    cvs = [cvs] * M if np.isscalar(cvs) else list(cvs)
    slos = [math.inf] * M if slos is None else ([slos] * M if np.isscalar(slos) else list(slos))
    children = np.random.SeedSequence(seed).spawn(M)
    streams = []
    for m, r, cv, slo, ss in zip(models, rates, cvs, slos, children):
        if r <= 0:
            continue
        child_seed = int(ss.generate_state(1)[0])
        streams.append(generate(ArrivalProcess("gamma", r, cv, child_seed), m, duration, slo))
    w = merge(streams)
    w.duration = duration
    w.meta["seed"] = seed
    return w


def ingest_trace(path, models: Sequence[str], seed: int = 0, slo: float = math.inf) -> Workload:
    """Expand per-window invocation counts into arrivals.

    Functions are mapped to models round-robin in order of first appearance;
    each window's count is spread uniformly at random over the window.
    """
    if not models:
        raise WorkloadError("no models")
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRACE_COLUMNS:
            raise WorkloadError(
                f"{path}: expected header {','.join(TRACE_COLUMNS)}, got {reader.fieldnames}")
        for lineno, r in enumerate(reader, start=2):
            try:
                rows.append((r["function"], float(r["window_start_s"]),
                             float(r["window_len_s"]), int(r["count"])))
            except (TypeError, ValueError) as e:
                raise WorkloadError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise WorkloadError(f"{path}: empty trace")
    func_index: Dict[str, int] = {}
    for fn, *_ in rows:
        func_index.setdefault(fn, len(func_index))
    rng = _rng(seed)
    arrivals, names = [], []
    duration = 0.0
    for fn, start, length, count in rows:
        if length <= 0 or count < 0 or start < 0:
            raise WorkloadError(f"{path}: invalid row for function {fn!r}")
        duration = max(duration, start + length)
        if count == 0:
            continue
        arrivals.append(start + rng.uniform(0.0, length, size=count))
        names.append(np.full(count, models[func_index[fn] % len(models)], dtype=object))
    if not arrivals:
        return Workload.empty(duration)
    t = np.concatenate(arrivals)
    m = np.concatenate(names)
    order = np.argsort(t, kind="stable")
    meta = {"trace": str(path), "seed": seed,
            "function_map": {fn: models[i % len(models)] for fn, i in func_index.items()}}
    return Workload(np.arange(len(t)), m[order], t[order], np.full(len(t), slo), duration, meta)


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow(r)


def fit_window(arrivals: np.ndarray, window: float):
    """Method-of-moments (rate, cv) for the arrivals inside one window."""
    c = len(arrivals)
    rate = c / window
    if c < 3:
        return rate, 1.0
    gaps = np.diff(arrivals)
    mean = gaps.mean()
    cv = gaps.std(ddof=1) / mean if mean > 0 else 0.0
    if not (cv > 0 and math.isfinite(cv)):
        cv = 1.0
    return rate, cv


class GammaWindowResampler(TransformerMixin, BaseEstimator):
    """Fit a Gamma process per (model, window) and resample with scaled rate and CV.

    ``fit`` learns ``params_``, a mapping model -> array of (rate, cv) per
    window. ``transform`` draws fresh arrivals from the scaled processes; the
    input workload only supplies SLOs and the duration.
    """

    def __init__(self, window=60.0, rate_scale=1.0, cv_scale=1.0, seed=0):
        self.window = window
        self.rate_scale = rate_scale
        self.cv_scale = cv_scale
        self.seed = seed

    def fit(self, X: Workload, y=None):
        if not self.window > 0:
            raise WorkloadError("window must be > 0")
        if not (self.rate_scale > 0 and self.cv_scale > 0):
            raise WorkloadError("scales must be > 0")
        dur = X.duration if X.duration > 0 else (float(X.arrivals[-1]) if len(X) else 0.0)
        nwin = max(1, math.ceil(dur / self.window)) if len(X) else 0
        self.n_windows_ = nwin
        self.duration_ = dur
        self.params_ = {}
        self.slo_ = {}
        for m in X.model_names:
            mask = X.models == m
            t = X.arrivals[mask]
            self.slo_[m] = float(X.slos[mask][0])
            idx = np.minimum((t // self.window).astype(int), nwin - 1)
            edges = np.searchsorted(idx, np.arange(nwin + 1))
            self.params_[m] = np.array(
                [fit_window(t[edges[k]:edges[k + 1]], self.window) for k in range(nwin)])
        return self

    def transform(self, X: Workload) -> Workload:
        check_is_fitted(self, "params_")
        if not self.params_:
            return Workload.empty(self.duration_)
        models = sorted(self.params_)
        children = np.random.SeedSequence(self.seed).spawn(len(models))
        streams = []
        for m, ss in zip(models, children):
            rng = np.random.default_rng(ss)
            parts = []
            for k, (rate, cv) in enumerate(self.params_[m]):
                start = k * self.window
                parts.append(gamma_arrivals(rng, rate * self.rate_scale, cv * self.cv_scale,
                                            start, start + self.window))
            t = np.concatenate(parts) if parts else np.empty(0)
            n = len(t)
            streams.append(Workload(np.arange(n), np.full(n, m, dtype=object), t,
                                    np.full(n, self.slo_[m]), self.duration_, check=False))
        out = merge(streams)
        out.duration = max(self.duration_, self.n_windows_ * self.window)
        out.meta = {"resampled": {"window": self.window, "rate_scale": self.rate_scale,
                                  "cv_scale": self.cv_scale, "seed": self.seed}}
        return out


def refit_and_scale(workload: Workload, window: float, rate_scale: float = 1.0,
                    cv_scale: float = 1.0, seed: int = 0) -> Workload:
    if len(workload) == 0:
        if not window > 0:
            raise WorkloadError("window must be > 0")
        return Workload.empty(workload.duration)
    return GammaWindowResampler(window, rate_scale, cv_scale, seed).fit_transform(workload)


def attach_slo(workload: Workload, latency_by_model: Dict[str, float], slo_scale: float) -> Workload:
    """Set each request's SLO to ``slo_scale`` times its model's single-device latency."""
    if not slo_scale > 0:
        raise WorkloadError("slo_scale must be > 0")
    return workload.with_slo({m: slo_scale * latency_by_model[m] for m in workload.model_names})
