"""Discrete-event simulation of request serving on model-parallel device groups.

Requests go to the hosting group with the fewest waiting requests. Each
group serves FCFS; a request that cannot finish within its SLO when it
reaches the head of the queue is rejected. A request occupies pipeline
stage j for that stage's latency and moves to stage j+1 when done, so a
group overlaps consecutive requests at max-stage-latency spacing.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .layout import Group, InfeasiblePlacementError, Placement
from .profiles import ClusterSpec
from .workload import Request, Workload, WorkloadError

SERVED, REJECTED, MISSED = 0, 1, 2
STATUS_NAMES = ("served", "rejected", "missed")
UNDISPATCHED = -1


@dataclass(frozen=True)
class SimOptions:
    """``max_batch=None`` disables batching. ``admission="none"`` serves
    late requests anyway and marks them missed. ``dispatch="work"`` balances
    on queued work-seconds instead of queue length."""
    max_batch: Optional[int] = None
    admission: str = "reject"
    dispatch: str = "queue-length"
    bucket: float = 1.0

    def __post_init__(self):
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.admission not in ("reject", "none"):
            raise ValueError(f"unknown admission policy {self.admission!r}")
        if self.dispatch not in ("queue-length", "work"):
            raise ValueError(f"unknown dispatch policy {self.dispatch!r}")
        if not self.bucket > 0:
            raise ValueError("bucket must be > 0")


class RequestOutcome(NamedTuple):
    id: int
    model: str
    status: str
    group: int
    arrival: float
    start: float
    finish: float
    latency: float


class GroupState:
    """Runtime state of one device group."""

    def __init__(self, gid: int, group: Group, batching: bool = False):
        self.gid = gid
        self.devices = group.devices
        self.config = group.config
        self.hosted = list(group.models)
        self.by_name = {m.name: m for m in group.models}
        self.stage_free_at = [0.0] * group.config.inter_op
        self.queue: deque = deque()
        self.per_model_queues: Dict[str, deque] = (
            {m.name: deque() for m in group.models} if batching else {})
        self.batching = batching
        self.pending = False
        self.queued_work = 0.0
        self.busy_starts: List[float] = []
        self.busy_ends: List[float] = []

    def queue_length(self) -> int:
        if self.batching:
            return sum(len(q) for q in self.per_model_queues.values())
        return len(self.queue)

    def is_idle(self, now: float) -> bool:
        return self.stage_free_at[0] <= now and self.queue_length() == 0

    def schedule(self, now: float, stage_lats, extra: float):
        """Stage (start, end) times for a job entering stage 0 no earlier than ``now``."""
        fr = self.stage_free_at
        t = now
        spans = []
        for j, d in enumerate(stage_lats):
            s = t if t > fr[j] else fr[j]
            t = s + d
            spans.append((s, t))
        return spans, t + extra

    def commit(self, spans) -> None:
        fr = self.stage_free_at
        for j, (_, e) in enumerate(spans):
            fr[j] = e
        # a job's stages, chained, leave no instant where the group is idle
        self.busy_starts.append(spans[0][0])
        self.busy_ends.append(spans[-1][1])


def _dispatch_key(g: GroupState, now: float, by_work: bool):
    load = g.queued_work if by_work else g.queue_length()
    busy = 0 if g.is_idle(now) else 1
    return (load, busy, g.gid)


def dispatch(request: Request, groups: Sequence[GroupState], now: Optional[float] = None,
             by_work: bool = False) -> Optional[int]:
    """Group id with the shortest queue among groups hosting the request's model.

    Ties go to a group that can start immediately, then to the lowest id.
    Returns None when no group hosts the model.
    """
    now = request.arrival if now is None else now
    hosts = [g for g in groups if request.model in g.by_name]
    if not hosts:
        return None
    return min(hosts, key=lambda g: _dispatch_key(g, now, by_work)).gid


def form_batch(group: GroupState, now: float, max_batch: int, check_slo: bool = True):
    """Pick the model whose queue head arrived first and the longest SLO-safe prefix.

    Returns ``(model_name, requests)``; ``requests`` is empty when even the
    head alone would miss its deadline, and ``(None, [])`` when nothing waits.
    """
    heads = [(q[0].arrival, q[0].id, name)
             for name, q in group.per_model_queues.items() if q]
    if not heads:
        return None, []
    _, _, name = min(heads)
    q = group.per_model_queues[name]
    pm = group.by_name[name]
    limit = min(max_batch, len(q))
    if not check_slo:
        return name, [q[i] for i in range(limit)]
    take = 0
    deadline = math.inf
    for k in range(1, limit + 1):
        r = q[k - 1]
        deadline = min(deadline, r.arrival + r.slo)
        lats, extra = pm.batched(k)
        _, finish = group.schedule(now, lats, extra)
        if finish > deadline:
            break
        take = k
    return name, [q[i] for i in range(take)]


def _merge_intervals(starts: np.ndarray, ends: np.ndarray):
    if len(starts) == 0:
        return np.empty(0), np.empty(0)
    order = np.argsort(starts, kind="stable")
    s, e = starts[order], ends[order]
    cm = np.maximum.accumulate(e)
    new = np.ones(len(s), dtype=bool)
    new[1:] = s[1:] > cm[:-1]
    first = np.flatnonzero(new)
    last = np.r_[first[1:] - 1, len(s) - 1]
    return s[first], cm[last]


def _busy_until(seg_s: np.ndarray, seg_e: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Total busy time in [0, x] for merged, sorted segments."""
    if len(seg_s) == 0:
        return np.zeros_like(x, dtype=float)
    cum = np.r_[0.0, np.cumsum(seg_e - seg_s)]
    k = np.searchsorted(seg_s, x, side="right")
    out = cum[k]
    has = k > 0
    idx = np.maximum(k - 1, 0)
    over = np.where(has, np.maximum(seg_e[idx] - x, 0.0), 0.0)
    return out - over


class SimReport:
    """Per-request outcomes plus aggregate metrics of one simulation."""

    def __init__(self, workload: Workload, status, group, start, finish,
                 busy: Dict[int, tuple], bucket: float, horizon: float):
        self.ids = workload.ids
        self.models = workload.models
        self.arrivals = workload.arrivals
        self.slos = workload.slos
        self.status = status
        self.group = group
        self.start = start
        self.finish = finish
        self.bucket = bucket
        self.horizon = horizon
        self._busy = busy
        served = status == SERVED
        lat = finish[served] - self.arrivals[served]
        self.num_requests = len(status)
        self.num_served = int(served.sum())
        self.num_rejected = int((status == REJECTED).sum())
        self.num_missed = int((status == MISSED).sum())
        self.slo_attainment = self.num_served / max(1, self.num_requests) if self.num_requests else 1.0
        self.mean_latency = float(lat.mean()) if len(lat) else math.nan
        self.p99_latency = float(np.percentile(lat, 99)) if len(lat) else math.nan

    @property
    def latencies(self) -> np.ndarray:
        """finish - arrival for every executed request (nan for rejected)."""
        out = self.finish - self.arrivals
        out[self.status == REJECTED] = np.nan
        return out

    @property
    def outcomes(self) -> List[RequestOutcome]:
        lat = self.latencies
        return [RequestOutcome(int(i), str(m), STATUS_NAMES[s], int(g), float(a),
                               float(st), float(f), float(l))
                for i, m, s, g, a, st, f, l in zip(self.ids, self.models, self.status,
                                                     self.group, self.arrivals, self.start,
                                                     self.finish, lat)]

    def busy_fraction(self) -> Dict[int, float]:
        """Fraction of the horizon each group had at least one stage executing."""
        out = {}
        for gid, (s, e) in self._busy.items():
            busy = float(np.sum(e - s))
            out[gid] = busy / self.horizon if self.horizon > 0 else 0.0
        return out

    @property
    def utilization_timeline(self) -> Dict[int, np.ndarray]:
        nb = max(1, math.ceil(self.horizon / self.bucket))
        edges = np.arange(nb + 1) * self.bucket
        out = {}
        for gid, (s, e) in self._busy.items():
            b = _busy_until(s, e, edges)
            out[gid] = np.diff(b) / self.bucket
        return out

    def unserved_by_model(self) -> Dict[str, int]:
        mask = self.status != SERVED
        names, counts = np.unique(self.models[mask].astype(str), return_counts=True)
        return {str(n): int(c) for n, c in zip(names, counts)}

    def attainment_by_model(self) -> Dict[str, float]:
        out = {}
        for name in sorted(set(self.models.tolist())):
            m = self.models == name
            out[name] = float(np.mean(self.status[m] == SERVED))
        return out

    def summary(self) -> dict:
        return {
            "slo_attainment": self.slo_attainment,
            "mean_latency": self.mean_latency,
            "p99_latency": self.p99_latency,
            "num_requests": self.num_requests,
            "served": self.num_served,
            "rejected": self.num_rejected,
            "missed": self.num_missed,
        }

    def to_json(self, path=None) -> str:
        summ = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in self.summary().items()}
        text = json.dumps(summ, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def write_outcomes_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("id,model,group,status,arrival_s,finish_s,latency_s\n")
            for o in self.outcomes:
                fin = "" if o.status == "rejected" else repr(o.finish)
                lat = "" if o.status == "rejected" else repr(o.latency)
                f.write(f"{o.id},{o.model},{o.group},{o.status},{o.arrival!r},{fin},{lat}\n")

    def write_utilization_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("group,bucket_start_s,busy_fraction\n")
            for gid, frac in sorted(self.utilization_timeline.items()):
                for k, v in enumerate(frac):
                    f.write(f"{gid},{k * self.bucket!r},{float(v)!r}\n")

    def equals(self, other: "SimReport") -> bool:
        """Bit-exact comparison of outcomes."""
        return (np.array_equal(self.ids, other.ids)
                and np.array_equal(self.status, other.status)
                and np.array_equal(self.group, other.group)
                and np.array_equal(self.start, other.start, equal_nan=True)
                and np.array_equal(self.finish, other.finish, equal_nan=True))


def slo_attainment(report: SimReport) -> float:
    return report.slo_attainment


def _model_codes(workload: Workload):
    # cached on the workload: search loops simulate the same one many times
    cached = getattr(workload, "_model_codes", None)
    if cached is None:
        if len(workload):
            names, codes = np.unique(workload.models.astype(str), return_inverse=True)
            cached = ([str(n) for n in names], codes.tolist())
        else:
            cached = ([], [])
        workload._model_codes = cached
    return cached


class Simulation:
    """Event loop over one workload; the placement may be swapped between runs."""

    def __init__(self, workload: Workload, options: SimOptions = SimOptions(),
                 cluster: Optional[ClusterSpec] = None):
        if not workload.is_sorted():
            raise WorkloadError("workload must be sorted by arrival")
        self.workload = workload
        self.options = options
        self.cluster = cluster
        self.names, self._codes = _model_codes(workload)
        self.code_of = {n: i for i, n in enumerate(self.names)}
        self._arr = workload.arrivals.tolist()
        self._slo = workload.slos.tolist()
        n = len(workload)
        self.status = np.full(n, REJECTED, dtype=np.int8)
        self.group = np.full(n, UNDISPATCHED, dtype=np.int64)
        self.start = np.full(n, np.nan)
        self.finish = np.full(n, np.nan)
        self._status = [REJECTED] * n
        self._group = [UNDISPATCHED] * n
        self._start = [math.nan] * n
        self._finish = [math.nan] * n
        self.next_arrival = 0
        self.now = 0.0
        self.groups: List[GroupState] = []
        self._heap: list = []
        self._hosts: List[list] = [[] for _ in self.names]
        self._busy_archive: Dict[int, list] = {}

    # -- placement ------------------------------------------------------

    def install(self, placement: Placement, now: Optional[float] = None) -> "Simulation":
        """Switch to ``placement``. In-flight work keeps its devices busy;
        waiting requests are dispatched again under the new groups."""
        placement.check(self.cluster)
        now = self.now if now is None else now
        device_busy: Dict[int, float] = {}
        waiting = []
        for g in self.groups:
            n = g.config.intra_op
            for j, free in enumerate(g.stage_free_at):
                for d in g.devices[j * n:(j + 1) * n]:
                    device_busy[d] = free
            if g.batching:
                for q in g.per_model_queues.values():
                    waiting.extend(r.id for r in q)
            else:
                waiting.extend(g.queue)
            self._busy_archive.setdefault(g.gid, []).append((g.busy_starts, g.busy_ends))
        batching = self.options.max_batch is not None
        self.groups = [GroupState(i, g, batching) for i, g in enumerate(placement.groups)]
        self._hosts = [[] for _ in self.names]
        for gs in self.groups:
            n = gs.config.intra_op
            for j in range(gs.config.inter_op):
                devs = gs.devices[j * n:(j + 1) * n]
                gs.stage_free_at[j] = max([device_busy.get(d, 0.0) for d in devs] + [0.0])
            # per-code stage latencies for the fast path
            gs.lat = {}
            for pm in gs.hosted:
                code = self.code_of.get(pm.name)
                if code is not None:
                    self._hosts[code].append(gs)
                    gs.lat[code] = (pm.stage_latencies, pm.comm_latency, pm.max_stage_latency)
        self._heap = []
        self.now = now
        for idx in sorted(waiting):
            self._arrive(idx, now)
        return self

    # -- core -------------------------------------------------------------
    # A group has a pending free event exactly when its queue is non-empty.

    def _try_start(self, g: GroupState, idx: int, t: float) -> bool:
        lat, extra, _ = g.lat[self._codes[idx]]
        fr = g.stage_free_at
        if len(lat) == 1:
            s0 = t if t > fr[0] else fr[0]
            e = s0 + lat[0]
            ends = None
        else:
            ends = []
            e = t
            s0 = None
            for j, d in enumerate(lat):
                s = e if e > fr[j] else fr[j]
                if s0 is None:
                    s0 = s
                e = s + d
                ends.append(e)
        finish = e + extra
        self._group[idx] = g.gid
        if finish - self._arr[idx] > self._slo[idx]:
            if self.options.admission == "reject":
                self._status[idx] = REJECTED
                return False
            self._status[idx] = MISSED
        else:
            self._status[idx] = SERVED
        if ends is None:
            fr[0] = e
        else:
            fr[:] = ends
        g.busy_starts.append(s0)
        g.busy_ends.append(e)
        self._start[idx] = s0
        self._finish[idx] = finish
        return True

    def _push(self, g: GroupState, t: float, idx: int) -> None:
        g.pending = True
        heapq.heappush(self._heap, (t, idx, g.gid))

    def _arrive(self, idx: int, t: float) -> None:
        hosts = self._hosts[self._codes[idx]]
        if not hosts:
            self._status[idx] = REJECTED
            return
        if len(hosts) == 1:
            g = hosts[0]
        else:
            by_work = self.options.dispatch == "work"
            g = min(hosts, key=lambda h: _dispatch_key(h, t, by_work))
        self._group[idx] = g.gid
        if g.batching:
            self._arrive_batching(g, idx, t)
            return
        q = g.queue
        if not q and g.stage_free_at[0] <= t:
            self._try_start(g, idx, t)
            return
        q.append(idx)
        g.queued_work += g.lat[self._codes[idx]][2]
        if not g.pending:
            self._push(g, g.stage_free_at[0] if g.stage_free_at[0] > t else t, idx)

    def _free(self, g: GroupState, t: float) -> None:
        g.pending = False
        if g.batching:
            self._free_batching(g, t)
            return
        q = g.queue
        while q:
            idx = q.popleft()
            g.queued_work -= g.lat[self._codes[idx]][2]
            if self._try_start(g, idx, t):
                if q:
                    self._push(g, g.stage_free_at[0], q[0])
                return
        g.queued_work = 0.0

    # -- batching ---------------------------------------------------------

    def _request(self, idx: int) -> Request:
        return Request(idx, self.names[self._codes[idx]], self._arr[idx], self._slo[idx])

    def _start_batch(self, g: GroupState, name: str, batch: List[Request], t: float) -> None:
        pm = g.by_name[name]
        lats, extra = pm.batched(len(batch))
        spans, finish = g.schedule(t, lats, extra)
        g.commit(spans)
        q = g.per_model_queues[name]
        for r in batch:
            if q and q[0].id == r.id:
                q.popleft()
                g.queued_work -= g.lat[self._codes[r.id]][2]
            idx = r.id
            self._group[idx] = g.gid
            self._start[idx] = spans[0][0]
            self._finish[idx] = finish
            self._status[idx] = SERVED if finish - r.arrival <= r.slo else MISSED
        if g.queue_length():
            self._push(g, g.stage_free_at[0], batch[0].id)

    def _arrive_batching(self, g: GroupState, idx: int, t: float) -> None:
        r = self._request(idx)
        g.per_model_queues[r.model].append(r)
        g.queued_work += g.lat[self._codes[idx]][2]
        if g.pending:
            return
        if g.stage_free_at[0] <= t:
            self._free_batching(g, t)
        else:
            self._push(g, g.stage_free_at[0], idx)

    def _free_batching(self, g: GroupState, t: float) -> None:
        check = self.options.admission == "reject"
        while True:
            name, batch = form_batch(g, t, self.options.max_batch, check_slo=check)
            if name is None:
                g.queued_work = 0.0
                return
            if batch:
                self._start_batch(g, name, batch, t)
                return
            r = g.per_model_queues[name].popleft()
            g.queued_work -= g.lat[self._codes[r.id]][2]
            self._status[r.id] = REJECTED

    # -- driver -----------------------------------------------------------

    def run(self, until: float = math.inf) -> "Simulation":
        """Process arrivals before ``until`` and all events at or before the last one handled."""
        heap = self._heap
        arr = self._arr
        n = len(arr)
        i = self.next_arrival
        groups = self.groups
        pop = heapq.heappop
        while True:
            ta = arr[i] if i < n else math.inf
            if ta >= until:
                ta = math.inf
            if heap and heap[0][0] <= ta and heap[0][0] < until:
                t, _, gid = pop(heap)
                self.now = t
                self._free(groups[gid], t)
            elif ta < math.inf:
                self.now = ta
                self._arrive(i, ta)
                i += 1
            else:
                break
        self.next_arrival = i
        if until < math.inf:
            self.now = until
        return self

    def report(self) -> SimReport:
        self.status[:] = self._status
        self.group[:] = self._group
        self.start[:] = self._start
        self.finish[:] = self._finish
        busy: Dict[int, tuple] = {}
        archive = {k: list(v) for k, v in self._busy_archive.items()}
        for g in self.groups:
            archive.setdefault(g.gid, []).append((g.busy_starts, g.busy_ends))
        last_finish = np.nanmax(self.finish) if np.any(~np.isnan(self.finish)) else 0.0
        horizon = max(self.workload.duration, float(last_finish))
        for gid, parts in sorted(archive.items()):
            s = np.concatenate([np.asarray(p[0], dtype=float) for p in parts])
            e = np.concatenate([np.asarray(p[1], dtype=float) for p in parts])
            busy[gid] = _merge_intervals(s, e)
        return SimReport(self.workload, self.status.copy(), self.group.copy(),
                         self.start.copy(), self.finish.copy(), busy,
                         self.options.bucket, horizon)


def simulate(placement: Placement, workload: Workload, options: SimOptions = SimOptions(),
             cluster: Optional[ClusterSpec] = None) -> SimReport:
    return Simulation(workload, options, cluster).install(placement, 0.0).run().report()
