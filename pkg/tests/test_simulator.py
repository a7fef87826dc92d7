import json
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import flat_model, one_group, placement
from serveplace.layout import InfeasiblePlacementError
from serveplace.planner import ParallelConfig, parallelize_with_overheads
from serveplace.profiles import GB, ClusterSpec, OverheadFactors
from serveplace.queueing import MD1Params, md1_latency
from serveplace.simulator import (MISSED, REJECTED, SERVED, GroupState, SimOptions, dispatch,
                                  form_batch, simulate, slo_attainment)
from serveplace.workload import (Request, Workload, WorkloadError, attach_slo, merge,
                                 synthetic_workload)


def wl(reqs, duration=None):
    return Workload.from_requests([Request(i, m, t, s) for i, (m, t, s) in enumerate(reqs)], duration)


def test_serial_queueing():
    m = flat_model("m", 0.4)
    rep = simulate(placement(one_group([m])), wl([("m", 0.0, 4.0), ("m", 0.0, 4.0)]))
    assert rep.latencies.tolist() == pytest.approx([0.4, 0.8])
    assert rep.slo_attainment == 1.0


def test_completion_before_arrival_on_ties():
    m = flat_model("m", 1.0)
    rep = simulate(placement(one_group([m])), wl([("m", 0.0, 10), ("m", 1.0, 10)]))
    assert rep.start.tolist() == [0.0, 1.0]


def test_reject_at_dequeue():
    m = flat_model("m", 0.4)
    rep = simulate(placement(one_group([m])), wl([("m", 0.0, 0.5), ("m", 0.0, 0.5), ("m", 0.1, 0.9)]))
    assert rep.status.tolist() == [SERVED, REJECTED, SERVED]
    assert math.isnan(rep.start[1])
    assert rep.finish[2] == pytest.approx(0.8)
    assert rep.num_served + rep.num_rejected + rep.num_missed == 3


def test_admission_none_marks_missed():
    m = flat_model("m", 0.4)
    rep = simulate(placement(one_group([m])), wl([("m", 0.0, 0.5), ("m", 0.0, 0.5)]),
                   SimOptions(admission="none"))
    assert rep.status.tolist() == [SERVED, MISSED]
    assert rep.slo_attainment == 0.5
    assert rep.finish[1] == pytest.approx(0.8)


def test_unhosted_model_rejected():
    m = flat_model("m", 0.4)
    rep = simulate(placement(one_group([m])), wl([("x", 0.0, 5), ("m", 0.0, 5)]))
    assert rep.status.tolist() == [REJECTED, SERVED]
    assert rep.group[0] == -1


def _two_model(pipelined, duration, seed=0):
    a, b = flat_model("a", 0.4), flat_model("b", 0.4)
    w = synthetic_workload(["a", "b"], [1.5, 1.5], 1.0, duration, seed=seed)
    if pipelined:
        plm = placement(one_group([a, b], s=2))
    else:
        plm = placement(one_group([a]), one_group([b], first=1))
    return simulate(plm, w)


def test_two_model_case_short():
    assert _two_model(False, 2e4).mean_latency == pytest.approx(0.70, rel=0.05)
    assert _two_model(True, 2e4).mean_latency == pytest.approx(0.55, rel=0.05)


@pytest.mark.parametrize("util", [0.3, 0.6])
def test_md1_short(util):
    D = 0.5
    m = flat_model("m", D)
    w = synthetic_workload(["m"], [util / D], 1.0, 1e5 * D, seed=1)
    rep = simulate(placement(one_group([m])), w)
    assert rep.mean_latency == pytest.approx(md1_latency(MD1Params(util / D, D)), rel=0.04)


def test_pipeline_throughput():
    D = 0.4
    m = flat_model("m", D)
    w = synthetic_workload(["m"], [0.9 * 4 / D], 1.0, 2000, seed=2)
    piped = simulate(placement(one_group([m], s=4)), w)
    assert piped.mean_latency == pytest.approx(md1_latency(MD1Params(9.0, 0.1)) + 0.3, rel=0.1)
    single = simulate(placement(one_group([m])), w)
    assert single.mean_latency > 100 * piped.mean_latency


def test_overhead_model_pipeline():
    m = flat_model("m", 0.4)
    pm = parallelize_with_overheads(m, 2, OverheadFactors(1.0, 1.5))
    from serveplace.layout import Group
    g = Group((0, 1), ParallelConfig(2, 1), (pm,))
    rep = simulate(placement(g), wl([("m", 0.0, 9), ("m", 0.0, 9)]))
    # the 0.3 s stage limits spacing: second request leaves 0.3 s after the first
    assert rep.finish.tolist() == pytest.approx([0.4, 0.7])


def _states(queue_lengths, models=("m",)):
    out = []
    for gid, q in enumerate(queue_lengths):
        gs = GroupState(gid, one_group([flat_model(n) for n in models]))
        gs.queue = deque(range(q))
        gs.stage_free_at[0] = 10.0 if q else 0.0
        out.append(gs)
    return out


def test_dispatch_examples():
    r = Request(0, "m", 0.0, 5.0)
    assert dispatch(r, _states([3, 1, 2])) == 1
    assert dispatch(r, _states([2, 2])) == 0
    assert dispatch(Request(0, "x", 0.0, 5.0), _states([0, 0])) is None


def test_dispatch_prefers_group_that_can_start():
    gs = _states([0, 0])
    gs[0].stage_free_at[0] = 5.0  # busy with an in-flight request, nothing waiting
    assert dispatch(Request(0, "m", 1.0, 5.0), gs) == 1


def test_work_dispatch():
    gs = _states([3, 1], models=("m",))
    gs[0].queued_work, gs[1].queued_work = 0.1, 2.0
    assert dispatch(Request(0, "m", 0.0, 5.0), gs, by_work=True) == 0


def _batch_group(reqs, max_batch, delta=1.0):
    m = flat_model("m", 0.4, batch_latency_slope=delta)
    gs = GroupState(0, one_group([m]), batching=True)
    for r in reqs:
        gs.per_model_queues[r.model].append(r)
    return form_batch(gs, 0.0, max_batch)


def test_form_batch_examples():
    two = [Request(0, "m", 0.0, 0.8), Request(1, "m", 0.0, 0.8)]
    assert [r.id for r in _batch_group(two, 1)[1]] == [0]
    assert [r.id for r in _batch_group(two, 4)[1]] == [0, 1]
    tight = [Request(0, "m", 0.0, 0.8), Request(1, "m", 0.0, 0.7)]
    assert [r.id for r in _batch_group(tight, 4)[1]] == [0]
    hopeless = [Request(0, "m", 0.0, 0.3)]
    assert _batch_group(hopeless, 4) == ("m", [])
    assert form_batch(GroupState(0, one_group([flat_model("m")]), batching=True), 0.0, 2) == (None, [])


def test_form_batch_picks_oldest_head():
    a, b = flat_model("a", 0.4), flat_model("b", 0.4)
    gs = GroupState(0, one_group([a, b]), batching=True)
    gs.per_model_queues["a"].append(Request(1, "a", 0.2, 9))
    gs.per_model_queues["b"].append(Request(0, "b", 0.1, 9))
    assert form_batch(gs, 0.3, 4)[0] == "b"


def _random_setup(seed, n_models=2, s=1, rate=4.0, cv=2.0, dur=60.0, scale=3.0):
    rng = np.random.default_rng(seed)
    ms = [flat_model(f"m{i}", float(rng.uniform(0.05, 0.5))) for i in range(n_models)]
    w = synthetic_workload([m.name for m in ms], [rate] * n_models, cv, dur, seed=seed)
    w = attach_slo(w, {m.name: m.latency for m in ms}, scale)
    return ms, w


def test_batch_of_one_matches_fcfs():
    ms, w = _random_setup(3, n_models=3, s=2)
    plm = placement(one_group(ms, s=2), one_group(ms[:2], first=2))
    a = simulate(plm, w)
    b = simulate(plm, w, SimOptions(max_batch=1))
    assert a.equals(b)


def test_batching_helps_loose_slo():
    ms, w = _random_setup(4, n_models=1, rate=6.0, cv=3.0, dur=300, scale=10)
    m = flat_model("m0", ms[0].latency, batch_latency_slope=0.5)
    plm = placement(one_group([m]))
    assert simulate(plm, w, SimOptions(max_batch=4)).slo_attainment >= simulate(plm, w).slo_attainment


@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 3), st.sampled_from([None, 1, 3]),
       st.sampled_from(["reject", "none"]))
def test_conservation_and_outcome_invariants(seed, n_models, s, mb, adm):
    ms, w = _random_setup(seed, n_models, dur=20)
    plm = placement(one_group(ms, s=s), one_group(ms[:1], first=s))
    rep = simulate(plm, w, SimOptions(max_batch=mb, admission=adm))
    assert rep.num_served + rep.num_rejected + rep.num_missed == rep.num_requests == len(w)
    served = rep.status == SERVED
    assert np.all(rep.finish[served] - w.arrivals[served] <= w.slos[served] + 1e-12)
    rejected = rep.status == REJECTED
    assert np.all(np.isnan(rep.start[rejected]))
    assert np.all(rep.start[~rejected] >= w.arrivals[~rejected])
    if adm == "reject":
        assert rep.num_missed == 0
    assert 0.0 <= rep.slo_attainment <= 1.0


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 3))
def test_work_conservation(seed, s, n_models):
    """Stage 0 starts each request as soon as it is both free and the request has arrived."""
    ms, w = _random_setup(seed, n_models, dur=30)
    g = one_group(ms, s=s)
    rep = simulate(placement(g), w)
    first_stage = {pm.name: pm.stage_latencies[0] for pm in g.models}
    free = 0.0
    for i in np.flatnonzero(rep.status == SERVED):
        assert rep.start[i] == max(w.arrivals[i], free)
        free = rep.start[i] + first_stage[w.models[i]]


@given(st.integers(0, 10**6), st.integers(1, 3))
def test_attainment_monotone_in_slo_scale(seed, s):
    ms, w = _random_setup(seed, n_models=1, rate=8.0, dur=40)
    plm = placement(one_group(ms, s=s))
    att = [simulate(plm, attach_slo(w, {ms[0].name: ms[0].latency}, k)).slo_attainment
           for k in (0.5, 1, 1.5, 2, 3, 5, 10)]
    assert all(b >= a for a, b in zip(att, att[1:]))


def test_determinism():
    ms, w = _random_setup(9, 3)
    plm = placement(one_group(ms, s=2), one_group(ms, first=2))
    assert simulate(plm, w).equals(simulate(plm, w))


def test_slo_attainment_conventions():
    m = flat_model("m", 0.4)
    assert slo_attainment(simulate(placement(one_group([m])), Workload.empty(10))) == 1.0
    rej = simulate(placement(one_group([m])), wl([("m", 0.0, 0.1)] * 3))
    assert rej.slo_attainment == 0.0
    reqs = [("m", float(i), 1.0) for i in range(99)] + [("m", 98.1, 0.5)]
    rep = simulate(placement(one_group([m])), wl(sorted(reqs, key=lambda r: r[1])))
    assert rep.slo_attainment == pytest.approx(0.99)


def test_memory_infeasible_placement():
    big = flat_model("big", 0.4, weight_gb=20)
    with pytest.raises(InfeasiblePlacementError):
        simulate(placement(one_group([big])), wl([("big", 0.0, 5)]), cluster=ClusterSpec(1))


def test_unsorted_workload():
    m = flat_model("m", 0.4)
    bad = Workload([0, 1], ["m", "m"], [2.0, 1.0], [5.0, 5.0], 3.0, check=False)
    with pytest.raises(WorkloadError):
        simulate(placement(one_group([m])), bad)


def test_utilization_and_exports(tmp_path):
    m = flat_model("m", 0.5)
    rep = simulate(placement(one_group([m], s=2)), wl([("m", 0.0, 9), ("m", 0.0, 9), ("m", 2.5, 0.1)], 4.0))
    # stage spans [0,0.25],[0.25,0.5] and [0.25,0.5],[0.5,0.75]: busy 0..0.75
    assert rep.busy_fraction() == {0: pytest.approx(0.75 / 4)}
    tl = rep.utilization_timeline[0]
    assert tl.tolist() == pytest.approx([0.75, 0.0, 0.0, 0.0])
    summ = json.loads(rep.to_json(tmp_path / "r.json"))
    assert summ["served"] == 2 and summ["rejected"] == 1 and summ["slo_attainment"] == pytest.approx(2 / 3)
    rep.write_outcomes_csv(tmp_path / "o.csv")
    rep.write_utilization_csv(tmp_path / "u.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "id,model,group,status,arrival_s,finish_s,latency_s"
    assert lines[3].startswith("2,m,0,rejected,2.5,,")
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "group,bucket_start_s,busy_fraction"
    assert rep.attainment_by_model() == {"m": pytest.approx(2 / 3)}
    assert rep.unserved_by_model() == {"m": 1}


def test_options_validation():
    for kw in (dict(max_batch=0), dict(admission="maybe"), dict(dispatch="random"), dict(bucket=0)):
        with pytest.raises(ValueError):
            SimOptions(**kw)
