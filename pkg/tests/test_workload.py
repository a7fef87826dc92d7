import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from serveplace.workload import (ArrivalProcess, GammaWindowResampler, Request, Workload,
                                 WorkloadError, attach_slo, fit_window, generate, ingest_trace,
                                 merge, power_law_split, refit_and_scale, synthetic_workload,
                                 write_trace)


def gap_cv(t):
    g = np.diff(t)
    return g.std(ddof=1) / g.mean()


@pytest.mark.parametrize("rate,cv,rate_tol,cv_tol", [
    (1.5, 1.0, 0.01, 0.02),
    (20.0, 3.0, None, 0.05),
    (8.0, 4.0, 0.02, None),
])
def test_generate_moments(rate, cv, rate_tol, cv_tol):
    w = generate(ArrivalProcess("gamma", rate, cv, seed=0), "m", 1e5)
    if rate_tol:
        assert len(w) / 1e5 == pytest.approx(rate, rel=rate_tol)
    if cv_tol:
        assert gap_cv(w.arrivals) == pytest.approx(cv, rel=cv_tol)
    assert w.is_sorted() and w.arrivals.max() < 1e5


def test_generate_deterministic():
    p = ArrivalProcess("gamma", 5.0, 2.0, seed=7)
    assert generate(p, "m", 500) == generate(p, "m", 500)
    assert generate(p, "m", 500) != generate(ArrivalProcess("gamma", 5.0, 2.0, seed=8), "m", 500)


def test_poisson_is_gamma_cv1():
    a = generate(ArrivalProcess("poisson", 3.0, 1.0, seed=1), "m", 100)
    b = generate(ArrivalProcess("gamma", 3.0, 1.0, seed=1), "m", 100)
    assert np.array_equal(a.arrivals, b.arrivals)


@pytest.mark.parametrize("kw", [dict(rate=0), dict(cv=0), dict(kind="weibull"),
                                dict(kind="poisson", cv=2.0)])
def test_process_invariants(kw):
    with pytest.raises(WorkloadError):
        ArrivalProcess(**{"kind": "gamma", "rate": 1.0, "cv": 1.0, **kw})


def test_generate_needs_duration():
    with pytest.raises(WorkloadError):
        generate(ArrivalProcess(), "m", 0)


def test_merge_rates_add():
    streams = [generate(ArrivalProcess("gamma", r, 2.0, seed=i), f"m{i}", 2e4)
               for i, r in enumerate([1.0, 2.5, 4.0])]
    w = merge(streams)
    assert w.is_sorted()
    assert np.array_equal(w.ids, np.arange(len(w)))
    assert len(w) / 2e4 == pytest.approx(7.5, rel=0.02)
    assert w.counts() == {s.models[0]: len(s) for s in streams}


def test_unsorted_rejected():
    with pytest.raises(WorkloadError):
        Workload([0, 1], ["a", "a"], [2.0, 1.0], [1.0, 1.0], 3.0)
    with pytest.raises(WorkloadError):
        Workload([0], ["a"], [1.0], [0.0], 3.0)


def test_ties_broken_by_id():
    w = Workload.from_requests([Request(3, "a", 1.0, 1.0), Request(1, "b", 1.0, 1.0)])
    assert w.ids.tolist() == [1, 3]


def test_trace_round_robin(tmp_path):
    path = tmp_path / "t.csv"
    write_trace(path, [("f1", 0, 60, 2), ("f2", 0, 60, 3), ("f3", 0, 60, 4), ("f4", 0, 60, 5)])
    w = ingest_trace(path, ["m1", "m2"], seed=0)
    assert w.meta["function_map"] == {"f1": "m1", "f2": "m2", "f3": "m1", "f4": "m2"}
    assert w.counts() == {"m1": 6, "m2": 8}


def test_trace_window_expansion(tmp_path):
    path = tmp_path / "t.csv"
    write_trace(path, [("f", 0, 60, 3), ("f", 60, 60, 0), ("f", 120, 60, 2)])
    w = ingest_trace(path, ["m"], seed=4)
    assert len(w) == 5 and w.is_sorted()
    assert np.sum(w.arrivals < 60) == 3
    assert np.all((w.arrivals[3:] >= 120) & (w.arrivals[3:] < 180))
    assert w.duration == 180
    assert ingest_trace(path, ["m"], seed=4) == w


def test_trace_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("function,window_start_s,window_len_s,count,colour\nf,0,60,1,red\n")
    with pytest.raises(WorkloadError, match="header"):
        ingest_trace(bad, ["m"])
    empty = tmp_path / "empty.csv"
    write_trace(empty, [])
    with pytest.raises(WorkloadError, match="empty"):
        ingest_trace(empty, ["m"])
    junk = tmp_path / "junk.csv"
    write_trace(junk, [("f", 0, 60, "many")])
    with pytest.raises(WorkloadError):
        ingest_trace(junk, ["m"])


def test_fit_window():
    assert fit_window(np.array([]), 60) == (0.0, 1.0)
    assert fit_window(np.array([1.0, 5.0]), 60) == (2 / 60, 1.0)
    rate, cv = fit_window(np.array([0.0, 1.0, 3.0, 4.0]), 10)
    assert rate == 0.4
    assert cv == pytest.approx(np.std([1, 2, 1], ddof=1) / (4 / 3))


def test_refit_identity_scales():
    w = generate(ArrivalProcess("gamma", 10.0, 2.0, seed=3), "m", 6000)
    r = GammaWindowResampler(window=600).fit(w)
    rates = r.params_["m"][:, 0]
    # a 600 s window at cv 2 has ~2.6% count noise, so a few windows stray past 5%
    assert np.mean(np.abs(rates / 10.0 - 1) <= 0.05) >= 0.8
    assert rates.mean() == pytest.approx(10.0, rel=0.02)
    out = r.transform(w)
    counts_in = np.histogram(w.arrivals, bins=10, range=(0, 6000))[0]
    counts_out = np.histogram(out.arrivals, bins=10, range=(0, 6000))[0]
    assert counts_out.sum() == pytest.approx(counts_in.sum(), rel=0.1)
    assert np.all(np.abs(counts_out - counts_in) <= 0.25 * counts_in)


def test_refit_rate_scale_doubles():
    w = synthetic_workload(["a", "b"], [5.0, 3.0], 1.5, 3000, seed=1)
    out = refit_and_scale(w, 60, rate_scale=2.0, seed=2)
    assert len(out) == pytest.approx(2 * len(w), rel=0.05)


def test_refit_cv_scale_raises_burstiness():
    w = generate(ArrivalProcess("gamma", 20.0, 1.0, seed=3), "m", 3000)
    out = refit_and_scale(w, 300, cv_scale=3.0, seed=0)
    assert gap_cv(out.arrivals) > 2.0


def test_refit_empty():
    assert len(refit_and_scale(Workload.empty(100), 60)) == 0


def test_refit_deterministic_and_keeps_slo():
    w = attach_slo(synthetic_workload(["a", "b"], [2.0, 1.0], 2.0, 600, seed=0),
                   {"a": 0.1, "b": 0.2}, 5)
    x = refit_and_scale(w, 60, 1.5, 1.2, seed=9)
    assert x == refit_and_scale(w, 60, 1.5, 1.2, seed=9)
    assert set(zip(x.models.tolist(), x.slos.tolist())) == {("a", 0.5), ("b", 1.0)}


def test_resampler_is_sklearn_transformer():
    r = GammaWindowResampler(window=30, rate_scale=2.0)
    assert clone(r).get_params() == {"window": 30, "rate_scale": 2.0, "cv_scale": 1.0, "seed": 0}
    w = synthetic_workload(["a"], [3.0], 1.0, 120, seed=0)
    assert r.fit_transform(w) == clone(r).fit(w).transform(w)
    with pytest.raises(WorkloadError):
        GammaWindowResampler(window=0).fit(w)


@pytest.mark.parametrize("n,e,total,expected", [
    (4, 0.0, 8.0, [2.0, 2.0, 2.0, 2.0]),
    (2, 0.5, 8.0, [4.686, 3.314]),
    (1, 0.5, 8.0, [8.0]),
])
def test_power_law_split(n, e, total, expected):
    rates = power_law_split(total, [f"m{i}" for i in range(n)], e)
    assert rates == pytest.approx(expected, abs=1e-3)


@given(st.floats(0.0, 1e4), st.integers(1, 50), st.floats(0, 3))
def test_power_law_sums_exactly(total, n, e):
    rates = power_law_split(total, list(range(n)), e)
    assert math.fsum(rates) == pytest.approx(total, rel=1e-12, abs=1e-12)
    assert all(a >= b - 1e-9 for a, b in zip(rates[1:], rates[1:][1:]))


def test_power_law_errors():
    with pytest.raises(WorkloadError):
        power_law_split(1.0, [], 0.5)
    with pytest.raises(WorkloadError):
        power_law_split(1.0, ["a"], -1)


def test_csv_roundtrip(tmp_path):
    w = attach_slo(synthetic_workload(["a", "b"], [2.0, 1.0], 3.0, 100, seed=5),
                   {"a": 0.15, "b": 0.4}, 5)
    w.to_csv(tmp_path / "w.csv")
    back = Workload.from_csv(tmp_path / "w.csv", duration=w.duration)
    assert back == w


def test_attach_slo():
    w = synthetic_workload(["a"], [2.0], 1.0, 50, seed=0)
    assert np.all(attach_slo(w, {"a": 0.2}, 5).slos == 1.0)
    with pytest.raises(WorkloadError):
        attach_slo(w, {"a": 0.2}, 0)


def test_window_and_truncate():
    w = synthetic_workload(["a"], [5.0], 1.0, 100, seed=0)
    part = w.window(20, 40)
    assert np.all((part.arrivals >= 20) & (part.arrivals < 40))
    assert len(w.truncate(50)) == np.sum(w.arrivals < 50)
    assert w.window(90, math.inf).duration == 100
