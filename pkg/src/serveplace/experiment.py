"""Config-driven experiments: one-variable sweeps and minimum-device scans.

A config is a YAML mapping; missing keys take the values in ``DEFAULTS``.
``results.csv`` columns are listed in ``RESULT_COLUMNS``; lines starting
with ``#`` before the header carry provenance (config hash, seeds).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .estimators import STRATEGIES, make_strategy
from .layout import InfeasiblePlacementError
from .profiles import GB, ClusterSpec, ProfileError, generate_model_set, load_model_set, synthetic_profile
from .workload import (WorkloadError, attach_slo, ingest_trace, power_law_split, refit_and_scale,
                       synthetic_workload)

log = logging.getLogger(__name__)

SWEEP_VARIABLES = ("num_devices", "rate_scale", "cv_scale", "slo_scale")

RESULT_COLUMNS = ["strategy", "sweep_variable", "sweep_value", "seed", "num_devices",
                  "num_requests", "slo_attainment", "mean_latency", "p99_latency",
                  "status", "config_hash"]

DEFAULTS = {
    "models": {"set": None, "file": None, "synthetic": None,
               "layers": 24, "heterogeneous": False},
    "cluster": {"num_devices": 8, "device_memory_gb": 13.0, "bandwidth_gb_per_s": 10.0},
    "workload": {"source": "synthetic", "trace": None, "total_rate": 10.0, "cv": 4.0,
                 "exponent": 0.5, "duration": 300.0, "window": 60.0, "resample": True,
                 "rate_scale": 1.0, "cv_scale": 1.0, "slo_scale": 5.0},
    "strategies": ["alpaserve", "sr"],
    "strategy_params": {},
    "sweep": None,
    "seeds": [0],
    "budget": {"beam_size": 1, "max_bucket_count": 2, "eval_duration": None,
               "group_sizes": None},
    "max_batch": None,
    "cluster_sizes": None,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and k != "strategy_params":
            if not isinstance(v, dict):
                raise ConfigError(f"{k} must be a mapping")
            for kk in v:
                if kk not in base[k]:
                    raise ConfigError(f"unknown config key {k}.{kk}")
            out[k].update(v)
        else:
            out[k] = v
    return out


def load_config(config) -> dict:
    """Read and validate a config (path, YAML text or dict), filling defaults."""
    base_dir = Path(".")
    if isinstance(config, dict):
        raw = config
    else:
        p = Path(config)
        try:
            raw = yaml.safe_load(p.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: parse error: {e}") from e
        base_dir = p.parent
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg["_base_dir"] = str(base_dir)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    strategies = cfg["strategies"]
    if not strategies:
        raise ConfigError("strategy list is empty")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {sorted(STRATEGIES)}")
    m = cfg["models"]
    if sum(m[k] is not None for k in ("set", "file", "synthetic")) != 1:
        raise ConfigError("models: give exactly one of set, file, synthetic")
    seeds = cfg["seeds"]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    w = cfg["workload"]
    if w["source"] not in ("synthetic", "trace"):
        raise ConfigError(f"workload.source must be synthetic or trace, got {w['source']!r}")
    if w["source"] == "trace" and not w["trace"]:
        raise ConfigError("workload.trace is required for a trace source")
    for k in ("duration", "window", "slo_scale"):
        if not (isinstance(w[k], (int, float)) and w[k] > 0):
            raise ConfigError(f"workload.{k} must be > 0")
    sweep = cfg["sweep"]
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) != {"variable", "values"}:
            raise ConfigError("sweep must have exactly the keys variable and values")
        if sweep["variable"] not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep.variable must be one of {SWEEP_VARIABLES}")
        if not sweep["values"]:
            raise ConfigError("sweep.values is empty")
    sizes = cfg["cluster_sizes"]
    if sizes is not None and (not sizes or any(int(s) != s or s < 1 for s in sizes)):
        raise ConfigError("cluster_sizes must be positive integers")


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    text = json.dumps(clean, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _path(cfg, p):
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def build_models(cfg: dict):
    m = cfg["models"]
    if m["set"] is not None:
        return generate_model_set(m["set"], num_layers=m["layers"], heterogeneous=m["heterogeneous"])
    if m["file"] is not None:
        return load_model_set(_path(cfg, m["file"]))
    syn = m["synthetic"]
    try:
        return [synthetic_profile(f"{syn.get('prefix', 'model')}-{i:02d}", syn["latency"],
                                  int(syn["weight_gb"] * GB), num_layers=m["layers"],
                                  heterogeneous=m["heterogeneous"])
                for i in range(int(syn["count"]))]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"models.synthetic needs count, latency, weight_gb: {e}") from e


def build_cluster(cfg: dict, num_devices: Optional[int] = None) -> ClusterSpec:
    c = cfg["cluster"]
    n = c["num_devices"] if num_devices is None else num_devices
    return ClusterSpec(int(n), c["device_memory_gb"] * GB,
                       c["bandwidth_gb_per_s"] * GB)


def build_workload(cfg: dict, models, seed: int, rate_scale=None, cv_scale=None, slo_scale=None):
    w = cfg["workload"]
    rate_scale = w["rate_scale"] if rate_scale is None else rate_scale
    cv_scale = w["cv_scale"] if cv_scale is None else cv_scale
    slo_scale = w["slo_scale"] if slo_scale is None else slo_scale
    names = [m.name for m in models]
    if w["source"] == "synthetic":
        rates = power_law_split(w["total_rate"] * rate_scale, names, w["exponent"])
        wl = synthetic_workload(names, rates, w["cv"] * cv_scale, w["duration"], seed=seed)
    else:
        wl = ingest_trace(_path(cfg, w["trace"]), names, seed=seed)
        if w["resample"]:
            wl = refit_and_scale(wl, w["window"], rate_scale, cv_scale, seed)
    return attach_slo(wl, {m.name: m.latency for m in models}, slo_scale)


def _strategy(cfg, name, models, cluster):
    b = cfg["budget"]
    params = dict(beam_size=b["beam_size"], max_bucket_count=b["max_bucket_count"],
                  eval_duration=b["eval_duration"], group_sizes=b["group_sizes"],
                  max_batch=cfg["max_batch"], window=cfg["workload"]["window"])
    params.update(cfg["strategy_params"].get(name, {}))
    return make_strategy(name, models, cluster, **params)


def _point_settings(cfg, variable, value):
    s = {"num_devices": cfg["cluster"]["num_devices"], "rate_scale": None,
         "cv_scale": None, "slo_scale": None}
    if variable is not None:
        s[variable] = value
    return s


def run_point(cfg: dict, strategy: str, seed: int, variable=None, value=None,
              out_dir=None) -> dict:
    """One (strategy, sweep value, seed) run; failures become a row status."""
    s = _point_settings(cfg, variable, value)
    row = {"strategy": strategy, "sweep_variable": variable or "",
           "sweep_value": "" if value is None else value, "seed": seed,
           "num_devices": s["num_devices"], "num_requests": 0,
           "slo_attainment": math.nan, "mean_latency": math.nan, "p99_latency": math.nan,
           "status": "ok", "config_hash": config_hash(cfg)}
    try:
        models = build_models(cfg)
        cluster = build_cluster(cfg, s["num_devices"])
        wl = build_workload(cfg, models, seed, s["rate_scale"], s["cv_scale"], s["slo_scale"])
        est = _strategy(cfg, strategy, models, cluster).fit(wl)
        rep = est.predict(wl)
    except (InfeasiblePlacementError, ProfileError, WorkloadError, ValueError) as e:
        row["status"] = f"error: {e}"
        log.warning("%s %s=%s seed %d failed: %s", strategy, variable, value, seed, e)
        return row
    row.update(num_requests=rep.num_requests, slo_attainment=rep.slo_attainment,
               mean_latency=rep.mean_latency, p99_latency=rep.p99_latency)
    if out_dir is not None:
        stem = f"{strategy}_{variable or 'base'}={value if value is not None else ''}_seed{seed}"
        out = Path(out_dir)
        rep.to_json(out / "reports" / f"{stem}.json")
        plms = getattr(est, "placements_", None) or [est.placement_]
        doc = {"windows": [p.to_dict() for p in plms]} if len(plms) > 1 else plms[0].to_dict()
        (out / "placements" / f"{stem}.json").write_text(json.dumps(doc, indent=2))
    return row


def _run_point_args(args):
    return run_point(*args)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_results(rows: List[dict], path, cfg: dict) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash: {config_hash(cfg)}\n")
        f.write(f"# seeds: {' '.join(str(s) for s in cfg['seeds'])}\n")
        f.write(f"# strategies: {' '.join(cfg['strategies'])}\n")
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def read_results(path) -> List[dict]:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def run_experiment(config, out_dir=None, strategies=None, seed=None, parallelism: int = 1) -> List[dict]:
    """Run every (sweep value, strategy, seed) and return rows in that order.

    With ``out_dir``, writes ``results.csv``, ``reports/*.json`` and
    ``placements/*.json``. Points run in up to ``parallelism`` processes;
    rows are collected in the deterministic order regardless.
    """
    cfg = config if isinstance(config, dict) and "_base_dir" in config else load_config(config)
    if strategies is not None:
        cfg = dict(cfg, strategies=list(strategies))
    if seed is not None:
        cfg = dict(cfg, seeds=[int(seed)])
    validate_config(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "placements").mkdir(parents=True, exist_ok=True)
    sweep = cfg["sweep"]
    points = [(None, None)] if sweep is None else [(sweep["variable"], v) for v in sweep["values"]]
    jobs = [(cfg, s, sd, var, val, out_dir)
            for var, val in points for s in cfg["strategies"] for sd in cfg["seeds"]]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            rows = list(ex.map(_run_point_args, jobs))
    else:
        rows = [run_point(*j) for j in jobs]
    if out_dir is not None:
        write_results(rows, Path(out_dir) / "results.csv", cfg)
    return rows


def find_min_devices(config, target: float, strategies=None, seed=None) -> Dict[str, Optional[int]]:
    """Smallest candidate cluster size whose seed-averaged attainment reaches ``target``.

    Sizes are scanned upward without bisection, since attainment need not
    be monotone in the device count for heuristic placements. ``None``
    means the target was not attained at any candidate size.
    """
    if not (isinstance(target, (int, float)) and 0 < target <= 1):
        raise ConfigError(f"target attainment {target!r} must be in (0, 1]")
    cfg = config if isinstance(config, dict) and "_base_dir" in config else load_config(config)
    if strategies is not None:
        cfg = dict(cfg, strategies=list(strategies))
    if seed is not None:
        cfg = dict(cfg, seeds=[int(seed)])
    validate_config(cfg)
    sizes = sorted(cfg["cluster_sizes"] or [cfg["cluster"]["num_devices"]])
    out: Dict[str, Optional[int]] = {}
    for name in cfg["strategies"]:
        out[name] = None
        for n in sizes:
            rows = [run_point(cfg, name, sd, "num_devices", n) for sd in cfg["seeds"]]
            if any(r["status"] != "ok" for r in rows):
                continue
            att = sum(r["slo_attainment"] for r in rows) / len(rows)
            log.info("%s on %d devices: attainment %.4f", name, n, att)
            if att >= target:
                out[name] = n
                break
    return out
