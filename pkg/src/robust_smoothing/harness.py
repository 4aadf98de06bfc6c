"""Monte-Carlo experiment runner behind the command line.

A run simulates ``trials`` independent trajectories (seed ``seed + trial``),
smooths each with every configured variant, and aggregates per-iteration
RMSE, NEES, cost and divergence over trials. Aggregation happens in trial
order after all workers finish, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .cost_functions import ieks_cost
from .experiments import (
    DEFAULT_HORIZON,
    DEFAULT_PRIOR_MEAN,
    DEFAULT_PRIOR_VAR,
    DEFAULT_QV,
    DEFAULT_QW,
    DEFAULT_T,
    POSITION,
    BearingsSensorConfig,
    CoordinatedTurnModel,
    ct_bearings_model,
    nees,
    random_affine_model,
    rmse,
    simulate,
)
from .iterative_smoothers import SMOOTHER_NAMES, Armijo, GridSearch, SmootherConfig, initial_estimate, smooth
from .linearization import Cubature, Unscented

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "smoother", "iteration", "rmse_mean", "rmse_se", "nees_mean", "nees_se", "diverged_fraction", "mean_cost",
)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# Every accepted key with its default; ``None`` marks "no default / optional".
DEFAULTS: dict = {
    "experiment": {"name": "experiment", "trials": 1, "seed": 0, "workers": 0},
    "model": {
        "kind": "ct_bearings",
        "horizon": DEFAULT_HORIZON,
        "T": DEFAULT_T,
        "q_v": DEFAULT_QV,
        "q_w": DEFAULT_QW,
        "prior_mean": list(DEFAULT_PRIOR_MEAN),
        "prior_var": list(DEFAULT_PRIOR_VAR),
        "wrap_angles": False,
        "state_dim": 4,
        "meas_dim": 2,
        "model_seed": 0,
    },
    "sensors": {
        "positions": [[-1.5, 0.5], [1.0, 1.0]],
        "stds": [0.5, 0.5],
        "schedule": None,
    },
    "initialization": "smoother",
    "metrics": {
        "rmse_components": list(POSITION),
        "nees_components": None,
        "divergence_rmse": 1.0,
    },
    "smoother_defaults": {
        "max_iter": 10,
        "tol": 1e-6,
        "inner_iters": 1,
        "scheme": "cubature",
        "kappa": None,
        "line_search": "grid",
        "grid_size": 10,
        "armijo_c1": 1e-4,
        "armijo_shrink": 0.5,
        "armijo_max_backtracks": 20,
        "lam0": 0.01,
        "nu": 10.0,
        "lam_max": 1e10,
        "joseph": False,
    },
    "smoothers": list(SMOOTHER_NAMES),
    "output": {"dir": "results", "trajectories": True},
}

_SCHEDULE_KEYS = {"every", "sensors", "stds"}


def _merge(defaults: dict, given: Any, where: str) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(map(str, unknown)))}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _number(v, where: str, positive: bool = False, integer: bool = False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be a number")
    if integer and int(v) != v:
        raise ConfigError(f"{where} must be an integer")
    if positive and not v > 0:
        raise ConfigError(f"{where} must be positive")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment configuration (all defaults filled in)."""

    data: dict

    @property
    def trials(self) -> int:
        return self.data["experiment"]["trials"]

    @property
    def seed(self) -> int:
        return self.data["experiment"]["seed"]

    @property
    def workers(self) -> int:
        return self.data["experiment"]["workers"]

    @property
    def smoother_names(self) -> list:
        return [s["name"] for s in self.data["smoothers"]]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output"]["dir"])

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        for key in ("seed", "trials", "workers"):
            if kw.get(key) is not None:
                data["experiment"][key] = kw[key]
        if kw.get("out") is not None:
            data["output"]["dir"] = str(kw["out"])
        return parse_config(data)


def _parse_smoother(entry, defaults: dict, i: int) -> dict:
    if isinstance(entry, str):
        entry = {"name": entry}
    if not isinstance(entry, dict) or "name" not in entry:
        raise ConfigError(f"smoothers[{i}] must be a name or a mapping with 'name'")
    opts = _merge({"name": None, "label": None, **defaults}, entry, f"smoothers[{i}]")
    name = str(opts["name"]).upper()
    if name not in SMOOTHER_NAMES:
        raise ConfigError(f"smoothers[{i}]: unknown smoother {opts['name']!r}; choose from {', '.join(SMOOTHER_NAMES)}")
    opts["name"] = name
    opts["label"] = str(opts["label"] or name)
    if opts["scheme"] not in ("cubature", "unscented"):
        raise ConfigError(f"smoothers[{i}].scheme must be 'cubature' or 'unscented'")
    if opts["line_search"] not in ("grid", "armijo"):
        raise ConfigError(f"smoothers[{i}].line_search must be 'grid' or 'armijo'")
    try:
        smoother_config(opts)
    except ValueError as exc:
        raise ConfigError(f"smoothers[{i}]: {exc}") from exc
    return opts


def smoother_config(opts: dict) -> SmootherConfig:
    scheme = Cubature() if opts["scheme"] == "cubature" else Unscented(opts["kappa"])
    if opts["line_search"] == "grid":
        ls = GridSearch(int(opts["grid_size"]))
    else:
        ls = Armijo(opts["armijo_c1"], opts["armijo_shrink"], int(opts["armijo_max_backtracks"]))
    return SmootherConfig.from_name(
        opts["name"],
        scheme=scheme,
        max_iter=int(opts["max_iter"]),
        tol=float(opts["tol"]),
        inner_iters=int(opts["inner_iters"]),
        line_search=ls,
        lam0=float(opts["lam0"]),
        nu=float(opts["nu"]),
        lam_max=float(opts["lam_max"]),
        joseph=bool(opts["joseph"]),
    )


def parse_config(raw: Any) -> ExperimentConfig:
    """Validate a config tree and fill in defaults.

    Raises
    ------
    ConfigError
        Unknown keys, wrong types or out-of-range values.
    """
    top = _merge({k: None for k in DEFAULTS}, raw, "config")
    data: dict = {}
    for section in ("experiment", "model", "sensors", "metrics", "smoother_defaults", "output"):
        data[section] = _merge(DEFAULTS[section], top[section], section)
    data["initialization"] = top["initialization"] or DEFAULTS["initialization"]

    exp = data["experiment"]
    exp["trials"] = _number(exp["trials"], "experiment.trials", positive=True, integer=True)
    exp["seed"] = _number(exp["seed"], "experiment.seed", integer=True)
    exp["workers"] = _number(exp["workers"], "experiment.workers", integer=True)
    if exp["workers"] < 0:
        raise ConfigError("experiment.workers must be >= 0 (0 = all cores)")

    model = data["model"]
    if model["kind"] not in ("ct_bearings", "linear"):
        raise ConfigError("model.kind must be 'ct_bearings' or 'linear'")
    model["horizon"] = _number(model["horizon"], "model.horizon", positive=True, integer=True)
    for key in ("T",):
        model[key] = _number(model[key], f"model.{key}", positive=True)
    for key in ("q_v", "q_w"):
        model[key] = _number(model[key], f"model.{key}")
        if model[key] < 0:
            raise ConfigError(f"model.{key} must be nonnegative")
    for key in ("state_dim", "meas_dim"):
        model[key] = _number(model[key], f"model.{key}", positive=True, integer=True)
    model["model_seed"] = _number(model["model_seed"], "model.model_seed", integer=True)
    if len(model["prior_mean"]) != 5 or len(model["prior_var"]) != 5:
        raise ConfigError("model.prior_mean and model.prior_var need 5 entries")
    if any(v <= 0 for v in model["prior_var"]):
        raise ConfigError("model.prior_var entries must be positive")

    sched = data["sensors"]["schedule"]
    if sched is not None:
        _merge({k: None for k in _SCHEDULE_KEYS}, sched, "sensors.schedule")
        if set(sched) != _SCHEDULE_KEYS:
            raise ConfigError(f"sensors.schedule needs keys {sorted(_SCHEDULE_KEYS)}")
    if data["initialization"] not in ("smoother", "prior"):
        raise ConfigError("initialization must be 'smoother' or 'prior'")
    try:
        build_model(data)
    except ConfigError:
        raise
    except (ValueError, TypeError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"invalid model or sensor settings: {exc}") from exc

    met = data["metrics"]
    met["divergence_rmse"] = _number(met["divergence_rmse"], "metrics.divergence_rmse", positive=True)
    d = 5 if model["kind"] == "ct_bearings" else model["state_dim"]
    for key in ("rmse_components", "nees_components"):
        comps = met[key]
        if comps is not None and (not comps or any(not isinstance(c, int) or not 0 <= c < d for c in comps)):
            raise ConfigError(f"metrics.{key} must list state indices in [0, {d})")

    names = top["smoothers"] if top["smoothers"] is not None else DEFAULTS["smoothers"]
    if not isinstance(names, list) or not names:
        raise ConfigError("smoothers must be a non-empty list")
    data["smoothers"] = [_parse_smoother(e, data["smoother_defaults"], i) for i, e in enumerate(names)]
    labels = [s["label"] for s in data["smoothers"]]
    if len(set(labels)) != len(labels):
        raise ConfigError("smoother labels must be unique")
    data["output"]["trajectories"] = bool(data["output"]["trajectories"])
    return ExperimentConfig(data)


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML config file (``OSError`` if unreadable)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw)


def build_model(data: dict):
    m, s = data["model"], data["sensors"]
    if m["kind"] == "linear":
        return random_affine_model(np.random.default_rng(m["model_seed"]), m["horizon"], m["state_dim"], m["meas_dim"])
    sched = {}
    if s["schedule"] is not None:
        sc = s["schedule"]
        every = int(sc["every"])
        if every < 1:
            raise ConfigError("sensors.schedule.every must be positive")
        sched = {k - 1: (tuple(sc["sensors"]), tuple(sc["stds"])) for k in range(every, m["horizon"] + 1, every)}
    sensors = BearingsSensorConfig(np.asarray(s["positions"], dtype=float), np.asarray(s["stds"], dtype=float), sched)
    return ct_bearings_model(
        sensors, m["horizon"], CoordinatedTurnModel(m["T"], m["q_v"], m["q_w"]),
        m["prior_mean"], m["prior_var"], m["wrap_angles"],
    )


def _safe_metric(fn, *args) -> float:
    try:
        v = fn(*args)
    except (ValueError, np.linalg.LinAlgError, FloatingPointError):
        return np.nan
    return float(v) if np.isfinite(v) else np.nan


def run_trial(data: dict, trial: int) -> dict:
    """Simulate one trial and run every smoother; returns plain arrays only."""
    model = build_model(data)
    seed = data["experiment"]["seed"] + trial
    X, y = simulate(model, seed)
    met = data["metrics"]
    out = {"trial": trial, "seed": seed, "truth": X, "smoothers": {}}
    for opts in data["smoothers"]:
        cfg = smoother_config(opts)
        try:
            init = initial_estimate(model, y, data["initialization"], cfg.mode, cfg.scheme)
            _, trace = smooth(model, y, cfg, init)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            # the non-iterated initialization itself broke down
            out["smoothers"][opts["label"]] = {"failure": f"initialization: {exc}", "rmse": [], "nees": [],
                                               "cost": [], "means": None, "vars": None}
            continue
        ests = trace.estimates(cfg.max_iter)
        rm = [_safe_metric(rmse, e.means, X, met["rmse_components"]) for e in ests]
        ne = [_safe_metric(lambda e: nees(e, X, met["nees_components"])[1], e) for e in ests]
        co = [_safe_metric(ieks_cost, e.means, model, y) for e in ests]
        final = ests[-1]
        out["smoothers"][opts["label"]] = {
            "failure": trace.failure,
            "iterations": len(trace),
            "rmse": rm,
            "nees": ne,
            "cost": co,
            "means": final.means,
            "vars": np.diagonal(final.covs, axis1=1, axis2=2),
        }
    return out


def _se(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")


def aggregate(data: dict, results: list) -> list:
    """Metrics rows, one per smoother and iteration (``0`` is the initial estimate)."""
    results = sorted(results, key=lambda r: r["trial"])
    thresh = data["metrics"]["divergence_rmse"]
    rows = []
    for opts in data["smoothers"]:
        label = opts["label"]
        n_iter = int(opts["max_iter"]) + 1
        R = np.full((len(results), n_iter), np.nan)
        N, C = R.copy(), R.copy()
        for i, res in enumerate(results):
            s = res["smoothers"][label]
            for j, (r, n, c) in enumerate(zip(s["rmse"], s["nees"], s["cost"])):
                R[i, j], N[i, j], C[i, j] = r, n, c
        diverged = ~np.isfinite(R) | (np.nan_to_num(R, nan=np.inf) > thresh)
        for j in range(n_iter):
            rows.append({
                "smoother": label,
                "iteration": j,
                "rmse_mean": _nanmean(R[:, j]),
                "rmse_se": _se(R[:, j]),
                "nees_mean": _nanmean(N[:, j]),
                "nees_se": _se(N[:, j]),
                "diverged_fraction": float(np.mean(diverged[:, j])),
                "mean_cost": _nanmean(C[:, j]),
            })
    return rows


def _nanmean(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(np.mean(v)) if v.size else float("nan")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def trajectory_csv(truth: np.ndarray, means: np.ndarray, var: np.ndarray, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"true_{l}" for l in labels] + [f"est_mean_{l}" for l in labels]
               + [f"est_var_{l}" for l in labels])
    for k in range(truth.shape[0]):
        w.writerow([k] + [repr(float(v)) for v in np.concatenate([truth[k], means[k], var[k]])])
    return buf.getvalue()


def _state_labels(d: int) -> tuple:
    from .experiments import STATE_LABELS

    return STATE_LABELS if d == len(STATE_LABELS) else tuple(f"x{i}" for i in range(d))


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> list:
    """Run all trials, write outputs under ``out_dir`` and return the metrics rows.

    Writes ``metrics.csv``, ``manifest.json`` and (unless disabled)
    ``trajectories/<trial>_<smoother>.csv`` with the final estimates.
    """
    data = cfg.data
    out_dir = Path(out_dir) if out_dir is not None else cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    trials = list(range(cfg.trials))
    workers = cfg.workers or os.cpu_count() or 1
    workers = min(workers, len(trials))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_trial, [data] * len(trials), trials))
    else:
        results = [run_trial(data, t) for t in trials]
    rows = aggregate(data, results)
    (out_dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")

    if data["output"]["trajectories"]:
        tdir = out_dir / "trajectories"
        tdir.mkdir(exist_ok=True)
        for res in results:
            labels = _state_labels(res["truth"].shape[1])
            for label, s in res["smoothers"].items():
                if s["means"] is None:
                    continue
                text = trajectory_csv(res["truth"], s["means"], s["vars"], labels)
                (tdir / f"{res['trial']}_{label}.csv").write_text(text, encoding="utf-8")

    manifest = {
        "version": __version__,
        "config": data,
        "trials": [
            {
                "trial": r["trial"],
                "seed": r["seed"],
                "failures": {k: v["failure"] for k, v in r["smoothers"].items() if v["failure"]},
            }
            for r in sorted(results, key=lambda r: r["trial"])
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return rows
