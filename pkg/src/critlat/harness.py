"""Experiment harness: validated configs, sweeps, rate fits, reports.

An experiment is a JSON config with an ``experiment`` kind and a per-kind
whitelist of keys (unknown keys are rejected so typos cannot silently
change a run).  Sweep kinds enumerate a deterministic (eps, seed) grid;
each cell runs in isolation, failures become status rows instead of
aborting the sweep, and cells can be distributed over worker processes
without changing the output (results are merged in enumeration order).

Reports are written atomically: a CSV with a fixed column order and
shortest round-trip float formatting (byte-identical across repeated runs
of the same config) plus a JSON document carrying the echoed config,
package version, wall time, aggregates and decay-rate fits.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernel
from .environment import EnvironmentSpec
from .flux import energy_upper_bound_check
from .grid import DomainSpec, discretize
from .operator import OperatorHandle
from .poincare import poincare_constant
from .solver import (
    homogenization_error,
    scaling_identity_check,
    solve_corrector,
    solve_homogenized,
    solve_resolvent,
    two_scale_residual,
)
from .walk import heat_kernel_evolve, qip_statistics, run_qip

__all__ = [
    "EXPERIMENT_KINDS",
    "load_config",
    "validate_config",
    "run_experiment",
    "FitReport",
    "fit_rate",
    "emit_report",
]

VERSION = "0.1.0"

_SWEEP_COMMON = {"experiment", "d", "eps_list", "output", "jobs"}
_ENV_SWEEP = _SWEEP_COMMON | {"lambda", "distribution", "seeds"}

_KIND_KEYS: dict[str, tuple[set, set]] = {
    # kind -> (required keys, optional keys)
    "kernel-check": ({"experiment", "d", "eps_list", "output"}, {"jobs"}),
    "corrector-sweep": (
        {"experiment", "d", "eps_list", "output", "lambda", "distribution",
         "seeds"},
        {"jobs"},
    ),
    "flux-check": (
        {"experiment", "d", "eps_list", "output", "lambda", "distribution",
         "seeds"},
        {"jobs"},
    ),
    "homog-rate": (
        {"experiment", "d", "eps_list", "output", "lambda", "distribution",
         "seeds", "mu", "f"},
        {"jobs", "two_scale"},
    ),
    "scaling-identity": (
        {"experiment", "d", "eps_list", "output", "lambda", "distribution",
         "seeds", "f"},
        {"jobs", "mu"},
    ),
    "poincare": ({"experiment", "d", "eps_list", "output"}, {"jobs"}),
    "walk-qip": (
        {"experiment", "d", "lambda", "distribution", "eps_list", "t",
         "n_paths", "seed", "output"},
        set(),
    ),
    "heatkernel": (
        {"experiment", "d", "lambda", "distribution", "n_side", "t_grid",
         "seed", "output"},
        set(),
    ),
}

EXPERIMENT_KINDS = tuple(sorted(_KIND_KEYS))


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    kind = cfg.get("experiment")
    if kind not in _KIND_KEYS:
        raise ValueError(
            f"unknown experiment kind {kind!r}; expected one of "
            f"{sorted(_KIND_KEYS)}"
        )
    required, optional = _KIND_KEYS[kind]
    keys = set(cfg)
    missing = required - keys
    if missing:
        raise ValueError(f"{kind}: missing config keys {sorted(missing)}")
    unknown = keys - required - optional
    if unknown:
        raise ValueError(f"{kind}: unknown config keys {sorted(unknown)}")
    out = dict(cfg)
    d = out["d"] = int(cfg["d"])
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if not isinstance(cfg["output"], str) or not cfg["output"]:
        raise ValueError("output must be a nonempty path prefix")
    if "eps_list" in cfg:
        eps_list = [float(e) for e in cfg["eps_list"]]
        if not eps_list or not all(0.0 < e < 1.0 for e in eps_list):
            raise ValueError("eps_list must hold values in (0, 1)")
        out["eps_list"] = eps_list
    if "seeds" in cfg:
        seeds = cfg["seeds"]
        if isinstance(seeds, int):
            if seeds <= 0:
                raise ValueError("seed count must be positive")
            seeds = list(range(seeds))
        seeds = [int(s) for s in seeds]
        if not seeds:
            raise ValueError("seed list must not be empty")
        out["seeds"] = seeds
    if "lambda" in cfg:
        # delegate environment validation (lambda range, distribution params)
        probe = dict(
            seed=0, d=d, **{"lambda": float(cfg["lambda"])},
            distribution=cfg["distribution"],
        )
        EnvironmentSpec.from_config(probe)
        out["lambda"] = float(cfg["lambda"])
    if "jobs" in cfg:
        out["jobs"] = int(cfg["jobs"])
        if out["jobs"] < 1:
            raise ValueError("jobs must be >= 1")
    if "mu" in cfg:
        out["mu"] = float(cfg["mu"])
        if out["mu"] < 0.0:
            raise ValueError("mu must be nonnegative")
    if kind == "scaling-identity" and out.get("mu", 0.0) != 0.0:
        raise ValueError("the scaling identity holds only at mu = 0")
    if "f" in cfg:
        out["f"] = float(cfg["f"])
    if "two_scale" in cfg:
        if not isinstance(cfg["two_scale"], bool):
            raise ValueError("two_scale must be a boolean")
    if "t" in cfg:
        out["t"] = float(cfg["t"])
        if out["t"] <= 0.0:
            raise ValueError("time horizon must be positive")
    if "n_paths" in cfg:
        out["n_paths"] = int(cfg["n_paths"])
        if out["n_paths"] < 1:
            raise ValueError("n_paths must be positive")
    if "seed" in cfg:
        out["seed"] = int(cfg["seed"])
    if "n_side" in cfg:
        out["n_side"] = int(cfg["n_side"])
        if out["n_side"] < 4 or out["n_side"] % 2:
            raise ValueError("n_side must be an even integer >= 4")
    if "t_grid" in cfg:
        grid = [float(t) for t in cfg["t_grid"]]
        if not grid or any(t < 0 for t in grid):
            raise ValueError("t_grid must hold nonnegative times")
        out["t_grid"] = grid
    return out


def _env_for(cfg: dict, seed: int) -> EnvironmentSpec:
    return EnvironmentSpec.from_config(
        {
            "seed": seed,
            "d": cfg["d"],
            "lambda": cfg["lambda"],
            "distribution": cfg["distribution"],
        }
    )


def _unit_slope(d: int) -> np.ndarray:
    slope = np.zeros(d)
    slope[0] = 1.0
    return slope


# ----- per-cell computations ------------------------------------------------

_REFERENCE_CACHE: dict = {}


def _cached_reference(dom: DomainSpec, coeff: float, mu: float, f: float):
    key = (dom.lo, dom.hi, coeff, mu, f)
    ref = _REFERENCE_CACHE.get(key)
    if ref is None:
        ref = solve_homogenized(dom, coeff, mu, f)
        _REFERENCE_CACHE[key] = ref
    return ref


def _cell_kernel_check(cfg: dict, cell: dict) -> dict:
    eps, d = cell["eps"], cfg["d"]
    kappa = kernel.kappa_eps(eps, d)
    return {
        "eps": eps,
        "d": d,
        "kappa": kappa,
        "dev_from_asymptotic": abs(kappa - kernel.log_asymptote(eps, d)),
    }


def _cell_corrector(cfg: dict, cell: dict) -> dict:
    eps, seed, d = cell["eps"], cell["seed"], cfg["d"]
    env = _env_for(cfg, seed)
    disc = discretize(DomainSpec.unit_box(d), eps)
    handle = OperatorHandle(env, disc)
    rep = solve_corrector(handle, _unit_slope(d))
    return {
        "experiment": cfg["experiment"],
        "d": d,
        "eps": eps,
        "seed": seed,
        "mu": 0.0,
        "value": rep.nu,
        "iterations": rep.solve.iterations,
        "residual": rep.solve.relative_residual,
        "seconds": rep.solve.seconds,
    }


def _cell_flux(cfg: dict, cell: dict) -> dict:
    eps, seed, d = cell["eps"], cell["seed"], cfg["d"]
    env = _env_for(cfg, seed)
    disc = discretize(DomainSpec.unit_box(d), eps)
    handle = OperatorHandle(env, disc)
    chk = energy_upper_bound_check(handle, _unit_slope(d))
    return {
        "eps": eps,
        "seed": seed,
        "nu": chk.nu,
        "rhs_bound": chk.dual,
        "slack": chk.slack,
        "flux_energy": chk.flux_energy,
        "divergence_residual": chk.divergence_residual,
    }


def _cell_homog(cfg: dict, cell: dict) -> dict:
    eps, seed, d = cell["eps"], cell["seed"], cfg["d"]
    env = _env_for(cfg, seed)
    disc = discretize(DomainSpec.unit_box(d), eps)
    handle = OperatorHandle(env, disc)
    mu, f = cfg["mu"], cfg["f"]
    coeff = env.mean_conductance / (2.0 * d)
    ref = _cached_reference(disc.dom, coeff, mu, f)
    rep = solve_resolvent(handle, mu, f)
    err = homogenization_error(
        env, disc, mu, f, handle=handle, reference=ref, solve=rep
    )
    row = {
        "experiment": cfg["experiment"],
        "d": d,
        "eps": eps,
        "seed": seed,
        "mu": mu,
        "value": err,
        "iterations": rep.iterations,
        "residual": rep.relative_residual,
        "seconds": rep.seconds,
    }
    if cfg.get("two_scale", False):
        row["two_scale_residual"] = two_scale_residual(
            env, disc, mu, f, handle=handle, reference=ref, solve=rep
        )
    return row


def _cell_scaling(cfg: dict, cell: dict) -> dict:
    eps, seed, d = cell["eps"], cell["seed"], cfg["d"]
    env = _env_for(cfg, seed)
    rep = scaling_identity_check(env, DomainSpec.unit_box(d), eps, cfg["f"])
    return {
        "experiment": cfg["experiment"],
        "d": d,
        "eps": eps,
        "seed": seed,
        "mu": 0.0,
        "value": rep.residual,
        "iterations": rep.iterations,
        "residual": rep.relative_residual,
        "seconds": rep.seconds,
    }


def _cell_poincare(cfg: dict, cell: dict) -> dict:
    eps, d = cell["eps"], cfg["d"]
    disc = discretize(DomainSpec.unit_box(d), eps)
    rep = poincare_constant(disc)
    return {
        "d": d,
        "eps": eps,
        "c_p": rep.constant,
        "iterations": rep.iterations,
    }


# Per-solve provenance columns.  Wall time is part of the row contract but
# would break the byte-identical-CSV determinism contract, so it travels in
# the JSON rows only.
_SOLVE_COLUMNS = [
    "experiment", "d", "eps", "seed", "mu", "value", "iterations",
    "residual",
]

_SWEEP_SPECS: dict = {
    "kernel-check": {
        "cells": "eps",
        "fn": _cell_kernel_check,
        "columns": ["eps", "d", "kappa", "dev_from_asymptotic"],
    },
    "corrector-sweep": {
        "cells": "eps_seed",
        "fn": _cell_corrector,
        "columns": _SOLVE_COLUMNS,
    },
    "flux-check": {
        "cells": "eps_seed",
        "fn": _cell_flux,
        "columns": [
            "eps", "seed", "nu", "rhs_bound", "slack", "flux_energy",
            "divergence_residual",
        ],
    },
    "homog-rate": {
        "cells": "eps_seed",
        "fn": _cell_homog,
        "columns": _SOLVE_COLUMNS,
    },
    "scaling-identity": {
        "cells": "eps_seed",
        "fn": _cell_scaling,
        "columns": _SOLVE_COLUMNS,
    },
    "poincare": {
        "cells": "eps",
        "fn": _cell_poincare,
        "columns": ["d", "eps", "c_p", "iterations"],
    },
}


def _enumerate_cells(cfg: dict) -> list[dict]:
    kind = cfg["experiment"]
    mode = _SWEEP_SPECS[kind]["cells"]
    eps_sorted = sorted(cfg["eps_list"], reverse=True)
    if mode == "eps":
        return [{"eps": e} for e in eps_sorted]
    return [{"eps": e, "seed": s} for e in eps_sorted for s in cfg["seeds"]]


def _run_cell(cfg: dict, cell: dict) -> dict:
    """One isolated sweep cell; never raises, failures become status rows."""
    kind = cfg["experiment"]
    fn = _SWEEP_SPECS[kind]["fn"]
    try:
        row = fn(cfg, cell)
        row["status"] = "ok"
        return row
    except Exception as exc:  # noqa: BLE001 - isolation is the point
        row = dict(cell)
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
        return row


def _columns_for(cfg: dict) -> list[str]:
    kind = cfg["experiment"]
    cols = list(_SWEEP_SPECS[kind]["columns"])
    if kind == "homog-rate" and cfg.get("two_scale", False):
        cols.append("two_scale_residual")
    return cols + ["status"]


def run_sweep(cfg: dict, jobs: int = 1) -> tuple[list[dict], list[str], int]:
    """Run all cells of a sweep config; returns (rows, columns, failures).

    Rows come back in enumeration order regardless of worker scheduling.
    """
    cells = _enumerate_cells(cfg)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, cfg, cell) for cell in cells]
            rows = []
            for cell, fut in zip(cells, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # worker died entirely
                    row = dict(cell)
                    row["status"] = f"failed: {type(exc).__name__}: {exc}"
                    rows.append(row)
    else:
        rows = [_run_cell(cfg, cell) for cell in cells]
    failures = sum(1 for r in rows if r["status"] != "ok")
    return rows, _columns_for(cfg), failures


# ----- single-shot experiments (walk, heat kernel) ---------------------------


def _run_walk_qip(cfg: dict) -> tuple[list[dict], list[str], int]:
    env = _env_for(cfg, cfg["seed"])
    batch = run_qip(env, cfg["eps_list"], cfg["t"], cfg["n_paths"], cfg["seed"])
    stats = qip_statistics(batch, env.mean_conductance)
    d = cfg["d"]
    columns = ["eps", "coord", "ks", "q25", "q50", "q75", "status"]
    rows = []
    for st in stats:
        for c in range(d):
            rows.append(
                {
                    "eps": st.eps,
                    "coord": c + 1,
                    "ks": float(st.ks[c]),
                    "q25": float(st.quantiles[c, 0]),
                    "q50": float(st.quantiles[c, 1]),
                    "q75": float(st.quantiles[c, 2]),
                    "status": "ok",
                }
            )
    return rows, columns, 0


def _run_heatkernel(cfg: dict) -> tuple[list[dict], list[str], int]:
    env = _env_for(cfg, cfg["seed"])
    res = heat_kernel_evolve(env, cfg["n_side"], cfg["t_grid"])
    rows = []
    for i, t in enumerate(res.t_grid):
        rows.append(
            {
                "d": cfg["d"],
                "N": cfg["n_side"],
                "t": float(t),
                "p00": float(res.probs[i, 0]),
                "mass_dev": float(res.mass_dev[i]),
                "status": "ok",
            }
        )
    columns = ["d", "N", "t", "p00", "mass_dev", "status"]
    return rows, columns, 0


# ----- fits and reporting -----------------------------------------------------

_FIT_POWERS = {"inv_log": 1.0, "inv_sqrt_log": 0.5}


@dataclass
class FitReport:
    model: str
    eps: list[float]
    products: list[float]
    ratio: float
    slope: float
    slope_dev: float


def fit_rate(eps_values, values, model: str) -> FitReport:
    """Consistency of a positive sequence with a 1/|ln eps|^p decay.

    products[i] = value_i * |ln eps_i|^p should be near-constant under the
    model; ratio is max/min of the products and slope the least-squares
    exponent of value against |ln eps| (ideal: -p).
    """
    if model not in _FIT_POWERS:
        raise ValueError(f"unknown fit model {model!r}")
    p = _FIT_POWERS[model]
    eps_arr = np.asarray(list(eps_values), dtype=np.float64)
    vals = np.asarray(list(values), dtype=np.float64)
    if eps_arr.size != vals.size or eps_arr.size < 3:
        raise ValueError("rate fits need at least 3 matched (eps, value) pairs")
    if np.any(vals <= 0.0) or np.any(eps_arr <= 0.0) or np.any(eps_arr >= 1.0):
        raise ValueError("rate fits need positive values and eps in (0, 1)")
    logl = np.log(np.abs(np.log(eps_arr)))
    if np.unique(logl).size < 2:
        raise ValueError("rate fits need at least two distinct scales")
    products = vals * np.abs(np.log(eps_arr)) ** p
    logv = np.log(vals)
    slope = float(np.polyfit(logl, logv, 1)[0])
    return FitReport(
        model=model,
        eps=[float(e) for e in eps_arr],
        products=[float(x) for x in products],
        ratio=float(np.max(products) / np.min(products)),
        slope=slope,
        slope_dev=abs(slope + p),
    )


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _atomic_write(path: str, text: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def emit_report(cfg: dict, rows: list[dict], columns: list[str],
                aggregates: dict, runtime: float) -> tuple[str, str]:
    """Write <output>.csv and <output>.json atomically; returns the paths.

    The CSV is a pure function of the config (fixed column order, shortest
    round-trip float text); the JSON echoes the config for round-tripping
    and carries version, wall time, aggregates, fits and any extra per-row
    fields (such as per-solve timings) that would spoil CSV determinism.
    """
    base = cfg["output"]
    csv_path = base + ".csv"
    json_path = base + ".json"
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    doc = {
        "version": VERSION,
        "config": cfg,
        "runtime_seconds": runtime,
        "columns": columns,
        "rows": [{k: _jsonable(v) for k, v in row.items()} for row in rows],
        "aggregates": aggregates,
    }
    _atomic_write(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def _seed_means(rows: list[dict], field: str) -> tuple[list[float], list[float]]:
    """Per-eps means of a field over ok rows, eps sorted descending."""
    by_eps: dict[float, list[float]] = {}
    for row in rows:
        if row["status"] == "ok":
            by_eps.setdefault(row["eps"], []).append(float(row[field]))
    eps_sorted = sorted(by_eps, reverse=True)
    return eps_sorted, [float(np.mean(by_eps[e])) for e in eps_sorted]


def _aggregates_for(cfg: dict, rows: list[dict]) -> dict:
    kind = cfg["experiment"]
    ok = [r for r in rows if r["status"] == "ok"]
    agg: dict = {"cells": len(rows), "failed": len(rows) - len(ok)}
    if not ok:
        return agg
    try:
        if kind == "kernel-check":
            devs = [r["dev_from_asymptotic"] for r in ok]
            agg["dev_median"] = float(np.median(devs))
            agg["dev_last"] = float(ok[-1]["dev_from_asymptotic"])
        elif kind == "corrector-sweep":
            eps_s, means = _seed_means(ok, "value")
            agg["nu_seed_means"] = dict(zip(map(repr, eps_s), means))
            agg["nu_kappa_means"] = {
                repr(e): m * kernel.kappa_eps(e, cfg["d"])
                for e, m in zip(eps_s, means)
            }
            if len(eps_s) >= 3:
                fit = fit_rate(eps_s, means, "inv_log")
                agg["fit_inv_log"] = {
                    "ratio": fit.ratio,
                    "slope": fit.slope,
                    "slope_dev": fit.slope_dev,
                }
        elif kind == "flux-check":
            agg["min_slack"] = float(min(r["slack"] for r in ok))
            agg["max_divergence_residual"] = float(
                max(r["divergence_residual"] for r in ok)
            )
        elif kind == "homog-rate":
            eps_s, means = _seed_means(ok, "value")
            agg["error_seed_means"] = dict(zip(map(repr, eps_s), means))
            if len(eps_s) >= 3:
                fit = fit_rate(eps_s, means, "inv_sqrt_log")
                agg["fit_inv_sqrt_log"] = {
                    "ratio": fit.ratio,
                    "slope": fit.slope,
                    "slope_dev": fit.slope_dev,
                }
        elif kind == "scaling-identity":
            agg["max_residual"] = float(max(r["value"] for r in ok))
        elif kind == "poincare":
            consts = [r["c_p"] for r in ok]
            agg["constant_ratio"] = float(max(consts) / min(consts))
        elif kind == "walk-qip":
            ks_by_eps: dict[str, float] = {}
            for r in ok:
                key = repr(r["eps"])
                ks_by_eps[key] = max(ks_by_eps.get(key, 0.0), r["ks"])
            agg["ks_by_eps"] = ks_by_eps
            agg["sigma"] = math.sqrt(
                cfg["t"] * _env_for(cfg, cfg["seed"]).mean_conductance
                / cfg["d"]
            )
        elif kind == "heatkernel":
            comp = [
                r["p00"] * math.sqrt(1.0 + r["t"] * math.log(2.0 + r["t"]))
                for r in ok
                if r["t"] > 0
            ]
            if comp:
                agg["compensated_ratio"] = float(max(comp) / min(comp))
            agg["max_mass_dev"] = float(max(r["mass_dev"] for r in ok))
    except (ValueError, ZeroDivisionError) as exc:
        agg["aggregate_error"] = f"{type(exc).__name__}: {exc}"
    return agg


def run_experiment(cfg: dict, jobs: int = 1) -> tuple[str, str, int]:
    """Execute a validated config end to end; returns (csv, json, failures)."""
    t0 = time.perf_counter()
    kind = cfg["experiment"]
    single_shot = {
        "walk-qip": (_run_walk_qip, ["eps", "coord", "ks", "q25", "q50", "q75"]),
        "heatkernel": (_run_heatkernel, ["d", "N", "t", "p00", "mass_dev"]),
    }
    if kind in single_shot:
        fn, columns = single_shot[kind]
        columns = columns + ["status"]
        try:
            rows, columns, failures = fn(cfg)
        except Exception as exc:  # crash isolation, same contract as sweep cells
            rows = [{"status": f"failed: {type(exc).__name__}: {exc}"}]
            failures = 1
    else:
        rows, columns, failures = run_sweep(cfg, jobs=jobs)
    aggregates = _aggregates_for(cfg, rows)
    runtime = time.perf_counter() - t0
    csv_path, json_path = emit_report(cfg, rows, columns, aggregates, runtime)
    return csv_path, json_path, failures
