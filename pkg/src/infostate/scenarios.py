"""Built-in scenarios, config validation and the pipelines behind the CLI.

A config is a small tree::

    scenario: bench-bimodal
    seed: 3
    model: {sigma: 0.7}
    cost: {r: 0.5}
    controller: {type: dp}
    solver: {T: 2.0, dt: 0.01, n_paths: 4000}

Every field not given is filled from the scenario defaults and listed under
``defaulted`` in the report.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import diagnostics
from .stochastic import ConstantController, Estimate, innovation_test, make_time_grid

__all__ = [
    "ConfigError",
    "SCENARIOS",
    "RunReport",
    "list_scenarios",
    "load_config",
    "resolve_config",
    "config_hash",
    "run_config",
    "compare_configs",
    "write_outputs",
]


class ConfigError(ValueError):
    """Validation failure; ``problems`` lists every offending field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class Scenario:
    name: str
    description: str
    defaults: dict
    controllers: dict  # type -> default params
    pipeline: Callable


SCENARIOS: dict = {}


def _register(name, description, defaults, controllers):
    def deco(fn):
        SCENARIOS[name] = Scenario(name, description, defaults, controllers, fn)
        return fn
    return deco


def list_scenarios():
    return [(s.name, s.description) for s in SCENARIOS.values()]


# -- config handling ---------------------------------------------------------


def load_config(source) -> dict:
    """Read a YAML/JSON file, or return the defaults of a built-in name."""
    p = Path(str(source))
    if p.is_file():
        try:
            data = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError([f"{p}: not parseable as YAML/JSON ({exc})"]) from exc
        if not isinstance(data, dict):
            raise ConfigError([f"{p}: top level must be a mapping"])
        if "seed" not in data:
            raise ConfigError(["seed: required in config files"])
        return data
    if str(source) in SCENARIOS:
        return {"scenario": str(source)}
    names = ", ".join(SCENARIOS)
    raise ConfigError([f"{source!r} is neither a config file nor a built-in scenario (available: {names})"])


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, (list, tuple)):
        return "list"
    return type(v).__name__


def _merge(section, given, defaults, problems, defaulted):
    out = {}
    if given is None:
        given = {}
    if not isinstance(given, dict):
        problems.append(f"{section}: must be a mapping")
        given = {}
    for key in given:
        if key not in defaults:
            problems.append(f"{section}.{key}: unknown field (allowed: {', '.join(sorted(defaults))})")
    for key, dv in defaults.items():
        if key in given:
            v = given[key]
            if v is None and dv is None:
                out[key] = None
                continue
            want = "number" if dv is None else _kind(dv)
            if _kind(v) != want:
                problems.append(f"{section}.{key}: expected {want}, got {v!r}")
                continue
            if want == "list" and not all(_kind(x) == "number" for x in v):
                problems.append(f"{section}.{key}: expected a list of numbers")
                continue
            out[key] = list(v) if want == "list" else v
        else:
            out[key] = copy.deepcopy(dv)
            defaulted.append(f"{section}.{key}")
    return out


def resolve_config(raw: dict, seed_override: Optional[int] = None) -> tuple:
    """Validate ``raw`` and fill defaults; returns ``(config, defaulted_fields)``."""
    problems, defaulted = [], []
    allowed = {"scenario", "seed", "model", "cost", "controller", "solver", "output"}
    for key in raw:
        if key not in allowed:
            problems.append(f"{key}: unknown top-level field")
    name = raw.get("scenario")
    if name not in SCENARIOS:
        problems.append(f"scenario: {name!r} is not one of {', '.join(SCENARIOS)}")
        raise ConfigError(problems)
    sc = SCENARIOS[name]
    cfg = {"scenario": name}
    seed = raw.get("seed", sc.defaults["seed"]) if seed_override is None else seed_override
    if "seed" not in raw and seed_override is None:
        defaulted.append("seed")
    if _kind(seed) != "number" or int(seed) != seed or seed < 0:
        problems.append(f"seed: expected a nonnegative integer, got {seed!r}")
    else:
        cfg["seed"] = int(seed)
    for sec in ("model", "cost", "solver"):
        cfg[sec] = _merge(sec, raw.get(sec), sc.defaults[sec], problems, defaulted)
    ctrl = raw.get("controller") or {}
    if not isinstance(ctrl, dict):
        problems.append("controller: must be a mapping")
        ctrl = {}
    ctype = ctrl.get("type", sc.defaults["controller"])
    if "type" not in ctrl:
        defaulted.append("controller.type")
    if ctype not in sc.controllers:
        problems.append(f"controller.type: {ctype!r} not one of {', '.join(sc.controllers)}")
        params = {}
    else:
        params = _merge("controller.params", ctrl.get("params"), sc.controllers[ctype], problems, defaulted)
    for key in ctrl:
        if key not in ("type", "params"):
            problems.append(f"controller.{key}: unknown field (allowed: type, params)")
    cfg["controller"] = {"type": ctype, "params": params}
    if "output" in raw:
        if isinstance(raw["output"], str):
            cfg["output"] = raw["output"]
        else:
            problems.append("output: expected a directory path")
    _check_values(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg, defaulted


def _check_values(cfg, problems):
    s = cfg["solver"]
    for key in ("T", "dt"):
        if key in s and not s[key] > 0:
            problems.append(f"solver.{key}: must be positive")
    if "T" in s and "dt" in s and s["T"] > 0 and s["dt"] > 0:
        try:
            make_time_grid(s["T"], s["dt"])
        except ValueError as exc:
            problems.append(f"solver.dt: {exc}")
    for key in ("n_paths", "n_traj"):
        if key in s and (int(s[key]) != s[key] or s[key] < 2):
            problems.append(f"solver.{key}: must be an integer >= 2")
    mu = cfg["cost"].get("mu")
    if mu is not None and not mu > 0:
        problems.append("cost.mu: must be positive or null")


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of the resolved config (output location excluded)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- reports -----------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    defaulted: list
    metrics: dict = field(default_factory=dict)  # name -> Estimate
    checks: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    counters: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def metric_rows(self):
        for name, est in self.metrics.items():
            yield [name, repr(float(est.mean)), repr(float(est.stderr)), str(bool(est.exact)).lower(), est.n]

    def to_dict(self) -> dict:
        return {
            "scenario": self.config["scenario"],
            "config_hash": self.config_hash,
            "config": self.config,
            "defaulted": self.defaulted,
            "metrics": {
                k: {"mean": float(e.mean), "stderr": float(e.stderr), "exact": bool(e.exact), "n": e.n}
                for k, e in self.metrics.items()
            },
            "checks": self.checks,
            "counters": self.counters,
            "timing": self.timing,
        }


def _exact(value: float) -> Estimate:
    return Estimate(float(value), 0.0, None, exact=True)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_outputs(report: RunReport, out_dir) -> Path:
    """``metrics.csv``, scenario tables and ``report.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ["metric", "mean", "stderr", "exact", "n"], list(report.metric_rows()))
    for name, (header, rows) in report.tables.items():
        _write_csv(out / name, header, rows)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return out


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _r(x) -> str:
    return repr(float(x))


def run_config(cfg: dict, defaulted=()) -> RunReport:
    report = RunReport(cfg, list(defaulted))
    t0 = time.perf_counter()
    with diagnostics.collecting() as counters:
        SCENARIOS[cfg["scenario"]].pipeline(cfg, report)
    report.counters = counters
    report.timing = {"seconds": round(time.perf_counter() - t0, 3)}
    return report


# -- classical pipelines -----------------------------------------------------


def _classical_trajectory(model, controller, grid, seed):
    from .classical.model import simulate

    _, tr = next(simulate(model, controller, grid, 1, seed))
    x = tr.states[0, :, 0]
    dy = tr.obs_increments[0, :, 0]
    u = tr.controls[0]
    rows = [[_r(t), _r(x[k]), _r(dy[k]), _r(u[k])] for k, t in enumerate(grid.times[:-1])]
    rows.append([_r(grid.times[-1]), _r(x[-1]), "", ""])
    return ["t", "x", "dy", "u"], rows


def _classical_innovations(model, chain, pi0, controller, grid, seed, n_paths):
    from .classical.filters import innovations
    from .classical.model import simulate

    parts = []
    for _, tr in simulate(model, controller, grid, n_paths, seed):
        parts.append(innovations(chain, pi0, tr.controls, tr.obs_increments[:, :, 0], grid.dt))
    return innovation_test(np.concatenate([p.ravel() for p in parts]), grid.dt)


@_register(
    "lqg-1d",
    "scalar linear-Gaussian plant, quadratic cost, Kalman-based controllers",
    defaults=dict(
        seed=0,
        model=dict(a=-1.0, b=1.0, c=1.0, sigma=1.0, x0_mean=0.0, x0_std=0.5, controls=[-1.0, 0.0, 1.0]),
        cost=dict(q=1.0, r=1.0, p=1.0, mu=None),
        solver=dict(T=1.0, dt=1e-3, n_paths=2000, dx=0.05, x_range=4.0, infostate=False, innovation_paths=0),
        controller="lqg",
    ),
    controllers=dict(
        lqg=dict(gain_scale=1.0),
        threshold=dict(threshold=0.0, below=1.0, above=-1.0),
        constant=dict(value=0.0),
    ),
)
def _lqg_pipeline(cfg, report):
    from .classical.filters import cost_via_infostate
    from .classical.model import discretize_generator, evaluate_rs_cost_mc, lqg_1d
    from .dp import run_closed_loop

    m, c, s = cfg["model"], cfg["cost"], cfg["solver"]
    model, cost = lqg_1d(**m, **c)
    grid = make_time_grid(s["T"], s["dt"])
    seed = cfg["seed"]
    ctrl = _lqg_controller(cfg, model, cost, grid)
    report.metrics["cost"] = run_closed_loop(model, cost, ctrl, s["n_paths"], seed, grid)
    if cfg["controller"]["type"] == "lqg":
        report.metrics["predicted_cost"] = _exact(ctrl.predicted_cost())
    if c["mu"] is not None:
        report.metrics["rs_cost"] = evaluate_rs_cost_mc(model, cost, ctrl, s["n_paths"], seed, grid)
    need_chain = s["infostate"] or s["innovation_paths"] >= 2
    if need_chain:
        L = s["x_range"]
        xs = np.arange(-L, L + 0.5 * s["dx"], s["dx"])
        chain = discretize_generator(model, xs)
        pi0 = chain.gaussian_weights(m["x0_mean"], m["x0_std"])
    if s["infostate"]:
        est = cost_via_infostate(ctrl, model, cost, chain, s["n_paths"], seed, grid)
        report.metrics["cost_infostate"] = est
        d = report.metrics["cost"] - est
        report.checks["tower_property"] = {
            "difference": d.mean, "combined_stderr": math.hypot(est.stderr, report.metrics["cost"].stderr),
        }
    if s["innovation_paths"] >= 2:
        report.checks["innovations"] = _classical_innovations(model, chain, pi0, ctrl, grid, seed, s["innovation_paths"])
    report.tables["trajectory.csv"] = _classical_trajectory(model, ctrl, grid, seed)


def _lqg_controller(cfg, model, cost, grid):
    from .dp import KalmanThresholdController, lqg_synthesize

    typ, p = cfg["controller"]["type"], cfg["controller"]["params"]
    m = cfg["model"]
    P0 = m["x0_std"] ** 2
    if typ == "lqg":
        c = lqg_synthesize(model.linear, cost.params, grid, m0=m["x0_mean"], P0=P0)
        return c if p["gain_scale"] == 1.0 else c.scaled(p["gain_scale"])
    if typ == "threshold":
        return KalmanThresholdController(model.linear, m["x0_mean"], P0, **p)
    return ConstantController(p["value"])


@_register(
    "bench-bimodal",
    "double-well plant, two-state lumped information-state DP vs constant controls",
    defaults=dict(
        seed=0,
        model=dict(sigma=0.7, x0_mean=-1.0, x0_std=0.1, controls=[0.0, 1.0]),
        cost=dict(target=1.0, r=0.5, p=0.0, mu=None),
        solver=dict(T=2.0, dt=0.01, n_paths=4000, x_min=-2.5, x_max=2.5, n_x=101, simplex_m=40, lag=1.0,
                    innovation_paths=0),
        controller="dp",
    ),
    controllers=dict(dp=dict(), constant=dict(value=1.0)),
)
def _bench_pipeline(cfg, report):
    from .classical.model import bench_bimodal, evaluate_rs_cost_mc
    from .dp import PolicyController, SimplexGrid, run_closed_loop, value_iteration

    m, c, s = cfg["model"], cfg["cost"], cfg["solver"]
    model, cost = bench_bimodal(**m, **c)
    grid = make_time_grid(s["T"], s["dt"])
    seed = cfg["seed"]
    chain, agg, acost, pi0 = _bench_chain(model, cost, cfg)
    if cfg["controller"]["type"] == "dp":
        sg = SimplexGrid(agg.n, int(s["simplex_m"]))
        V, P = value_iteration(agg, acost, sg, grid)
        ctrl = PolicyController(P, agg, pi0)
        report.metrics["dp_model_value"] = _exact(float(V.value(pi0[None], 0)[0]))
        report.checks["dp"] = {"lattice_points": len(sg), "projections": int(V.projections),
                               "macro_states": [float(x) for x in agg.grid]}
        rows = []
        for k in range(grid.n_steps + 1):
            for i, pt in enumerate(sg.points):
                u = "-1" if k == grid.n_steps else str(int(P.controls[i, k]))
                rows.append([str(k)] + [_r(v) for v in pt] + [_r(V.values[i, k]), u])
        report.tables["dp_tables.csv"] = (["k"] + [f"p{j}" for j in range(agg.n)] + ["value", "control"], rows)
    else:
        ctrl = ConstantController(cfg["controller"]["params"]["value"])
    report.metrics["cost"] = run_closed_loop(model, cost, ctrl, s["n_paths"], seed, grid)
    if c["mu"] is not None:
        report.metrics["rs_cost"] = evaluate_rs_cost_mc(model, cost, ctrl, s["n_paths"], seed, grid)
    if s["innovation_paths"] >= 2:
        fine_pi0 = chain.gaussian_weights(m["x0_mean"], m["x0_std"])
        report.checks["innovations"] = _classical_innovations(model, chain, fine_pi0, ctrl, grid, seed,
                                                              s["innovation_paths"])
    report.tables["trajectory.csv"] = _classical_trajectory(model, ctrl, grid, seed)


def _bench_chain(model, cost, cfg):
    from .classical.model import aggregate_chain, aggregate_cost, discretize_generator

    s, m = cfg["solver"], cfg["model"]
    chain = discretize_generator(model, np.linspace(s["x_min"], s["x_max"], int(s["n_x"])))
    labels = (chain.grid >= 0).astype(int)
    agg = aggregate_chain(chain, labels, lag=s["lag"])
    acost = aggregate_cost(chain, labels, cost)
    w = chain.gaussian_weights(m["x0_mean"], m["x0_std"])
    pi0 = np.array([w[chain.grid < 0].sum(), w[chain.grid >= 0].sum()])
    return chain, agg, acost, pi0 / pi0.sum()


# -- quantum pipeline --------------------------------------------------------


@_register(
    "qubit-stabilize",
    "homodyne-monitored decaying qubit held near the excited state by a drive",
    defaults=dict(
        seed=0,
        model=dict(gamma=1.0, controls=[0.0, 3.0]),
        cost=dict(q=1.0, r=0.01, mu=None),
        solver=dict(T=2.0, dt=0.01, n_traj=1000, n_r=8, n_theta=12, n_phi=16),
        controller="dp",
    ),
    controllers=dict(
        dp=dict(),
        threshold=dict(low=0.0, high=3.0, threshold=0.5),
        constant=dict(value=3.0),
    ),
)
def _qubit_pipeline(cfg, report):
    from .quantum.core import bloch_vector
    from .quantum.feedback import (
        ThresholdController, _tr, evaluate_quantum_rs_cost, homodyne_batch, qubit_stabilize,
    )
    from .quantum.qubit_dp import BlochGrid, QubitPolicyController, qubit_mfc_value_iteration
    from .stochastic import chunks, summarize

    m, c, s = cfg["model"], cfg["cost"], cfg["solver"]
    model, cost, rho0 = qubit_stabilize(m["gamma"], c["q"], c["r"], tuple(m["controls"]), c["mu"])
    grid = make_time_grid(s["T"], s["dt"])
    seed = cfg["seed"]
    typ, p = cfg["controller"]["type"], cfg["controller"]["params"]
    if typ == "dp":
        bg = BlochGrid(int(s["n_r"]), int(s["n_theta"]), int(s["n_phi"]))
        V, P = qubit_mfc_value_iteration(model, cost, bg, grid)
        ctrl = QubitPolicyController(P, model, rho0)
        report.metrics["dp_model_value"] = _exact(float(V.value(bloch_vector(rho0)[None], 0)[0]))
        report.checks["dp"] = {"lattice_points": len(bg), "projections": int(V.projections)}
    elif typ == "threshold":
        ctrl = ThresholdController(model, rho0, **p)
    else:
        ctrl = ConstantController(p["value"])
    n = int(s["n_traj"])
    samples = np.empty(n)
    innov = []
    obs = model.L + model.L.conj().T
    for idx in chunks(n):
        b = homodyne_batch(model, ctrl, rho0, grid, seed, idx, cost=cost, keep_states=True)
        samples[idx.start:idx.stop] = b.running + _tr(b.final @ cost.C2).real
        pred = _tr(b.states[:, :-1] @ obs).real * grid.dt
        innov.append((b.records - pred).ravel())
        if idx.start == 0:
            report.tables["trajectory.csv"] = _quantum_trajectory(grid, b, bloch_vector)
    report.metrics["cost"] = summarize(samples)
    report.checks["innovations"] = innovation_test(np.concatenate(innov), grid.dt)
    if c["mu"] is not None:
        report.metrics["rs_cost"] = evaluate_quantum_rs_cost(model, cost, ctrl, n, seed, grid, rho0)


def _quantum_trajectory(grid, b, bloch_vector):
    bv = bloch_vector(b.states[0])
    rows = []
    for k, t in enumerate(grid.times[:-1]):
        rows.append([_r(t), _r(b.records[0, k]), _r(bv[k, 0]), _r(bv[k, 1]), _r(bv[k, 2]), _r(b.controls[0, k])])
    return ["t", "dY", "sx", "sy", "sz", "u"], rows


# -- coherent pipeline -------------------------------------------------------


@_register(
    "cavity-hinfty",
    "coherent feedback of a three-mirror cavity by a controller cavity; w->z gain",
    defaults=dict(
        seed=0,
        model=dict(plant_kappas=[2.6, 0.2, 0.2], plant_detuning=0.0),
        cost=dict(gamma_factor=1.02),
        solver=dict(omega_max=40.0, n_omega=4001),
        controller="coherent",
    ),
    controllers=dict(
        coherent=dict(kappas=[5.0, 5.0, 2.0], detuning=0.0, phase=math.pi),
        none=dict(),
    ),
)
def _cavity_pipeline(cfg, report):
    from .coherent import (
        check_dissipation, fig5_network, hinf_supply, hinfty_gain, realizability_residuals, transfer,
    )

    m, s = cfg["model"], cfg["solver"]
    typ, p = cfg["controller"]["type"], cfg["controller"]["params"]
    omegas = np.linspace(0.0, s["omega_max"], int(s["n_omega"]))
    kw = dict(plant_kappas=tuple(m["plant_kappas"]), plant_detuning=m["plant_detuning"])
    if typ == "coherent":
        kw.update(controller_kappas=tuple(p["kappas"]), controller_detuning=p["detuning"], phase=p["phase"])
    closed, plant, ctrl = fig5_network(**kw, controller=(typ == "coherent"))
    g_open = hinfty_gain(plant, "w", "z", omegas)
    g_closed = hinfty_gain(closed, "w", "z", omegas)
    report.metrics["gain_open"] = _exact(g_open)
    report.metrics["gain_closed"] = _exact(g_closed)
    res = {name: realizability_residuals(sys) for name, sys in (("plant", plant), ("controller", ctrl), ("closed", closed))}
    report.checks["realizability_max_residual"] = max(max(r.values()) for r in res.values())
    report.checks["gain_reduced"] = bool(g_closed < g_open)
    gamma = cfg["cost"]["gamma_factor"] * g_closed
    rep = check_dissipation(closed, None, hinf_supply(closed, "w", "z", gamma), signal_inputs=("w",),
                            gain_ports=("w", "z"), gamma=gamma, omegas=omegas)
    report.checks["dissipation"] = {"gamma": gamma, "margin": rep.margin, "passed": bool(rep.passed)}
    s_closed = np.linalg.svd(transfer(closed, "w", "z", omegas), compute_uv=False)[:, 0]
    s_open = np.linalg.svd(transfer(plant, "w", "z", omegas), compute_uv=False)[:, 0]
    rows = [[_r(w), _r(a), _r(b)] for w, a, b in zip(omegas, s_open, s_closed)]
    report.tables["frequency_response.csv"] = (["omega", "gain_open", "gain_closed"], rows)


# -- compare -----------------------------------------------------------------


def compare_configs(cfg_a: dict, cfg_b: dict) -> tuple:
    """Paired cost difference ``A - B`` on common random numbers.

    Returns ``(report_a, report_b, difference)``.
    """
    problems = []
    for key in ("scenario", "seed", "model", "cost", "solver"):
        if cfg_a.get(key) != cfg_b.get(key):
            problems.append(f"{key}: differs between the two configs; compare needs a shared {key}")
    if problems:
        raise ConfigError(problems)
    if cfg_a["scenario"] == "cavity-hinfty":
        raise ConfigError(["scenario: compare needs a Monte Carlo cost; cavity-hinfty has deterministic gains"])
    ra, rb = run_config(cfg_a), run_config(cfg_b)
    return ra, rb, ra.metrics["cost"] - rb.metrics["cost"]
