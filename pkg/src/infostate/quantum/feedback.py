"""Homodyne trajectories, quantum filters and measurement-feedback costs.

The measured quadrature is ``Y = B_out + B_out*``; its increments are
``dY = tr((L + L*) rho) dt + dW`` along a conditional trajectory. Under the
reference picture the record ``Z`` is a standard Wiener process and the
unnormalized state evolves linearly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import diagnostics
from ..stochastic import (
    Controller,
    Estimate,
    NumericalError,
    TimeGrid,
    as_controller,
    chunks,
    path_rng,
    summarize,
)
from .core import (
    MAX_REPAIR,
    DensityState,
    QuantumModel,
    _adjoint,
    _min_eig,
    apply_superop,
    bloch_vector,
    dag,
    decay_qubit,
    excited,
    ground,
    repair,
)

__all__ = [
    "MeasurementRecord",
    "QuantumCostSpec",
    "UnnormalizedDensityState",
    "quantum_filter_step",
    "quantum_rs_filter_step",
    "homodyne_batch",
    "homodyne_trajectory",
    "evaluate_quantum_cost",
    "evaluate_quantum_rs_cost",
    "QuantumFilterController",
    "ThresholdController",
    "write_trajectory_csv",
    "qubit_stabilize",
]

RESCALE_BAND = (1e-6, 1e6)
SUPEROP_MAX_DIM = 8


@dataclass(frozen=True)
class MeasurementRecord:
    increments: np.ndarray  # (n_steps,)
    times: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, float)
        if inc.shape[0] != len(self.times) - 1:
            raise ValueError("record needs one increment per step")
        if not np.all(np.isfinite(inc)):
            raise ValueError("record has non-finite increments")
        object.__setattr__(self, "increments", inc)


@dataclass(frozen=True)
class QuantumCostSpec:
    """Running cost observable ``C1(u)`` (one per control value), terminal ``C2``."""

    C1: tuple
    C2: np.ndarray
    mu: Optional[float] = None

    def __post_init__(self):
        C1 = tuple(np.asarray(c, complex) for c in self.C1)
        C2 = np.asarray(self.C2, complex)
        for c in C1 + (C2,):
            if np.max(np.abs(c - dag(c)), initial=0.0) > 1e-12 * max(1.0, np.abs(c).max()):
                raise ValueError("cost observables must be Hermitian")
            if np.linalg.eigvalsh(c).min() < -1e-10:
                raise ValueError("cost observables must be positive semidefinite")
        if self.mu is not None and not self.mu > 0:
            raise ValueError("risk parameter mu must be strictly positive")
        object.__setattr__(self, "C1", C1)
        object.__setattr__(self, "C2", C2)

    def with_mu(self, mu) -> "QuantumCostSpec":
        return QuantumCostSpec(self.C1, self.C2, mu)

    def exp_terminal(self, mu: Optional[float] = None) -> np.ndarray:
        """``exp(mu C2)`` through the Hermitian eigendecomposition."""
        mu = self.mu if mu is None else mu
        w, v = np.linalg.eigh(self.C2)
        return (v * np.exp(mu * w)) @ dag(v)


@dataclass(frozen=True)
class UnnormalizedDensityState:
    sigma: np.ndarray
    log_scale: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.sigma, complex)
        if np.max(np.abs(s - dag(s)), initial=0.0) > 1e-9 * max(1.0, np.abs(s).max()):
            raise ValueError("unnormalized state must be Hermitian")
        if not np.any(s):
            raise ValueError("unnormalized state is identically zero")
        object.__setattr__(self, "sigma", s)

    def normalized(self) -> DensityState:
        return DensityState(self.sigma / np.trace(self.sigma).real)


def _tr(A):
    return np.trace(A, axis1=-2, axis2=-1)


def _control_stack(model: QuantumModel, u, ops):
    idx = model.control_index(np.asarray(u, float))
    return np.stack(ops)[idx]


def quantum_filter_step(rho, model: QuantumModel, u, dY, dt: float, step: Optional[int] = None):
    """One step of the conditional state given the record increment ``dY``.

    ``rho + L'(rho) dt + (L rho + rho L* - tr((L+L*) rho) rho) dW`` with
    ``dW = dY - tr((L+L*) rho) dt``, followed by :func:`repair`. Accepts a
    :class:`DensityState` or a batch of matrices.
    """
    wrap = isinstance(rho, DensityState)
    r = rho.rho if wrap else np.asarray(rho, complex)
    out = repair(_filter_update(r, model, model.control_index(u), dY, dt), step=step)
    return DensityState(out) if wrap else out


def _filter_update(r, model, idx, dY, dt):
    """Unrepaired filter update; superoperator form for small dimensions."""
    dY = np.asarray(dY, float)
    if model.dim <= SUPEROP_MAX_DIM:
        S = model.superops
        v = r.reshape(r.shape[:-2] + (-1,))
        m = (v @ S["obs"]).real
        dW = dY - m * dt
        out = v + apply_superop(v, S["gen"], idx) * dt + (v @ S["meas"] - m[..., None] * v) * dW[..., None]
        return out.reshape(r.shape)
    L = model.L
    Ld = dag(L)
    m = _tr((L + Ld) @ r).real
    dW = dY - m * dt
    corr = L @ r + r @ Ld - m[..., None, None] * r
    return r + _adjoint(np.stack(model.H)[idx], L, r) * dt + corr * dW[..., None, None]


def _rs_update(s, model, cost, idx, dY, dt):
    dY = np.asarray(dY, float)
    if model.dim <= SUPEROP_MAX_DIM:
        S = model.superops
        I = np.eye(model.dim)
        ins = np.stack([(0.5 * cost.mu * (np.kron(C, I) + np.kron(I, C.T))).T for C in cost.C1])
        v = s.reshape(s.shape[:-2] + (-1,))
        out = v + apply_superop(v, S["gen"] + ins, idx) * dt + (v @ S["meas"]) * dY[..., None]
        return out.reshape(s.shape)
    L = model.L
    C1 = np.stack(cost.C1)[idx]
    drift = _adjoint(np.stack(model.H)[idx], L, s) + 0.5 * cost.mu * (C1 @ s + s @ C1)
    return s + drift * dt + (L @ s + s @ dag(L)) * dY[..., None, None]


def quantum_rs_filter_step(sigma, model: QuantumModel, cost: QuantumCostSpec, u, dY, dt: float,
                           log_scale=None, step: Optional[int] = None):
    """One step of the risk-sensitive unnormalized state.

    ``sigma + [L'(sigma) + mu/2 (C1 sigma + sigma C1)] dt + (L sigma + sigma L*) dY``.
    Negative eigenvalues from the explicit step are clipped as in
    :func:`repair`, keeping the trace of the unclipped update. Rescaling
    into ``[1e-6, 1e6]`` moves the factor into ``log_scale``; array input returns
    ``(sigma, log_scale)``.
    """
    if cost.mu is None:
        raise ValueError("risk-sensitive filter needs cost.mu > 0")
    wrap = isinstance(sigma, UnnormalizedDensityState)
    if wrap:
        s, ls = sigma.sigma, sigma.log_scale
    else:
        s = np.asarray(sigma, complex)
        ls = np.zeros(s.shape[:-2]) if log_scale is None else np.asarray(log_scale, float)
    out = _rs_update(s, model, cost, model.control_index(u), dY, dt)
    scale = np.abs(out).max(axis=(-2, -1))
    asym = np.abs(out - dag(out)).max(axis=(-2, -1))
    if np.any(asym > 1e-8 * scale):
        raise NumericalError(f"risk-sensitive state lost Hermiticity at step {step}", step=step)
    out = 0.5 * (out + dag(out))
    tr = _tr(out).real
    lo = _min_eig(out)
    neg = lo < 0
    if np.any(neg):
        worst = float(np.max(-lo / np.maximum(np.abs(tr), 1e-300)))
        if worst > MAX_REPAIR:
            raise NumericalError(f"risk-sensitive state far from positive at step {step}", step=step)
        diagnostics.count("rs_density_repairs", int(np.sum(lo < -1e-8 * np.abs(tr))))
        diagnostics.record_max("rs_density_repair_max", worst)
        # clipping must not add mass: rescale to the pre-clip trace
        if out.ndim == 2:
            w, v = np.linalg.eigh(out)
            out = (v * np.clip(w, 0.0, None)) @ dag(v) * (tr / np.clip(w, 0.0, None).sum())
        else:
            w, v = np.linalg.eigh(out[neg])
            wc = np.clip(w, 0.0, None)
            out[neg] = (v * wc[..., None, :]) @ dag(v) * (tr[neg] / wc.sum(axis=-1))[:, None, None]
    if np.any(tr <= 0):
        raise NumericalError(f"risk-sensitive state vanished at step {step}", step=step)
    band = (tr < RESCALE_BAND[0]) | (tr > RESCALE_BAND[1])
    if np.any(band):
        f = np.where(band, tr, 1.0)
        out = out / f[..., None, None]
        ls = ls + np.log(f)
    if wrap:
        return UnnormalizedDensityState(out, float(ls))
    return out, ls


# -- controllers -------------------------------------------------------------


class QuantumFilterController(Controller):
    """Separation-structure controller: quantum filter plus ``feedback(rho, k)``."""

    def __init__(self, model: QuantumModel, rho0):
        self.model = model
        self.rho0 = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, complex)

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self.rho = np.broadcast_to(self.rho0, (n_paths,) + self.rho0.shape).copy()

    def feedback(self, rho, k):
        raise NotImplementedError

    def control(self, k):
        return np.asarray(self.feedback(self.rho, k), float).reshape(self.n_paths)

    def observe(self, k, u, dy):
        self.rho = quantum_filter_step(self.rho, self.model, u, dy, self.grid.dt, step=k + 1)


class ThresholdController(QuantumFilterController):
    """``high`` when ``tr(rho P) > threshold``, ``low`` otherwise (default ``P = |g><g|``)."""

    def __init__(self, model, rho0, low=0.0, high=1.0, threshold=0.5, projector=None):
        super().__init__(model, rho0)
        self.low, self.high, self.threshold = low, high, threshold
        self.P = ground() if projector is None else np.asarray(projector, complex)

    def feedback(self, rho, k):
        pop = _tr(rho @ self.P).real
        return np.where(pop > self.threshold, self.high, self.low)


# -- simulation --------------------------------------------------------------


@dataclass
class HomodyneBatch:
    records: np.ndarray  # (n, n_steps)
    innovations: np.ndarray  # (n, n_steps) dW
    controls: np.ndarray  # (n, n_steps)
    final: np.ndarray  # (n, d, d)
    running: np.ndarray  # (n,) integral of tr(rho C1(u)) dt, zeros without a cost
    states: Optional[np.ndarray] = None  # (n, n_steps+1, d, d)


def homodyne_batch(model: QuantumModel, controller, rho0, times: TimeGrid, seed: int, indices,
                   cost: Optional[QuantumCostSpec] = None, keep_states: bool = False) -> HomodyneBatch:
    """Simulate conditional trajectories for paths ``indices``; each path uses its own stream."""
    indices = list(indices)
    n = len(indices)
    dt, N = times.dt, times.n_steps
    sq = math.sqrt(dt)
    dW = np.empty((n, N))
    for j, i in enumerate(indices):
        dW[j] = path_rng(seed, i).standard_normal(N) * sq
    r0 = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, complex)
    rho = np.broadcast_to(r0, (n,) + r0.shape).copy()
    ctrl = as_controller(controller)
    ctrl.reset(n, times)
    d = model.dim
    obs = (model.L + dag(model.L)).T.reshape(-1)
    # tr(rho C) = vec(rho) . vec(C^T)
    c1 = None if cost is None else np.stack([c.T.reshape(-1) for c in cost.C1])
    dY = np.empty((n, N))
    us = np.empty((n, N))
    running = np.zeros(n)
    states = np.empty((n, N + 1) + r0.shape, complex) if keep_states else None
    if keep_states:
        states[:, 0] = rho
    for k in range(N):
        u = np.asarray(ctrl.control(k), float).reshape(n)
        us[:, k] = u
        idx = model.control_index(u)
        v = rho.reshape(n, d * d)
        if c1 is not None:
            running += np.einsum("pi,pi->p", v, c1[idx]).real * dt
        dY[:, k] = (v @ obs).real * dt + dW[:, k]
        rho = repair(_filter_update(rho, model, idx, dY[:, k], dt), step=k + 1)
        if keep_states:
            states[:, k + 1] = rho
        ctrl.observe(k, u, dY[:, k])
    return HomodyneBatch(dY, dW, us, rho, running, states)


def homodyne_trajectory(model: QuantumModel, controller, rho0, times: TimeGrid, seed: int, path_index: int = 0):
    """Single trajectory ``(MeasurementRecord, states (n_steps+1, d, d), controls)``."""
    b = homodyne_batch(model, controller, rho0, times, seed, [path_index], keep_states=True)
    return MeasurementRecord(b.records[0], times.times), b.states[0], b.controls[0]


def evaluate_quantum_cost(model: QuantumModel, cost: QuantumCostSpec, controller, n_traj: int, seed: int,
                          times: TimeGrid, rho0, mode: str = "direct", chunk: int = 2048) -> Estimate:
    """``E[ int tr(rho C1(u)) dt + tr(rho_T C2) ]`` over conditional trajectories.

    In the trajectory picture the direct and information-state expressions
    are the same sum, so ``mode`` only labels the report.
    """
    if mode not in ("direct", "infostate"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    samples = np.empty(n_traj)
    for idx in chunks(n_traj, chunk):
        b = homodyne_batch(model, controller, rho0, times, seed, idx, cost=cost)
        samples[idx.start:idx.stop] = b.running + _tr(b.final @ cost.C2).real
    return summarize(samples)


def evaluate_quantum_rs_cost(model: QuantumModel, cost: QuantumCostSpec, controller, n_traj: int, seed: int,
                             times: TimeGrid, rho0, form: str = "state", chunk: int = 2048) -> Estimate:
    """Risk-sensitive cost under the reference picture.

    ``form="state"`` propagates the unnormalized state and averages
    ``tr(sigma_T exp(mu C2))``. ``form="propagator"`` propagates the operator
    ``V`` with ``dV = (L dZ + (-1/2 L*L - iH + mu/2 C1) dt) V`` and averages
    ``tr(V rho0 V* exp(mu C2))``. Both feed the same controller the reference
    record ``Z``.
    """
    if cost.mu is None:
        raise ValueError("risk-sensitive cost needs mu > 0")
    if form not in ("state", "propagator"):
        raise ValueError(f"unknown form {form!r}")
    if n_traj < 2:
        raise ValueError("n_traj must be at least 2")
    r0 = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, complex)
    E = cost.exp_terminal()
    dt, N = times.dt, times.n_steps
    sq = math.sqrt(dt)
    L = model.L
    Ld = dag(L)
    d = model.dim
    K = np.stack([-0.5 * Ld @ L - 1j * H + 0.5 * cost.mu * C for H, C in zip(model.H, cost.C1)])
    samples = np.empty(n_traj)
    ctrl = as_controller(controller)
    for idx in chunks(n_traj, chunk):
        n = len(idx)
        dZ = np.empty((n, N))
        for j, i in enumerate(idx):
            dZ[j] = path_rng(seed, i).standard_normal(N) * sq
        ctrl.reset(n, times)
        ls = np.zeros(n)
        if form == "state":
            s = np.broadcast_to(r0, (n, d, d)).copy()
        else:
            V = np.broadcast_to(np.eye(d, dtype=complex), (n, d, d)).copy()
        for k in range(N):
            u = np.asarray(ctrl.control(k), float).reshape(n)
            if form == "state":
                s, ls = quantum_rs_filter_step(s, model, cost, u, dZ[:, k], dt, ls, step=k + 1)
            else:
                kk = model.control_index(u)
                V = V + (L[None] * dZ[:, k, None, None] + K[kk] * dt) @ V
                scale = np.abs(V).max(axis=(-2, -1))
                band = (scale < 1e-3) | (scale > 1e3)
                if np.any(band):
                    f = np.where(band, scale, 1.0)
                    V = V / f[:, None, None]
                    ls = ls + 2 * np.log(f)
            ctrl.observe(k, u, dZ[:, k])
        if form == "state":
            vals = _tr(s @ E).real
        else:
            vals = _tr(V @ r0 @ dag(V) @ E).real
        samples[idx.start:idx.stop] = vals * np.exp(ls)
    if not np.all(np.isfinite(samples)):
        raise NumericalError("risk-sensitive estimate overflowed")
    return summarize(samples, warn_heavy_tail=True)


def write_trajectory_csv(path, times, record, states, controls) -> None:
    """Columns ``t, dY, <sigma_x>, <sigma_y>, <sigma_z>, u``; one row per step start."""
    rec = record.increments if isinstance(record, MeasurementRecord) else np.asarray(record)
    b = bloch_vector(states)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dY", "sx", "sy", "sz", "u"])
        for k in range(len(rec)):
            w.writerow([repr(float(times[k])), repr(float(rec[k])), repr(float(b[k, 0])),
                        repr(float(b[k, 1])), repr(float(b[k, 2])), repr(float(controls[k]))])


def qubit_stabilize(gamma=1.0, q=1.0, r=0.01, controls=(0.0, 3.0), mu=None):
    """Decaying qubit held near ``|e>`` by a ``sigma_x`` drive.

    ``H(u) = u sigma_x / 2``, ``C1(u) = q |g><g| + r u^2 I``, ``C2 = q |g><g|``,
    initial state ``|e><e|``.
    """
    if q < 0 or r < 0:
        raise ValueError("cost weights must be nonnegative")
    model = decay_qubit(gamma, controls, drive=0.5)
    g = ground()
    cost = QuantumCostSpec(tuple(q * g + r * u * u * np.eye(2) for u in model.control_set), q * g, mu)
    return model, cost, excited()
