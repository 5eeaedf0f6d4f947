"""Conditional-state, risk-sensitive and Kalman recursions.

The grid filters act on :class:`MarkovChainModel` weights. Every step
function accepts a single weight vector or a batch ``(n_paths, n)`` together
with per-path controls and observation increments.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import diagnostics
from ..stochastic import Estimate, NumericalError, TimeGrid, as_controller, chunks, summarize, wiener_batch
from .model import ClassicalModel, CostSpec, MarkovChainModel, simulate

__all__ = [
    "InfoState",
    "UnnormalizedInfoState",
    "GaussianState",
    "filter_step",
    "rs_filter_step",
    "kalman_step",
    "run_filter",
    "run_rs_filter",
    "innovations",
    "cost_via_infostate",
    "write_filter_csv",
]

RESCALE_BAND = (1e-6, 1e6)
NEG_TOL = 1e-8


@dataclass(frozen=True)
class InfoState:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("information state must be a probability vector")
        object.__setattr__(self, "weights", w)

    def expect(self, values) -> float:
        return float(self.weights @ np.asarray(values, float))


@dataclass(frozen=True)
class UnnormalizedInfoState:
    """Nonnegative weights times ``exp(log_scale)``."""

    weights: np.ndarray
    log_scale: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("unnormalized state needs nonnegative, not all zero weights")
        object.__setattr__(self, "weights", w)

    def total(self, values=None) -> float:
        v = 1.0 if values is None else np.asarray(values, float)
        return float(np.sum(self.weights * v) * math.exp(self.log_scale))

    def normalized(self) -> InfoState:
        return InfoState(self.weights / self.weights.sum())


@dataclass(frozen=True)
class GaussianState:
    """Mean ``(n,)`` or batched ``(n_paths, n)``; covariance ``(n, n)`` shared."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.covariance, float))
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-8 * max(1.0, np.abs(P).max()):
            raise ValueError("covariance is not symmetric")
        P = 0.5 * (P + P.T)
        evals, evecs = np.linalg.eigh(P)
        if evals.min() < -1e-10:
            raise ValueError("covariance is not positive semidefinite")
        if evals.min() < 0:
            P = (evecs * np.clip(evals, 0, None)) @ evecs.T
        object.__setattr__(self, "mean", np.asarray(self.mean, float))
        object.__setattr__(self, "covariance", P)


def _u_index(chain: MarkovChainModel, u, batch: Optional[int]):
    idx = chain.control_index(u)
    if batch is not None:
        idx = np.broadcast_to(idx, (batch,))
    return idx


def filter_step(pi, chain: MarkovChainModel, u, dy, dt: float):
    """One step of the nonlinear filter on the chain.

    Prediction ``w + Q(u)^T w dt`` followed by the correction
    ``w_i (1 + (h_i - w(h)) (dy - w(h) dt))``; negative entries are clipped and
    the result renormalized.
    """
    wrap = isinstance(pi, InfoState)
    w = pi.weights if wrap else np.asarray(pi, float)
    batch = w.shape[0] if w.ndim == 2 else None
    w = chain.propagate(w, _u_index(chain, u, batch), dt)
    h = chain.h_vals
    hbar = w @ h
    innov = np.asarray(dy, float) - hbar * dt
    if batch is None:
        w *= 1.0 + (h - hbar) * innov
    else:
        corr = np.subtract.outer(-hbar, -h)  # h_i - hbar per path
        corr *= innov[:, None]
        corr += 1.0
        w *= corr
    if w.min() < 0:
        diagnostics.count("filter_clipped", int((w < 0).sum()))
        np.maximum(w, 0.0, out=w)
    s = w.sum(axis=-1)
    if np.any(s <= 0):
        raise NumericalError(f"filter collapse: all weights vanished (dy={dy}, dt={dt})")
    w /= s if batch is None else s[:, None]
    return InfoState(w) if wrap else w


def rs_filter_step(sigma, chain: MarkovChainModel, u, dy, dt: float, cost: CostSpec, log_scale=None):
    """One step of the risk-sensitive information state.

    ``w + [Q(u)^T + mu diag(L(., u))] w dt + diag(h) w dy``. Weights are
    rescaled into ``[1e-6, 1e6]`` with the factor moved into ``log_scale``.
    Array input returns ``(weights, log_scale)``.
    """
    if cost.mu is None:
        raise ValueError("risk-sensitive filter needs cost.mu > 0")
    wrap = isinstance(sigma, UnnormalizedInfoState)
    if wrap:
        w, ls = sigma.weights, sigma.log_scale
    else:
        w = np.asarray(sigma, float)
        ls = np.zeros(w.shape[:-1]) if log_scale is None else np.asarray(log_scale, float)
    batch = w.shape[0] if w.ndim == 2 else None
    idx = _u_index(chain, u, batch)
    Lv = _running_on_grid(chain, cost)
    drift = chain.propagate(w, idx, dt) - w
    dy = np.asarray(dy, float)
    if batch is None:
        w_new = w + drift + cost.mu * Lv[int(idx)] * w * dt + chain.h_vals * w * dy
    else:
        w_new = w + drift + cost.mu * Lv[idx] * w * dt + chain.h_vals[None, :] * w * dy[:, None]
    scale = w_new.max(axis=-1)
    lo = w_new.min(axis=-1)
    if np.any(lo < -NEG_TOL * np.abs(scale)):
        raise NumericalError(
            f"risk-sensitive filter produced negative weights (min {np.min(lo):.3g}); "
            f"the explicit scheme is unstable at dt={dt}, try a smaller step"
        )
    w_new = np.clip(w_new, 0.0, None)
    scale = w_new.max(axis=-1)
    if np.any(scale <= 0):
        raise NumericalError("risk-sensitive filter collapsed to zero")
    out_band = (scale < RESCALE_BAND[0]) | (scale > RESCALE_BAND[1])
    if np.any(out_band):
        factor = np.where(out_band, scale, 1.0)
        w_new = w_new / (factor if batch is None else factor[:, None])
        ls = ls + np.log(factor)
    if wrap:
        return UnnormalizedInfoState(w_new, float(ls))
    return w_new, ls


def _running_on_grid(chain: MarkovChainModel, cost: CostSpec) -> np.ndarray:
    """``L(x_i, u_k)`` as an array ``(n_controls, n)``."""
    x = chain.grid[:, None]
    return np.stack([cost.running(x, np.full(chain.n, u)) for u in chain.control_set])


def kalman_step(gauss: GaussianState, a, b, c, sigma, u, dy, dt: float) -> GaussianState:
    """Continuous-discrete Kalman step with unit observation noise intensity.

    Euler prediction of mean and covariance, then the update with gain
    ``P c^T`` applied to ``dy - c m dt``.
    """
    A = np.atleast_2d(np.asarray(a, float))
    n = A.shape[0]
    B = np.asarray(b, float).reshape(n, -1)
    C = np.asarray(c, float).reshape(-1, n)
    G = np.asarray(sigma, float).reshape(n, -1)
    m = gauss.mean
    batched = m.ndim == 2
    m = m.reshape(-1, n)
    u = np.asarray(u, float).reshape(m.shape[0] if np.size(u) > 1 else 1, -1)
    dy = np.asarray(dy, float).reshape(-1, C.shape[0])
    P = gauss.covariance
    m_pred = m + (m @ A.T + u @ B.T) * dt
    P_pred = P + (A @ P + P @ A.T + G @ G.T) * dt
    K = P_pred @ C.T
    m_new = m_pred + (dy - m_pred @ C.T * dt) @ K.T
    P_new = P_pred - K @ C @ P_pred * dt
    asym = np.max(np.abs(P_new - P_new.T), initial=0.0)
    if asym > 1e-8:
        diagnostics.count("kalman_resymmetrized")
    P_new = 0.5 * (P_new + P_new.T)
    if not batched:
        m_new = m_new.reshape(gauss.mean.shape)
    return GaussianState(m_new, P_new)


def run_filter(chain: MarkovChainModel, pi0, controls, dys, dt: float) -> np.ndarray:
    """Filter a batch of records; returns weights ``(n_paths, n_steps+1, n)``."""
    controls = np.atleast_2d(controls)
    dys = np.atleast_2d(dys)
    n_paths, n_steps = controls.shape
    out = np.empty((n_paths, n_steps + 1, chain.n))
    w = np.broadcast_to(np.asarray(pi0, float), (n_paths, chain.n)).copy()
    out[:, 0] = w
    for k in range(n_steps):
        w = filter_step(w, chain, controls[:, k], dys[:, k], dt)
        out[:, k + 1] = w
    return out


def innovations(chain: MarkovChainModel, pi0, controls, dys, dt: float) -> np.ndarray:
    """Innovation increments ``dy_k - pi_k(h) dt`` using the pre-step conditional state."""
    W = run_filter(chain, pi0, controls, dys, dt)
    return np.atleast_2d(dys) - (W[:, :-1] @ chain.h_vals) * dt


def run_rs_filter(chain, sigma0, controls, dys, dt, cost):
    """Risk-sensitive states along records; returns ``(weights, log_scale)`` histories."""
    controls = np.atleast_2d(controls)
    dys = np.atleast_2d(dys)
    n_paths, n_steps = controls.shape
    W = np.empty((n_paths, n_steps + 1, chain.n))
    LS = np.zeros((n_paths, n_steps + 1))
    w = np.broadcast_to(np.asarray(sigma0, float), (n_paths, chain.n)).copy()
    ls = np.zeros(n_paths)
    W[:, 0] = w
    for k in range(n_steps):
        w, ls = rs_filter_step(w, chain, controls[:, k], dys[:, k], dt, cost, ls)
        W[:, k + 1] = w
        LS[:, k + 1] = ls
    return W, LS


def _infostate_costs(chain, cost, pi0, traj, dt):
    """Cost of each path re-expressed through the conditional state."""
    controls = traj.controls
    dys = np.diff(traj.observations[..., 0], axis=1)
    n_paths, n_steps = controls.shape
    Lv = _running_on_grid(chain, cost)
    Phi = cost.terminal(chain.grid[:, None])
    w = np.broadcast_to(pi0, (n_paths, chain.n)).copy()
    total = np.zeros(n_paths)
    for k in range(n_steps):
        idx = chain.control_index(controls[:, k])
        total += np.einsum("pi,pi->p", w, Lv[idx]) * dt
        w = filter_step(w, chain, controls[:, k], dys[:, k], dt)
    return total + w @ Phi


def cost_via_infostate(controller, model: ClassicalModel, cost: CostSpec, chain: MarkovChainModel,
                       n_paths: int, seed: int, grid: TimeGrid, mode: str = "risk-neutral",
                       pi0=None) -> Estimate:
    """Evaluate the objective through the information state.

    ``risk-neutral``: simulate ``(x, y)``, filter ``y`` and average
    ``sum pi_k(L) dt + pi_T(Phi)``. ``risk-sensitive``: simulate ``y`` as a
    standard Wiener process (reference measure), propagate the risk-sensitive
    state and average ``sigma_T(exp(mu Phi))``.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    if pi0 is None:
        pi0 = chain.gaussian_weights(float(np.ravel(model.x0_mean)[0]), float(np.ravel(model.x0_std)[0]))
    pi0 = np.asarray(pi0, float)
    if mode == "risk-neutral":
        samples = [
            _infostate_costs(chain, cost, pi0, traj, grid.dt)
            for _, traj in simulate(model, controller, grid, n_paths, seed)
        ]
        return summarize(np.concatenate(samples))
    if mode != "risk-sensitive":
        raise ValueError(f"unknown mode {mode!r}")
    if cost.mu is None:
        raise ValueError("risk-sensitive mode needs cost.mu > 0")
    samples = [
        _rs_samples(controller, model, cost, chain, pi0, grid, seed, idx)
        for idx in chunks(n_paths)
    ]
    return summarize(np.concatenate(samples), warn_heavy_tail=True)


def reference_records(model: ClassicalModel, grid: TimeGrid, seed: int, idx) -> np.ndarray:
    """Observation increments under the reference measure, ``(len(idx), n_steps)``.

    Drawn from the observation channel of the same per-path stream the
    physical simulation uses.
    """
    inc = wiener_batch(grid, model.noise_dim + model.obs_dim, seed, idx)
    return inc[:, :, model.noise_dim]


def _rs_samples(controller, model, cost, chain, sigma0, grid, seed, idx):
    dys = reference_records(model, grid, seed, idx)
    n_paths = dys.shape[0]
    ctrl = as_controller(controller)
    ctrl.reset(n_paths, grid)
    w = np.broadcast_to(sigma0, (n_paths, chain.n)).copy()
    ls = np.zeros(n_paths)
    for k in range(grid.n_steps):
        u = np.asarray(ctrl.control(k), float).reshape(n_paths)
        w, ls = rs_filter_step(w, chain, u, dys[:, k], grid.dt, cost, ls)
        ctrl.observe(k, u, dys[:, k])
    terminal = np.exp(cost.mu * cost.terminal(chain.grid[:, None]))
    return (w @ terminal) * np.exp(ls)


def write_filter_csv(path, times, weights, log_scale=None) -> None:
    """Columns ``t, w0..w{n-1}, log_scale`` (zeros for normalized filters)."""
    weights = np.asarray(weights, float)
    ls = np.zeros(len(times)) if log_scale is None else np.asarray(log_scale, float)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"w{i}" for i in range(weights.shape[1])] + ["log_scale"])
        for t, row, s in zip(times, weights, ls):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [repr(float(s))])
