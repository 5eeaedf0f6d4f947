"""Measurement-feedback dynamic programming for a qubit on a Bloch-ball lattice."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .. import diagnostics
from ..dp import PolicyTable, ValueTable, _argmin_lowest
from ..stochastic import TimeGrid
from .core import QuantumModel, bloch_vector, from_bloch
from .feedback import QuantumCostSpec, QuantumFilterController, _filter_update, _tr
from .core import repair

__all__ = ["BlochGrid", "qubit_mfc_value_iteration", "QubitPolicyController"]

GUARD = dict(max_points=10_000, max_steps=200)


class BlochGrid:
    """Regular lattice in spherical coordinates ``(r, theta, phi)`` of the Bloch ball.

    ``r`` and ``theta`` include both endpoints, ``phi`` is periodic. Values
    between nodes come from the Freudenthal (Kuhn) triangulation of each
    coordinate cell, so interpolation is piecewise linear in ``(r, theta, phi)``.
    """

    def __init__(self, n_r: int = 8, n_theta: int = 12, n_phi: int = 16):
        if min(n_r, n_theta) < 1 or n_phi < 3:
            raise ValueError("need n_r, n_theta >= 1 and n_phi >= 3")
        self.shape = (n_r, n_theta, n_phi)
        ir, it, ip = np.meshgrid(np.arange(n_r + 1), np.arange(n_theta + 1), np.arange(n_phi), indexing="ij")
        r = ir.ravel() / n_r
        th = np.pi * it.ravel() / n_theta
        ph = 2 * np.pi * ip.ravel() / n_phi
        self.points = np.stack([r * np.sin(th) * np.cos(ph), r * np.sin(th) * np.sin(ph), r * np.cos(th)], axis=1)
        self.projections = 0

    def __len__(self):
        return len(self.points)

    def _index(self, ir, it, ip):
        n_r, n_t, n_p = self.shape
        return (ir * (n_t + 1) + it) * n_p + np.mod(ip, n_p)

    def barycentric(self, q):
        q = np.atleast_2d(np.asarray(q, float))
        n_r, n_t, n_p = self.shape
        r = np.linalg.norm(q, axis=1)
        out = r > 1 + 1e-9
        if np.any(out):
            self.projections += int(out.sum())
            diagnostics.count("bloch_projections", int(out.sum()))
        safe = np.where(r > 0, r, 1.0)
        th = np.arccos(np.clip(q[:, 2] / safe, -1.0, 1.0))
        ph = np.mod(np.arctan2(q[:, 1], q[:, 0]), 2 * np.pi)
        c = np.stack([np.minimum(r, 1.0) * n_r, th * n_t / np.pi, ph * n_p / (2 * np.pi)], axis=1)
        base = np.floor(c).astype(np.int64)
        base[:, 0] = np.clip(base[:, 0], 0, n_r - 1)
        base[:, 1] = np.clip(base[:, 1], 0, n_t - 1)
        frac = c - base
        perm = np.argsort(-frac, axis=1, kind="stable")
        fs = np.take_along_axis(frac, perm, axis=1)
        nq = len(q)
        weights = np.empty((nq, 4))
        weights[:, 0] = 1 - fs[:, 0]
        weights[:, 1] = fs[:, 0] - fs[:, 1]
        weights[:, 2] = fs[:, 1] - fs[:, 2]
        weights[:, 3] = fs[:, 2]
        verts = np.empty((nq, 4), dtype=np.int64)
        v = base.copy()
        rows = np.arange(nq)
        for j in range(4):
            if j > 0:
                v[rows, perm[:, j - 1]] += 1
            verts[:, j] = self._index(v[:, 0], v[:, 1], v[:, 2])
        return verts, weights

    def interpolate(self, values, q):
        verts, weights = self.barycentric(q)
        return np.einsum("qj,qj->q", np.asarray(values)[verts], weights)

    def nearest(self, q):
        verts, weights = self.barycentric(q)
        return verts[np.arange(len(verts)), np.argmax(weights, axis=1)]


def qubit_mfc_value_iteration(model: QuantumModel, cost: QuantumCostSpec, grid: BlochGrid, times: TimeGrid,
                              information: bool = True, guard: Optional[dict] = None):
    """Backward recursion over Bloch vectors; returns ``(ValueTable, PolicyTable)``.

    Each step averages the two filter updates whose innovation is
    ``+-sqrt(dt)``. With ``information=False`` the transition is the
    unconditional master-equation step instead (open-loop problem).
    """
    if model.dim != 2:
        raise ValueError("measurement-feedback DP is implemented for qubits only")
    g = dict(GUARD, **(guard or {}))
    if len(grid) > g["max_points"] or times.n_steps > g["max_steps"]:
        raise ValueError(f"problem exceeds desk-scale guardrails {g}; pass guard=... to override")
    dt, N = times.dt, times.n_steps
    rho = from_bloch(grid.points)
    npts = len(rho)
    V = np.empty((npts, N + 1))
    pol = np.empty((npts, N), dtype=np.int64)
    V[:, N] = _tr(rho @ cost.C2).real
    grid.projections = 0
    obs = (model.L + model.L.conj().T)
    m = _tr(rho @ obs).real
    s = math.sqrt(dt)
    nu = len(model.control_set)
    succ = []
    for j in range(nu):
        idx = np.full(npts, j)
        branches = (m * dt + s, m * dt - s) if information else (m * dt,)
        nxt = [bloch_vector(repair(_filter_update(rho, model, idx, dy, dt))) for dy in branches]
        succ.append(nxt)
    run = np.stack([_tr(rho @ C).real for C in cost.C1])
    for k in range(N - 1, -1, -1):
        Qv = np.empty((npts, nu))
        for j in range(nu):
            cont = sum(grid.interpolate(V[:, k + 1], b) for b in succ[j]) / len(succ[j])
            Qv[:, j] = cont + run[j] * dt
        pol[:, k] = _argmin_lowest(Qv)
        V[:, k] = Qv[np.arange(npts), pol[:, k]]
    return (
        ValueTable(V, times, grid, projections=grid.projections),
        PolicyTable(pol, model.control_set, grid),
    )


class QubitPolicyController(QuantumFilterController):
    """Quantum filter feeding a Bloch-lattice policy (nearest node)."""

    def __init__(self, policy: PolicyTable, model: QuantumModel, rho0):
        super().__init__(model, rho0)
        self.policy = policy

    def feedback(self, rho, k):
        return self.policy.control(bloch_vector(rho), k)
