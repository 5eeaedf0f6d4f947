"""Dynamic programming on discretized information states, LQG synthesis and
separation-structure controllers.

The risk-neutral recursion over the probability simplex is

    V(pi, t) = min_u  1/2 sum_{s=+-1} V(F(pi, u, s), t+dt) + pi(L(., u)) dt

where ``F`` is one :func:`filter_step` whose innovation ``dy - pi(h) dt`` is
quantized to ``s sqrt(dt)``. The risk-sensitive recursion uses the
unnormalized state with raw increments ``dy = s sqrt(dt)`` (the observation is
a Wiener process under the reference measure) and no separate running cost.
Values between lattice points come from barycentric interpolation on the
Freudenthal triangulation of the simplex lattice.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diagnostics
from .classical.filters import GaussianState, filter_step, kalman_step, rs_filter_step
from .classical.model import ClassicalModel, CostSpec, MarkovChainModel
from .stochastic import Controller, Estimate, NumericalError, TimeGrid, path_rng, summarize

__all__ = [
    "SimplexGrid",
    "ValueTable",
    "PolicyTable",
    "value_iteration",
    "rs_value_iteration",
    "quantized_cost_mc",
    "LQGController",
    "lqg_synthesize",
    "filter_riccati",
    "PolicyController",
    "RSPolicyController",
    "KalmanThresholdController",
    "run_closed_loop",
    "write_tables_csv",
    "read_policy_csv",
]

GUARD = dict(max_states=4, max_mesh=40, max_steps=1000)
TIE_RTOL = 1e-12


# -- simplex lattice ---------------------------------------------------------


class SimplexGrid:
    """All probability vectors ``k/m`` with nonnegative integer ``k`` summing to ``m``."""

    def __init__(self, n: int, m: int):
        if n < 1 or m < 1:
            raise ValueError("need n >= 1 states and mesh m >= 1")
        self.n, self.m = n, m
        lattice = []
        for bars in itertools.combinations(range(m + n - 1), n - 1):
            edges = (-1,) + bars + (m + n - 1,)
            lattice.append([edges[i + 1] - edges[i] - 1 for i in range(n)])
        self.lattice = np.array(lattice, dtype=np.int64).reshape(-1, n)
        self.points = self.lattice / m
        self._base = m + 1
        codes = self._codes(self.lattice)
        self._order = np.argsort(codes)
        self._sorted_codes = codes[self._order]
        self.projections = 0

    def __len__(self):
        return len(self.points)

    def _codes(self, lattice):
        return lattice @ (self._base ** np.arange(self.n, dtype=np.int64))

    def index_of(self, lattice) -> np.ndarray:
        codes = self._codes(np.asarray(lattice, dtype=np.int64))
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.minimum(pos, len(self._sorted_codes) - 1)
        if np.any(self._sorted_codes[pos] != codes):
            raise KeyError("lattice vector not on the grid")
        return self._order[pos]

    def _project(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, float))
        bad = (q.min(axis=1) < -1e-9) | (np.abs(q.sum(axis=1) - 1.0) > 1e-9)
        if np.any(bad):
            n_bad = int(bad.sum())
            self.projections += n_bad
            diagnostics.count("simplex_projections", n_bad)
        q = np.clip(q, 0.0, None)
        s = q.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("cannot project an all-zero vector onto the simplex")
        return q / s

    def barycentric(self, q):
        """Vertex indices and weights, each ``(n_queries, n)``."""
        q = self._project(q)
        n, m = self.n, self.m
        nq = q.shape[0]
        if n == 1:
            return np.zeros((nq, 1), dtype=np.int64), np.ones((nq, 1))
        # cumulative coordinates z_j = m * sum_{i >= j} q_i, decreasing in j
        z = m * np.cumsum(q[:, ::-1], axis=1)[:, ::-1][:, 1:]
        z = np.clip(z, 0.0, m)
        base = np.clip(np.floor(z), 0, m - 1).astype(np.int64)
        frac = z - base
        perm = np.argsort(-frac, axis=1, kind="stable")
        fs = np.take_along_axis(frac, perm, axis=1)
        d = n - 1
        weights = np.empty((nq, n))
        weights[:, 0] = 1.0 - fs[:, 0]
        weights[:, 1:d] = fs[:, :-1] - fs[:, 1:]
        weights[:, d] = fs[:, -1]
        verts = np.empty((nq, n), dtype=np.int64)
        zv = base.copy()
        rows = np.arange(nq)
        for j in range(n):
            if j > 0:
                zv[rows, perm[:, j - 1]] += 1
            full = np.concatenate([np.full((nq, 1), m), zv, np.zeros((nq, 1), dtype=np.int64)], axis=1)
            verts[:, j] = self.index_of(full[:, :-1] - full[:, 1:])
        return verts, weights

    def interpolate(self, values: np.ndarray, q) -> np.ndarray:
        verts, weights = self.barycentric(q)
        return np.einsum("qj,qj->q", np.asarray(values)[verts], weights)

    def nearest(self, q) -> np.ndarray:
        """Lattice point carrying the largest barycentric weight (lowest index on ties)."""
        verts, weights = self.barycentric(q)
        return verts[np.arange(len(verts)), np.argmax(weights, axis=1)]


# -- tables ------------------------------------------------------------------


@dataclass
class ValueTable:
    values: np.ndarray  # (n_points, n_steps + 1)
    times: TimeGrid
    grid: object
    homogeneous: bool = False
    projections: int = 0

    def value(self, state, k: int = 0) -> np.ndarray:
        """Interpolated value; for risk-sensitive tables ``V(c s) = c V(s)``."""
        s = np.atleast_2d(np.asarray(state, float))
        if self.homogeneous:
            total = s.sum(axis=1)
            return total * self.grid.interpolate(self.values[:, k], s / total[:, None])
        return self.grid.interpolate(self.values[:, k], s)


@dataclass
class PolicyTable:
    controls: np.ndarray  # (n_points, n_steps) indices into control_set
    control_set: tuple
    grid: object
    tie_break: str = "lowest-index"

    def __post_init__(self):
        if self.controls.size and (self.controls.min() < 0 or self.controls.max() >= len(self.control_set)):
            raise ValueError("policy entries must index into the control set")

    def index(self, state, k: int) -> np.ndarray:
        return self.controls[self.grid.nearest(np.atleast_2d(np.asarray(state, float))), k]

    def control(self, state, k: int) -> np.ndarray:
        return np.asarray(self.control_set)[self.index(state, k)]


def _argmin_lowest(q: np.ndarray) -> np.ndarray:
    """Row-wise argmin treating values within a relative 1e-12 of the minimum as ties."""
    best = q.min(axis=1, keepdims=True)
    tol = TIE_RTOL * np.maximum(1.0, np.abs(best))
    return np.argmax(q <= best + tol, axis=1)


def _check_guardrails(chain, grid, times, guard):
    g = dict(GUARD, **(guard or {}))
    if chain.n > g["max_states"] or grid.m > g["max_mesh"] or times.n_steps > g["max_steps"]:
        raise ValueError(
            f"problem exceeds desk-scale guardrails {g} (states={chain.n}, mesh={grid.m}, "
            f"steps={times.n_steps}); pass guard=... to override"
        )


def _innovation_branches(chain, pts, u_idx, dt):
    """Observation increments giving innovations +-sqrt(dt) for each point."""
    pred = chain.propagate(pts, u_idx, dt)
    hbar = pred @ chain.h_vals
    s = math.sqrt(dt)
    return hbar * dt + s, hbar * dt - s


def value_iteration(chain: MarkovChainModel, cost: CostSpec, grid: SimplexGrid, times: TimeGrid,
                    obs_model: str = "binary", guard: Optional[dict] = None):
    """Backward recursion for the risk-neutral problem; returns ``(ValueTable, PolicyTable)``."""
    if obs_model != "binary":
        raise ValueError("only the binary +-sqrt(dt) observation quantization is supported")
    if grid.n != chain.n:
        raise ValueError("simplex dimension does not match the chain")
    _check_guardrails(chain, grid, times, guard)
    dt, N = times.dt, times.n_steps
    pts = grid.points
    x = chain.grid[:, None]
    Lv = np.stack([cost.running(x, np.full(chain.n, u)) for u in chain.control_set])
    Phi = cost.terminal(x)
    V = np.empty((len(pts), N + 1))
    pol = np.empty((len(pts), N), dtype=np.int64)
    V[:, N] = pts @ Phi
    grid.projections = 0
    nu = len(chain.control_set)
    for k in range(N - 1, -1, -1):
        Qv = np.empty((len(pts), nu))
        for j in range(nu):
            up, down = _innovation_branches(chain, pts, j, dt)
            nxt = 0.0
            for dy in (up, down):
                F = filter_step(pts, chain, np.full(len(pts), chain.control_set[j]), dy, dt)
                nxt = nxt + 0.5 * grid.interpolate(V[:, k + 1], F)
            Qv[:, j] = nxt + pts @ Lv[j] * dt
        pol[:, k] = _argmin_lowest(Qv)
        V[:, k] = Qv[np.arange(len(pts)), pol[:, k]]
    return (
        ValueTable(V, times, grid, projections=grid.projections),
        PolicyTable(pol, chain.control_set, grid),
    )


def rs_value_iteration(chain: MarkovChainModel, cost: CostSpec, grid: SimplexGrid, times: TimeGrid,
                       obs_model: str = "binary", guard: Optional[dict] = None):
    """Risk-sensitive recursion tabulated on normalized states (positive homogeneity)."""
    if cost.mu is None:
        raise ValueError("risk-sensitive DP needs cost.mu > 0")
    if obs_model != "binary":
        raise ValueError("only the binary +-sqrt(dt) observation quantization is supported")
    if grid.n != chain.n:
        raise ValueError("simplex dimension does not match the chain")
    _check_guardrails(chain, grid, times, guard)
    dt, N = times.dt, times.n_steps
    pts = grid.points
    V = np.empty((len(pts), N + 1))
    pol = np.empty((len(pts), N), dtype=np.int64)
    V[:, N] = pts @ np.exp(cost.mu * cost.terminal(chain.grid[:, None]))
    grid.projections = 0
    nu = len(chain.control_set)
    s = math.sqrt(dt)
    for k in range(N - 1, -1, -1):
        Qv = np.empty((len(pts), nu))
        for j in range(nu):
            nxt = 0.0
            u = np.full(len(pts), chain.control_set[j])
            for dy in (s, -s):
                w, ls = rs_filter_step(pts, chain, u, np.full(len(pts), dy), dt, cost, np.zeros(len(pts)))
                tot = w.sum(axis=1)
                nxt = nxt + 0.5 * tot * np.exp(ls) * grid.interpolate(V[:, k + 1], w / tot[:, None])
            Qv[:, j] = nxt
        pol[:, k] = _argmin_lowest(Qv)
        V[:, k] = Qv[np.arange(len(pts)), pol[:, k]]
    return (
        ValueTable(V, times, grid, homogeneous=True, projections=grid.projections),
        PolicyTable(pol, chain.control_set, grid),
    )


def quantized_cost_mc(chain: MarkovChainModel, cost: CostSpec, policy, pi0, times: TimeGrid,
                      n_paths: int, seed: int) -> Estimate:
    """Cost of a policy on the quantized-observation information-state process.

    ``policy`` is a :class:`PolicyTable` (nearest-point lookup) or a fixed
    control value. Innovation signs are fair coin flips per step.
    """
    dt, N = times.dt, times.n_steps
    x = chain.grid[:, None]
    Lv = np.stack([cost.running(x, np.full(chain.n, u)) for u in chain.control_set])
    Phi = cost.terminal(x)
    signs = np.empty((n_paths, N))
    for i in range(n_paths):
        signs[i] = path_rng(seed, i).integers(0, 2, N) * 2 - 1
    w = np.broadcast_to(np.asarray(pi0, float), (n_paths, chain.n)).copy()
    total = np.zeros(n_paths)
    for k in range(N):
        if isinstance(policy, PolicyTable):
            idx = policy.index(w, k)
        else:
            idx = np.full(n_paths, chain.control_set.index(float(policy)))
        total += np.einsum("pi,pi->p", w, Lv[idx]) * dt
        pred = chain.propagate(w, idx, dt)
        dy = (pred @ chain.h_vals) * dt + signs[:, k] * math.sqrt(dt)
        w = filter_step(w, chain, np.asarray(chain.control_set)[idx], dy, dt)
    return summarize(total + w @ Phi)


# -- CSV ---------------------------------------------------------------------


def write_tables_csv(path, value: ValueTable, policy: PolicyTable) -> None:
    """Rows ``(time index, coordinates..., value, control index)``; the terminal
    slice carries control index ``-1``."""
    pts = value.grid.points
    n = pts.shape[1]
    N = value.values.shape[1] - 1
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k"] + [f"p{i}" for i in range(n)] + ["value", "control"])
        for k in range(N + 1):
            ctrl = policy.controls[:, k] if k < N else np.full(len(pts), -1)
            for p, v, c in zip(pts, value.values[:, k], ctrl):
                wr.writerow([k] + [repr(float(c_)) for c_ in p] + [repr(float(v)), int(c)])


def read_policy_csv(path, grid: SimplexGrid, control_set) -> PolicyTable:
    """Load a policy written by :func:`write_tables_csv` (or by hand, same columns)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(rec)
    n = grid.n
    ks = np.array([int(r["k"]) for r in rows])
    N = int(ks[np.array([int(r["control"]) for r in rows]) >= 0].max()) + 1
    controls = np.full((len(grid), N), -1, dtype=np.int64)
    for r in rows:
        c = int(r["control"])
        k = int(r["k"])
        if c < 0:
            continue
        p = np.array([[float(r[f"p{i}"]) for i in range(n)]])
        controls[grid.nearest(p)[0], k] = c
    if np.any(controls < 0):
        raise ValueError("policy file does not cover every lattice point and time index")
    return PolicyTable(controls, tuple(float(u) for u in control_set), grid)


# -- LQG ---------------------------------------------------------------------


def _mats(a, b, c, sigma):
    A = np.atleast_2d(np.asarray(a, float))
    n = A.shape[0]
    return A, np.asarray(b, float).reshape(n, -1), np.asarray(c, float).reshape(-1, n), np.asarray(sigma, float).reshape(n, -1)


class LQGController(Controller):
    """Kalman filter plus linear feedback ``u = -k(t) m(t)``.

    ``P`` holds the control Riccati solution on the time grid and ``gains``
    the feedback gains ``k(t) = R^{-1} B^T P(t)``.
    """

    def __init__(self, P, gains, times, linear, weights, m0, P0):
        self.P = P
        self.gains = gains
        self.times = times
        self.linear = linear
        self.weights = weights
        self.m0 = np.atleast_1d(np.asarray(m0, float))
        self.P0 = np.atleast_2d(np.asarray(P0, float))

    def scaled(self, factor: float) -> "LQGController":
        return LQGController(self.P, self.gains * factor, self.times, self.linear, self.weights, self.m0, self.P0)

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self.state = GaussianState(np.tile(self.m0, (n_paths, 1)), self.P0)

    def control(self, k):
        u = -self.state.mean @ self.gains[k].T
        return u[:, 0] if u.shape[1] == 1 else u

    def observe(self, k, u, dy):
        lin = self.linear
        self.state = kalman_step(self.state, lin["a"], lin["b"], lin["c"], lin["sigma"], u, dy, self.grid.dt)

    def predicted_cost(self) -> float:
        """Exact expected cost of the Euler-discretized closed loop.

        Propagates the second moment of ``(x, m)`` through the same update
        equations the simulator and :func:`kalman_step` use.
        """
        A, B, C, G = _mats(**self.linear)
        Qw, Rw, Pw = (np.atleast_2d(np.asarray(self.weights[k], float)) for k in ("q", "r", "p"))
        n = A.shape[0]
        dt = self.times.dt
        I = np.eye(n)
        mean = np.concatenate([self.m0, self.m0])
        S = np.outer(mean, mean)
        S[:n, :n] += self.P0
        Pf = self.P0.copy()
        total = 0.0
        for k in range(self.times.n_steps):
            K = self.gains[k]
            M = np.block([[Qw, np.zeros((n, n))], [np.zeros((n, n)), K.T @ Rw @ K]])
            total += np.trace(M @ S) * dt
            Pp = Pf + (A @ Pf + Pf @ A.T + G @ G.T) * dt
            Kf = Pp @ C.T
            Acl = I + A * dt - B @ K * dt
            F = np.block([[I + A * dt, -B @ K * dt], [Kf @ C * dt, (I - Kf @ C * dt) @ Acl]])
            H = np.block([[G, np.zeros((n, C.shape[0]))], [np.zeros((n, G.shape[1])), Kf]])
            S = F @ S @ F.T + H @ H.T * dt
            Pf = Pp - Kf @ C @ Pp * dt
        return float(total + np.trace(Pw @ S[:n, :n]))

    def riccati_value(self) -> float:
        """Continuous-time formula ``m0'P(0)m0 + tr(P(0)P0) + int tr(P GG') + int tr(Pf K'RK)``."""
        A, B, C, G = _mats(**self.linear)
        Rw = np.atleast_2d(np.asarray(self.weights["r"], float))
        dt = self.times.dt
        Pf = self.P0.copy()
        val = float(self.m0 @ self.P[0] @ self.m0 + np.trace(self.P[0] @ self.P0))
        for k in range(self.times.n_steps):
            K = self.gains[k]
            val += (np.trace(self.P[k] @ G @ G.T) + np.trace(Pf @ K.T @ Rw @ K)) * dt
            Pf = Pf + (A @ Pf + Pf @ A.T + G @ G.T - Pf @ C.T @ C @ Pf) * dt
        return val


def lqg_synthesize(linear: dict, weights: dict, times: TimeGrid, m0=0.0, P0=0.0) -> LQGController:
    """Backward Riccati ``-dP/dt = A'P + PA - P B R^-1 B' P + Q``, ``P(T) = p``."""
    A, B, C, G = _mats(**linear)
    n = A.shape[0]
    Qw = np.atleast_2d(np.asarray(weights["q"], float))
    Rw = np.atleast_2d(np.asarray(weights["r"], float))
    Pw = np.atleast_2d(np.asarray(weights["p"], float))
    if np.any(np.linalg.eigvalsh(Rw) <= 0):
        raise ValueError("control weight r must be positive definite")
    if np.any(np.linalg.eigvalsh(Qw) < 0) or np.any(np.linalg.eigvalsh(Pw) < 0):
        raise ValueError("state weights q, p must be positive semidefinite")
    dt, N = times.dt, times.n_steps
    Rinv = np.linalg.inv(Rw)
    P = np.empty((N + 1, n, n))
    P[N] = Pw
    for k in range(N, 0, -1):
        Pk = P[k]
        rhs = A.T @ Pk + Pk @ A - Pk @ B @ Rinv @ B.T @ Pk + Qw
        P[k - 1] = Pk + rhs * dt
        P[k - 1] = 0.5 * (P[k - 1] + P[k - 1].T)
        if not np.all(np.isfinite(P[k - 1])) or np.abs(P[k - 1]).max() > 1e8:
            raise NumericalError(f"Riccati solution blew up at t={(k - 1) * dt:.6g}", step=k - 1)
    gains = np.einsum("ij,tkj,tkl->til", Rinv, B[None].repeat(N + 1, 0), P)
    return LQGController(P, gains, times, dict(linear), dict(weights), m0, np.atleast_2d(P0))


def filter_riccati(linear: dict, P0, times: TimeGrid) -> np.ndarray:
    """Forward Kalman covariance ``dP/dt = AP + PA' + GG' - PC'CP`` on the grid."""
    A, B, C, G = _mats(**linear)
    P = np.empty((times.n_steps + 1,) + A.shape)
    P[0] = np.atleast_2d(P0)
    for k in range(times.n_steps):
        Pk = P[k]
        P[k + 1] = Pk + (A @ Pk + Pk @ A.T + G @ G.T - Pk @ C.T @ C @ Pk) * times.dt
    return P


# -- separation controllers --------------------------------------------------


class KalmanThresholdController(Controller):
    """``below`` while the Kalman mean is under ``threshold``, ``above`` otherwise."""

    def __init__(self, linear: dict, m0=0.0, P0=0.0, threshold=0.0, below=1.0, above=-1.0):
        self.linear = linear
        self.m0 = np.atleast_1d(np.asarray(m0, float))
        self.P0 = np.atleast_2d(np.asarray(P0, float))
        self.threshold, self.below, self.above = threshold, below, above

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self.state = GaussianState(np.tile(self.m0, (n_paths, 1)), self.P0)

    def control(self, k):
        return np.where(self.state.mean[:, 0] < self.threshold, self.below, self.above)

    def observe(self, k, u, dy):
        lin = self.linear
        self.state = kalman_step(self.state, lin["a"], lin["b"], lin["c"], lin["sigma"], u, dy, self.grid.dt)


class PolicyController(Controller):
    """Grid filter feeding a tabulated policy (nearest lattice point)."""

    def __init__(self, policy: PolicyTable, chain: MarkovChainModel, pi0):
        self.policy, self.chain = policy, chain
        self.pi0 = np.asarray(pi0, float)

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self.w = np.tile(self.pi0, (n_paths, 1))

    def control(self, k):
        return np.asarray(self.policy.control_set)[self.policy.index(self.w, k)]

    def observe(self, k, u, dy):
        self.w = filter_step(self.w, self.chain, u, np.asarray(dy).reshape(-1), self.grid.dt)


class RSPolicyController(PolicyController):
    """Risk-sensitive state feeding a risk-sensitive policy table."""

    def __init__(self, policy: PolicyTable, chain: MarkovChainModel, pi0, cost: CostSpec):
        super().__init__(policy, chain, pi0)
        self.cost = cost

    def control(self, k):
        w = self.w / self.w.sum(axis=1, keepdims=True)
        return np.asarray(self.policy.control_set)[self.policy.index(w, k)]

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self.ls = np.zeros(n_paths)

    def observe(self, k, u, dy):
        self.w, self.ls = rs_filter_step(self.w, self.chain, u, np.asarray(dy).reshape(-1), self.grid.dt, self.cost, self.ls)


def run_closed_loop(model: ClassicalModel, cost: CostSpec, controller, n_paths: int, seed: int,
                    times: TimeGrid, mode: str = "risk-neutral") -> Estimate:
    """Simulate the true system under ``controller`` and report the realized cost."""
    from .classical.model import evaluate_cost_mc, evaluate_rs_cost_mc

    if mode == "risk-neutral":
        return evaluate_cost_mc(model, cost, controller, n_paths, seed, times)
    if mode == "risk-sensitive":
        return evaluate_rs_cost_mc(model, cost, controller, n_paths, seed, times)
    raise ValueError(f"unknown mode {mode!r}")
