"""Controlled diffusions, their Markov chain approximations and cost objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..stochastic import (
    Estimate,
    TimeGrid,
    Trajectory,
    as_controller,
    chunks,
    euler_maruyama,
    path_rng,
    summarize,
    wiener_batch,
)

__all__ = [
    "ClassicalModel",
    "CostSpec",
    "MarkovChainModel",
    "discretize_generator",
    "aggregate_chain",
    "simulate",
    "path_costs",
    "evaluate_cost_mc",
    "evaluate_rs_cost_mc",
    "lqg_1d",
    "bench_bimodal",
]


@dataclass(frozen=True)
class ClassicalModel:
    """``dx = f(x,u) dt + g(x) dw``, ``dy = h(x) dt + dv``.

    The initial state is Gaussian with mean ``x0_mean`` and standard deviation
    ``x0_std`` (zero for a deterministic start). ``linear`` optionally holds
    the ``(a, b, c, sigma)`` matrices of a linear-Gaussian model, which enables
    the Kalman and LQG routines.
    """

    f: Callable
    g: Callable
    h: Callable
    control_set: tuple
    state_dim: int = 1
    obs_dim: int = 1
    x0_mean: float | np.ndarray = 0.0
    x0_std: float | np.ndarray = 0.0
    linear: Optional[dict] = None
    name: str = "custom"

    def __post_init__(self):
        if len(self.control_set) == 0:
            raise ValueError("control_set must be nonempty")
        object.__setattr__(self, "control_set", tuple(float(u) for u in self.control_set))

    @property
    def noise_dim(self) -> int:
        gx = np.asarray(self.g(np.zeros((1, self.state_dim))), float)
        return gx.shape[1] if gx.ndim == 2 else gx.shape[2]

    def check_diffusion(self, points) -> None:
        """Spot-check that ``g`` has full column rank at the given states."""
        x = np.asarray(points, float).reshape(-1, self.state_dim)
        gx = np.asarray(self.g(x), float)
        if gx.ndim == 2:
            bad = np.flatnonzero(np.any(gx == 0, axis=1))
        else:
            ranks = np.linalg.matrix_rank(gx)
            bad = np.flatnonzero(ranks < gx.shape[2])
        if bad.size:
            raise ValueError(f"diffusion is rank deficient at x={x[bad[0]]}")

    def sample_x0(self, seed: int, indices) -> np.ndarray:
        mean = np.broadcast_to(np.asarray(self.x0_mean, float), (self.state_dim,))
        std = np.broadcast_to(np.asarray(self.x0_std, float), (self.state_dim,))
        out = np.empty((len(indices), self.state_dim))
        for j, i in enumerate(indices):
            out[j] = mean + std * path_rng(seed, i, stream=1).standard_normal(self.state_dim)
        return out


@dataclass(frozen=True)
class CostSpec:
    L: Callable
    Phi: Callable
    mu: Optional[float] = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.mu is not None and not self.mu > 0:
            raise ValueError("risk parameter mu must be strictly positive")

    def running(self, x, u) -> np.ndarray:
        x = np.asarray(x, float)
        u = np.broadcast_to(np.asarray(u, float).reshape(-1, 1), (x.shape[0], 1))
        return np.asarray(self.L(x, u), float).reshape(x.shape[0])

    def terminal(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.asarray(self.Phi(x), float).reshape(x.shape[0])

    def scaled(self, c: float) -> "CostSpec":
        return CostSpec(lambda x, u: c * self.L(x, u), lambda x: c * self.Phi(x), self.mu)

    def with_mu(self, mu) -> "CostSpec":
        return CostSpec(self.L, self.Phi, mu, self.params)

    def check(self, points, controls) -> None:
        x = np.asarray(points, float).reshape(len(points), -1)
        for u in controls:
            if np.any(self.running(x, u) < 0):
                raise ValueError(f"running cost negative for u={u}")
        if np.any(self.terminal(x) < 0):
            raise ValueError("terminal cost negative")


@dataclass(frozen=True)
class MarkovChainModel:
    """Finite-state approximation: generator ``Q[k]`` for ``control_set[k]``."""

    grid: np.ndarray
    Q: tuple
    h_vals: np.ndarray
    control_set: tuple

    def __post_init__(self):
        grid = np.asarray(self.grid, float)
        if grid.size == 0:
            raise ValueError("empty grid")
        if len(self.Q) != len(self.control_set):
            raise ValueError("one generator per control value is required")
        Q = tuple(np.asarray(q, float) for q in self.Q)
        for q in Q:
            if q.shape != (grid.shape[0], grid.shape[0]):
                raise ValueError("generator shape does not match grid")
            off = q - np.diag(np.diag(q))
            if np.any(off < 0):
                raise ValueError("generator has negative off-diagonal rates")
            if np.max(np.abs(q.sum(axis=1)), initial=0.0) > 1e-9 * max(1.0, np.abs(q).max(initial=0.0)):
                raise ValueError("generator rows must sum to zero")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "h_vals", np.asarray(self.h_vals, float).reshape(grid.shape[0]))
        object.__setattr__(self, "control_set", tuple(float(u) for u in self.control_set))

    @property
    def n(self) -> int:
        return self.grid.shape[0]

    @cached_property
    def _Q_sparse(self):
        return tuple(sp.csr_matrix(q) for q in self.Q)

    @cached_property
    def _bands(self):
        """``(diag, up, down)`` stacked over controls when every Q is tridiagonal."""
        if self.n < 3 or any(not np.array_equal(q, np.triu(np.tril(q, 1), -1)) for q in self.Q):
            return None
        d = np.stack([np.diag(q) for q in self.Q])
        up = np.stack([np.diag(q, 1) for q in self.Q])
        down = np.stack([np.diag(q, -1) for q in self.Q])
        return d, up, down

    def control_index(self, u) -> np.ndarray:
        """Index into ``control_set`` for each control value (exact match up to 1e-12)."""
        u = np.asarray(u, float)
        cs = np.asarray(self.control_set)
        d = np.abs(u[..., None] - cs)
        idx = np.argmin(d, axis=-1)
        if np.any(np.take_along_axis(d, idx[..., None], -1) > 1e-12 * np.maximum(1.0, np.abs(u[..., None]))):
            raise ValueError(f"control value outside control_set {self.control_set}")
        return idx

    def propagate(self, weights: np.ndarray, u_idx, dt: float) -> np.ndarray:
        """``w + (Q(u)^T w) dt`` for a single vector or a batch of row vectors."""
        w = np.asarray(weights, float)
        if w.ndim == 1:
            return w + (self._Q_sparse[int(u_idx)].T @ w) * dt
        u_idx = np.broadcast_to(np.asarray(u_idx), w.shape[:1])
        bands = self._bands
        if bands is not None:
            d, up, down = bands
            k0 = int(u_idx[0])
            if np.all(u_idx == k0):
                d, up, down = d[k0], up[k0], down[k0]
            else:
                d, up, down = d[u_idx], up[u_idx], down[u_idx]
            flow = w * d
            flow[..., 1:] += w[..., :-1] * up
            flow[..., :-1] += w[..., 1:] * down
            flow *= dt
            flow += w
            return flow
        out = w.copy()
        for k in np.unique(u_idx):
            rows = u_idx == k
            out[rows] += (self._Q_sparse[int(k)].T @ w[rows].T).T * dt
        return out

    def gaussian_weights(self, mean: float, std: float) -> np.ndarray:
        """Initial law on the grid: normalized Gaussian density, or the two
        nodes bracketing ``mean`` when ``std`` is zero."""
        x = self.grid
        if std > 0:
            w = np.exp(-0.5 * ((x - mean) / std) ** 2)
        else:
            w = np.zeros(self.n)
            j = int(np.clip(np.searchsorted(x, mean) - 1, 0, self.n - 2))
            t = float(np.clip((mean - x[j]) / (x[j + 1] - x[j]), 0.0, 1.0))
            w[j], w[j + 1] = 1 - t, t
        return w / w.sum()


def discretize_generator(model: ClassicalModel, grid, scheme: str = "hybrid") -> MarkovChainModel:
    """Finite-difference Markov chain for a scalar controlled diffusion.

    ``scheme="upwind"``: rate to the right ``g^2/(2dx^2) + f+/dx``, to the left
    ``g^2/(2dx^2) + f-/dx``. ``scheme="hybrid"`` (default) uses central
    differences ``g^2/(2dx^2) +- f/(2dx)`` at nodes where ``g^2 >= |f| dx``
    keeps both rates nonnegative, and the upwind rates elsewhere; this avoids
    the ``|f| dx / 2`` artificial diffusion of the pure upwind chain. End
    nodes reflect (the jump off the grid is dropped).
    """
    if scheme not in ("upwind", "hybrid"):
        raise ValueError(f"unknown scheme {scheme!r}")
    x = np.asarray(grid, float).ravel()
    if model.state_dim != 1:
        raise ValueError("chain approximation needs a scalar state")
    if x.size < 3:
        raise ValueError("grid needs at least 3 nodes")
    dx = np.diff(x)
    if np.any(dx <= 0) or not np.allclose(dx, dx[0], rtol=1e-9, atol=0):
        raise ValueError("grid must be uniform with positive spacing")
    dx = float(dx[0])
    n = x.size
    xs = x[:, None]
    gx = np.asarray(model.g(xs), float).reshape(n)
    Qs = []
    for u in model.control_set:
        fx = np.asarray(model.f(xs, np.full((n, 1), u)), float).reshape(n)
        diff = gx**2 / (2 * dx**2)
        right = diff + np.maximum(fx, 0.0) / dx
        left = diff + np.maximum(-fx, 0.0) / dx
        if scheme == "hybrid":
            central = gx**2 >= np.abs(fx) * dx
            right = np.where(central, diff + fx / (2 * dx), right)
            left = np.where(central, diff - fx / (2 * dx), left)
        right[-1] = 0.0
        left[0] = 0.0
        Q = np.diag(right[:-1], 1) + np.diag(left[1:], -1)
        Q[np.diag_indices(n)] = -(right + left)
        Qs.append(Q)
    h_vals = np.asarray(model.h(xs), float).reshape(n)
    return MarkovChainModel(x, tuple(Qs), h_vals, model.control_set)


def _stationary(Q: np.ndarray) -> np.ndarray:
    n = Q.shape[0]
    if np.array_equal(Q, np.triu(np.tril(Q, 1), -1)):
        # birth-death chain: detailed balance in log space avoids underflow
        up, down = np.diag(Q, 1), np.diag(Q, -1)
        with np.errstate(divide="ignore"):
            steps = np.log(up) - np.log(down)
        logp = np.concatenate([[0.0], np.cumsum(steps)])
        if np.all(np.isfinite(logp)):
            p = np.exp(logp - logp.max())
            return p / p.sum()
    A = np.vstack([Q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    p = np.linalg.lstsq(A, b, rcond=None)[0]
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _blocks(chain: MarkovChainModel, labels, reference_control):
    labels = np.asarray(labels)
    blocks = [np.flatnonzero(labels == lab) for lab in np.unique(labels)]
    ref = 0 if reference_control is None else chain.control_set.index(float(reference_control))
    p_ref = _stationary(chain.Q[ref])
    reps = np.array([p_ref[A] @ chain.grid[A] / p_ref[A].sum() for A in blocks])
    order = np.argsort(reps)
    return [blocks[i] for i in order], p_ref


def aggregate_chain(chain: MarkovChainModel, labels, reference_control: Optional[float] = None,
                    lag: float = 1.0) -> MarkovChainModel:
    """Lump a fine chain into macro-states (Markov state model construction).

    For each control the fine chain is run for ``lag`` time units from its
    block-conditional stationary law; the block-to-block transition matrix
    ``P(lag)`` is then mapped back to a generator by ``logm(P) / lag``. A lag
    longer than the within-block relaxation time captures genuine hopping
    rates instead of barrier recrossings. Representative states and
    observation values are block averages under the stationary law of
    ``reference_control`` (default: first control).
    """
    if lag <= 0:
        raise ValueError("lag must be positive")
    blocks, p_ref = _blocks(chain, labels, reference_control)
    m = len(blocks)
    onehot = np.zeros((chain.n, m))
    for a, A in enumerate(blocks):
        onehot[A, a] = 1.0
    Qs = []
    for Q in chain.Q:
        p = _stationary(Q)
        T = sla.expm(Q * lag)
        P = np.empty((m, m))
        for a, A in enumerate(blocks):
            pa = p[A]
            pa = pa / pa.sum() if pa.sum() > 1e-300 else np.full(A.size, 1.0 / A.size)
            P[a] = pa @ T[A] @ onehot
        R = np.real(sla.logm(P)) / lag
        off = R - np.diag(np.diag(R))
        off = np.clip(off, 0.0, None)
        Qs.append(off - np.diag(off.sum(axis=1)))
    reps = np.array([p_ref[A] @ chain.grid[A] / p_ref[A].sum() for A in blocks])
    hs = np.array([p_ref[A] @ chain.h_vals[A] / p_ref[A].sum() for A in blocks])
    return MarkovChainModel(reps, tuple(Qs), hs, chain.control_set)


def aggregate_cost(chain: MarkovChainModel, labels, cost: CostSpec,
                   reference_control: Optional[float] = None) -> CostSpec:
    """Block-averaged costs for the chain returned by :func:`aggregate_chain`.

    ``L(block, u)`` averages the running cost over the block under the
    stationary law of control ``u``; the terminal cost uses the reference
    control's law. The result is evaluated at the lumped representative
    states, so it is only meaningful together with that lumped chain.
    """
    blocks, p_ref = _blocks(chain, labels, reference_control)
    x = chain.grid[:, None]
    reps = np.array([p_ref[A] @ chain.grid[A] / p_ref[A].sum() for A in blocks])
    Ltab = np.empty((len(chain.control_set), len(blocks)))
    for k, (u, Q) in enumerate(zip(chain.control_set, chain.Q)):
        p = _stationary(Q)
        Lx = cost.running(x, np.full(chain.n, u))
        for a, A in enumerate(blocks):
            w = p[A] / p[A].sum() if p[A].sum() > 1e-300 else np.full(A.size, 1.0 / A.size)
            Ltab[k, a] = w @ Lx[A]
    Px = cost.terminal(x)
    Phitab = np.array([p_ref[A] @ Px[A] / p_ref[A].sum() for A in blocks])
    controls = np.asarray(chain.control_set)

    def node(x):
        return np.argmin(np.abs(np.asarray(x)[:, :1] - reps[None, :]), axis=1)

    def L(x, u):
        k = np.argmin(np.abs(np.asarray(u).reshape(-1, 1) - controls[None, :]), axis=1)
        return Ltab[k, node(x)]

    return CostSpec(L, lambda x: Phitab[node(x)], cost.mu, dict(cost.params))


# -- Monte Carlo objectives --------------------------------------------------


def simulate(model: ClassicalModel, controller, grid: TimeGrid, n_paths: int, seed: int, chunk: int = 2048):
    """Yield ``(indices, Trajectory)`` blocks of independent closed-loop paths."""
    ctrl = as_controller(controller)
    dim = model.noise_dim + model.obs_dim
    for idx in chunks(n_paths, chunk):
        inc = wiener_batch(grid, dim, seed, idx)
        x0 = model.sample_x0(seed, idx)
        traj = euler_maruyama(model.f, model.g, ctrl, inc, x0, observation=model.h, grid=grid)
        yield idx, traj


def path_costs(traj: Trajectory, cost: CostSpec, dt: float) -> np.ndarray:
    """Left-rectangle running cost plus terminal cost for each path."""
    X = traj.states
    n_paths, n1, n = X.shape
    run = cost.running(X[:, :-1].reshape(-1, n), traj.controls.reshape(-1))
    return run.reshape(n_paths, n1 - 1).sum(axis=1) * dt + cost.terminal(X[:, -1])


def evaluate_cost_mc(model, cost, controller, n_paths, seed, grid: TimeGrid) -> Estimate:
    """Estimate ``E[int L dt + Phi(x_T)]`` over independent paths."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    samples = np.concatenate([path_costs(tr, cost, grid.dt) for _, tr in simulate(model, controller, grid, n_paths, seed)])
    return summarize(samples)


def evaluate_rs_cost_mc(model, cost, controller, n_paths, seed, grid: TimeGrid) -> Estimate:
    """Estimate ``E[exp(mu (int L dt + Phi(x_T)))]``."""
    if cost.mu is None:
        raise ValueError("risk-sensitive evaluation needs cost.mu > 0")
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    total = np.concatenate([path_costs(tr, cost, grid.dt) for _, tr in simulate(model, controller, grid, n_paths, seed)])
    return summarize(np.exp(cost.mu * total), warn_heavy_tail=True)


# -- built-in models ---------------------------------------------------------


def lqg_1d(a=-1.0, b=1.0, c=1.0, sigma=1.0, q=1.0, r=1.0, p=1.0, x0_mean=0.0, x0_std=0.5,
           controls: Sequence[float] = (-1.0, 0.0, 1.0), mu=None):
    """Scalar linear-Gaussian model with quadratic cost."""
    model = ClassicalModel(
        f=lambda x, u: a * x + b * u,
        g=lambda x: np.full_like(x, sigma),
        h=lambda x: c * x,
        control_set=tuple(controls),
        x0_mean=x0_mean,
        x0_std=x0_std,
        linear=dict(a=a, b=b, c=c, sigma=sigma),
        name="lqg-1d",
    )
    cost = CostSpec(
        L=lambda x, u: q * x[:, 0] ** 2 + r * np.asarray(u).reshape(-1) ** 2,
        Phi=lambda x: p * x[:, 0] ** 2,
        mu=mu,
        params=dict(q=q, r=r, p=p),
    )
    return model, cost


def bench_bimodal(sigma=0.7, target=1.0, r=0.5, p=0.0, x0_mean=-1.0, x0_std=0.1,
                  controls: Sequence[float] = (0.0, 1.0), mu=None):
    """Double-well benchmark ``f = u - x^3 + x``; the cost rewards sitting at ``target``."""
    model = ClassicalModel(
        f=lambda x, u: u - x**3 + x,
        g=lambda x: np.full_like(x, sigma),
        h=lambda x: x,
        control_set=tuple(controls),
        x0_mean=x0_mean,
        x0_std=x0_std,
        name="bench-bimodal",
    )
    cost = CostSpec(
        L=lambda x, u: (x[:, 0] - target) ** 2 + r * np.asarray(u).reshape(-1) ** 2,
        Phi=lambda x: p * (x[:, 0] - target) ** 2,
        mu=mu,
    )
    return model, cost
