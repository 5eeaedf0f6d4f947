"""Time grids, reproducible Wiener increments and Euler-Maruyama integration.

Every simulation in the package draws its noise through :func:`path_rng`,
which derives an independent Philox stream from ``(seed, path_index)``.
Monte Carlo estimates are therefore pure functions of the configuration and
the master seed, independent of how paths are chunked.

Batched arrays put the path axis first: states are ``(n_paths, state_dim)``,
controls ``(n_paths,)`` for scalar controls.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "TimeGrid",
    "WienerPath",
    "Trajectory",
    "Estimate",
    "NumericalError",
    "Controller",
    "ConstantController",
    "RecordController",
    "as_controller",
    "make_time_grid",
    "path_rng",
    "sample_wiener",
    "wiener_batch",
    "euler_maruyama",
    "summarize",
    "chunks",
    "innovation_test",
]

DEFAULT_CHUNK = 2048


class NumericalError(RuntimeError):
    """Integration or filtering failure at a definite step."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float
    n_steps: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def make_time_grid(T: float, dt: float) -> TimeGrid:
    """Uniform grid on ``[0, T]``; ``T/dt`` must be an integer up to rounding."""
    if not (T > 0 and dt > 0):
        raise ValueError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    ratio = T / dt
    n = int(round(ratio))
    # a few ulps of slack: 0.3/0.1 evaluates to 2.9999999999999996
    if n < 1 or abs(ratio - n) > 8 * np.finfo(float).eps * max(1.0, ratio):
        raise ValueError(
            f"horizon T={T} is not an integer multiple of dt={dt} (T/dt={ratio!r})"
        )
    return TimeGrid(float(T), float(dt), n)


def path_rng(seed, index: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for path ``index`` under master ``seed``.

    ``stream`` separates independent draws belonging to the same path
    (0: Wiener increments, 1: initial condition).
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class WienerPath:
    increments: np.ndarray  # (n_steps, dim)
    dim: int
    seed: int
    dt: float
    path_index: int = 0

    @property
    def grid(self) -> TimeGrid:
        n = self.increments.shape[0]
        return TimeGrid(n * self.dt, self.dt, n)


def sample_wiener(grid: TimeGrid, dim: int, seed: int, path_index: int = 0) -> WienerPath:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = path_rng(seed, path_index)
    inc = rng.standard_normal((grid.n_steps, dim)) * math.sqrt(grid.dt)
    return WienerPath(inc, dim, int(seed), grid.dt, int(path_index))


def wiener_batch(grid: TimeGrid, dim: int, seed: int, indices) -> np.ndarray:
    """Increments for several paths, shape ``(len(indices), n_steps, dim)``.

    Row ``j`` equals ``sample_wiener(grid, dim, seed, indices[j]).increments``.
    """
    indices = list(indices)
    out = np.empty((len(indices), grid.n_steps, dim))
    sq = math.sqrt(grid.dt)
    for j, i in enumerate(indices):
        out[j] = path_rng(seed, i).standard_normal((grid.n_steps, dim)) * sq
    return out


def chunks(n: int, size: int = DEFAULT_CHUNK):
    for start in range(0, n, size):
        yield range(start, min(n, start + size))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_steps+1, n) or (n_paths, n_steps+1, n)
    controls: np.ndarray  # (n_steps,) or (n_paths, n_steps)
    observations: np.ndarray  # cumulative y, y(0) = 0

    @property
    def obs_increments(self) -> np.ndarray:
        return np.diff(self.observations, axis=-2)


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo mean with standard error; ``samples`` kept for pairing."""

    mean: float
    stderr: float
    samples: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    exact: bool = False

    @property
    def n(self) -> int:
        return 0 if self.samples is None else len(self.samples)

    def __sub__(self, other: "Estimate") -> "Estimate":
        """Paired difference on common random numbers."""
        return summarize(self.samples - other.samples)


def summarize(samples, warn_heavy_tail: bool = False) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    if n < 2:
        raise ValueError("need at least two samples")
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n))
    if warn_heavy_tail and mean != 0 and se > 0.5 * abs(mean):
        warnings.warn(
            f"standard error {se:.3g} exceeds half the estimate {mean:.3g}; "
            "the exponential cost is heavy tailed at this risk level",
            RuntimeWarning,
            stacklevel=3,
        )
    return Estimate(mean, se, samples, exact=bool(se == 0.0))


def innovation_test(increments, dt: float, n_se: float = 4.0) -> dict:
    """Check that innovation increments look like ``N(0, dt)``.

    The mean and the variance are compared with ``0`` and ``dt`` using
    z-scores built from the sample second and fourth moments.
    """
    d = np.asarray(increments, float).ravel()
    n = d.size
    if n < 2:
        raise ValueError("need at least two increments")
    mean = float(d.mean())
    z_mean = mean / (d.std(ddof=1) / math.sqrt(n))
    sq = d * d
    var = float(sq.mean())
    z_var = (var - dt) / (sq.std(ddof=1) / math.sqrt(n))
    return dict(
        n=int(n),
        mean=mean,
        variance=var,
        dt=float(dt),
        z_mean=float(z_mean),
        z_var=float(z_var),
        passed=bool(abs(z_mean) <= n_se and abs(z_var) <= n_se),
    )


# -- controllers -------------------------------------------------------------


class Controller:
    """Causal map from an observation record to controls, batched over paths.

    The integrator calls ``reset`` once, then for each step ``k`` calls
    ``control(k)`` followed by ``observe(k, u, dy)`` with the increment over
    ``[t_k, t_{k+1}]``. A control at step ``k`` can therefore depend only on
    increments ``0..k-1``.
    """

    def reset(self, n_paths: int, grid: TimeGrid) -> None:
        self.n_paths = n_paths
        self.grid = grid

    def control(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, k: int, u: np.ndarray, dy: np.ndarray) -> None:
        pass


class ConstantController(Controller):
    def __init__(self, value: float):
        self.value = float(value)

    def control(self, k):
        return np.full(self.n_paths, self.value)


class RecordController(Controller):
    """Wraps ``fn(t, y)`` where ``y`` is the cumulative record up to ``t``.

    ``y`` has shape ``(n_paths, k+1, obs_dim)``. Convenient but slow; meant
    for user-supplied policies, not for the large Monte Carlo runs.
    """

    def __init__(self, fn: Callable):
        self.fn = fn

    def reset(self, n_paths, grid):
        super().reset(n_paths, grid)
        self._y = None

    def control(self, k):
        if self._y is None:
            return np.broadcast_to(
                np.asarray(self.fn(0.0, np.zeros((self.n_paths, 1, 1))), float),
                (self.n_paths,),
            ).copy()
        u = self.fn(k * self.grid.dt, self._y[:, : k + 1])
        return np.broadcast_to(np.asarray(u, float), (self.n_paths,)).copy()

    def observe(self, k, u, dy):
        dy = np.asarray(dy, float).reshape(self.n_paths, -1)
        if self._y is None:
            self._y = np.zeros((self.n_paths, self.grid.n_steps + 1, dy.shape[1]))
        self._y[:, k + 1] = self._y[:, k] + dy


def as_controller(obj) -> Controller:
    if isinstance(obj, Controller):
        return obj
    if obj is None:
        return ConstantController(0.0)
    if callable(obj):
        return RecordController(obj)
    return ConstantController(float(obj))


# -- integration -------------------------------------------------------------


def _apply_diffusion(gx: np.ndarray, dw: np.ndarray, n: int) -> np.ndarray:
    if gx.ndim == 2:  # elementwise noise, one channel per state component
        if gx.shape[1] != dw.shape[1]:
            raise ValueError(
                f"diffusion has {gx.shape[1]} channels but the path supplies {dw.shape[1]}"
            )
        return gx * dw
    return np.einsum("pij,pj->pi", gx, dw)


def _noise_dim(gx: np.ndarray) -> int:
    return gx.shape[1] if gx.ndim == 2 else gx.shape[2]


def euler_maruyama(
    drift: Callable,
    diffusion: Callable,
    controller,
    path,
    x0,
    observation: Optional[Callable] = None,
    grid: Optional[TimeGrid] = None,
) -> Trajectory:
    """Integrate ``dx = f(x,u) dt + g(x) dw``, ``dy = h(x) dt + dv``.

    ``path`` is a :class:`WienerPath` (single trajectory) or an increment
    array ``(n_paths, n_steps, dim)``. The first channels drive the state,
    the remaining ones (if ``observation`` is given) are the observation
    noise ``v``. ``drift(x, u)`` receives ``x`` of shape ``(n_paths, n)`` and
    ``u`` of shape ``(n_paths, 1)``; ``diffusion(x)`` returns either
    ``(n_paths, n)`` (diagonal noise) or ``(n_paths, n, k)``.

    Raises :class:`NumericalError` with the step index on overflow or NaN.
    """
    single = isinstance(path, WienerPath)
    inc = path.increments[None] if single else np.asarray(path, float)
    n_paths, n_steps, dim = inc.shape
    if grid is None:
        if not single:
            raise ValueError("grid is required for batched increments")
        grid = path.grid
    if grid.n_steps != n_steps:
        raise ValueError("increment count does not match the time grid")
    dt = grid.dt

    x0 = np.asarray(x0, float)
    x = np.array(np.broadcast_to(x0, (n_paths, x0.shape[-1] if x0.ndim else 1)))
    n = x.shape[1]
    gx0 = np.asarray(diffusion(x), float)
    k_w = _noise_dim(gx0)
    p = 0
    if observation is not None:
        p = np.asarray(observation(x), float).reshape(n_paths, -1).shape[1]
    if k_w + p != dim:
        raise ValueError(
            f"path has {dim} channels; model needs {k_w} state + {p} observation channels"
        )

    ctrl = as_controller(controller)
    ctrl.reset(n_paths, grid)
    states = np.empty((n_paths, n_steps + 1, n))
    controls = np.empty((n_paths, n_steps))
    ys = np.zeros((n_paths, n_steps + 1, max(p, 1)))
    states[:, 0] = x
    for k in range(n_steps):
        u = np.asarray(ctrl.control(k), float).reshape(n_paths)
        controls[:, k] = u
        uc = u[:, None]
        fx = np.asarray(drift(x, uc), float).reshape(n_paths, n)
        gx = np.asarray(diffusion(x), float)
        dw = inc[:, k, :k_w]
        if observation is not None:
            hx = np.asarray(observation(x), float).reshape(n_paths, p)
            dy = hx * dt + inc[:, k, k_w:]
            ys[:, k + 1] = ys[:, k] + dy
        else:
            dy = np.zeros((n_paths, 1))
        x = x + fx * dt + _apply_diffusion(gx.reshape((n_paths,) + gx.shape[1:]), dw, n)
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise NumericalError(
                f"non-finite state at step {k + 1} (path {bad})", step=k + 1, path=bad
            )
        states[:, k + 1] = x
        ctrl.observe(k, u, dy if p > 1 else dy[:, 0])
    if single:
        return Trajectory(grid.times, states[0], controls[0], ys[0])
    return Trajectory(grid.times, states, controls, ys)
