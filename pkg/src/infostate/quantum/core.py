"""Finite-dimensional operators, the controlled Lindblad generator and
master-equation evolution.

Operators are plain complex ``numpy`` arrays. Functions acting on states
accept a single ``(n, n)`` matrix or a batch ``(..., n, n)``. For qubits the
basis is ordered ``(|e>, |g>)`` so that ``sigma_z = diag(1, -1)`` measures
excitation and ``sigma_minus = |g><e|``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .. import diagnostics
from ..stochastic import NumericalError, TimeGrid

__all__ = [
    "pauli_x",
    "pauli_y",
    "pauli_z",
    "sigma_minus",
    "annihilator",
    "identity",
    "excited",
    "ground",
    "parse_op",
    "dag",
    "QuantumModel",
    "DensityState",
    "decay_qubit",
    "lindblad_apply",
    "lindblad_adjoint_apply",
    "repair",
    "master_evolve",
    "bloch_vector",
    "from_bloch",
    "trace_norm",
    "apply_superop",
]

MAX_DIM = 64
HERM_TOL = 1e-12
REPAIR_FLOOR = 1e-8  # eigenvalues above -REPAIR_FLOOR are clipped silently
MAX_REPAIR = 0.25  # relative to the trace; anything more negative aborts


def pauli_x():
    return np.array([[0, 1], [1, 0]], dtype=complex)


def pauli_y():
    return np.array([[0, -1j], [1j, 0]], dtype=complex)


def pauli_z():
    return np.array([[1, 0], [0, -1]], dtype=complex)


def sigma_minus():
    return np.array([[0, 0], [1, 0]], dtype=complex)


def annihilator(n: int):
    return np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)


def identity(n: int):
    return np.eye(n, dtype=complex)


def excited():
    return np.array([[1, 0], [0, 0]], dtype=complex)


def ground():
    return np.array([[0, 0], [0, 1]], dtype=complex)


_NAMED = {
    "pauli_x": pauli_x,
    "pauli_y": pauli_y,
    "pauli_z": pauli_z,
    "sigma_minus": sigma_minus,
    "excited": excited,
    "ground": ground,
}


def parse_op(spec, dim: Optional[int] = None) -> np.ndarray:
    """Operator from a config literal.

    Accepts a built-in name (``"pauli_x"``, ``"annihilator(3)"``, ...), a
    nested list of ``[re, im]`` pairs, or a nested list of real numbers.
    """
    if isinstance(spec, str):
        name = spec.strip()
        if "(" in name:
            head, arg = name.split("(", 1)
            n = int(arg.rstrip(")"))
            fn = {"annihilator": annihilator, "identity": identity}.get(head.strip())
            if fn is None:
                raise ValueError(f"unknown operator {spec!r}")
            op = fn(n)
        elif name in _NAMED:
            op = _NAMED[name]()
        elif name == "identity" and dim is not None:
            op = identity(dim)
        else:
            raise ValueError(f"unknown operator {spec!r}")
    else:
        arr = np.asarray(spec, dtype=float)
        if arr.ndim == 3 and arr.shape[-1] == 2:
            op = arr[..., 0] + 1j * arr[..., 1]
        elif arr.ndim == 2:
            op = arr.astype(complex)
        else:
            raise ValueError("operator literal must be n x n reals or n x n [re, im] pairs")
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ValueError("operator must be square")
    if not np.all(np.isfinite(op)):
        raise ValueError("operator has non-finite entries")
    if dim is not None and op.shape[0] != dim:
        raise ValueError(f"operator dimension {op.shape[0]} does not match {dim}")
    return op


def dag(X):
    return np.conj(np.swapaxes(X, -1, -2))


def _check_hermitian(X, tol, what):
    if np.max(np.abs(X - dag(X)), initial=0.0) > tol * max(1.0, np.abs(X).max(initial=0.0)):
        raise ValueError(f"{what} is not Hermitian")


@dataclass(frozen=True)
class QuantumModel:
    """Open system with Hamiltonian ``H(u)`` per control value and one coupling ``L``."""

    H: tuple
    L: np.ndarray
    control_set: tuple
    name: str = "custom"

    def __post_init__(self):
        L = np.asarray(self.L, complex)
        n = L.shape[0]
        if L.shape != (n, n):
            raise ValueError("coupling operator must be square")
        if n > MAX_DIM:
            raise ValueError(f"dimension {n} exceeds the dense guardrail {MAX_DIM}")
        H = tuple(np.asarray(h, complex) for h in self.H)
        if len(H) != len(self.control_set):
            raise ValueError("one Hamiltonian per control value is required")
        for h in H:
            if h.shape != (n, n):
                raise ValueError("Hamiltonian dimension does not match the coupling operator")
            _check_hermitian(h, HERM_TOL, "H(u)")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "control_set", tuple(float(u) for u in self.control_set))

    @classmethod
    def from_function(cls, H: Callable, L, control_set: Sequence[float], name="custom"):
        return cls(tuple(H(u) for u in control_set), L, tuple(control_set), name)

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def control_index(self, u) -> np.ndarray:
        u = np.asarray(u, float)
        cs = np.asarray(self.control_set)
        d = np.abs(u[..., None] - cs)
        idx = np.argmin(d, axis=-1)
        if np.any(np.take_along_axis(d, idx[..., None], -1) > 1e-12 * np.maximum(1.0, np.abs(u[..., None]))):
            raise ValueError(f"control value outside control_set {self.control_set}")
        return idx

    @cached_property
    def superops(self) -> dict:
        """Row-vector superoperators acting on row-major ``vec(rho)``.

        ``gen[k]`` maps ``vec(rho)`` to ``vec(L'(rho))`` for control ``k`` via
        ``v @ gen[k]``; ``meas`` gives ``vec(L rho + rho L*)``; ``vec(rho) @ obs``
        equals ``tr((L + L*) rho)``.
        """
        n = self.dim
        I = np.eye(n)
        L = self.L
        Ld = dag(L)
        LdL = Ld @ L
        base = np.kron(L, L.conj()) - 0.5 * (np.kron(LdL, I) + np.kron(I, LdL.T))
        gen = np.stack([(base - 1j * (np.kron(H, I) - np.kron(I, H.T))).T for H in self.H])
        meas = (np.kron(L, I) + np.kron(I, L.conj())).T
        return dict(gen=gen, meas=meas, obs=(L + Ld).T.reshape(-1))

    def hamiltonian(self, u) -> np.ndarray:
        """``H(u)``; an array of controls gives a stack of matrices."""
        idx = self.control_index(u)
        return np.stack(self.H)[idx]


@dataclass(frozen=True)
class DensityState:
    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError("density matrix must be square")
        _check_hermitian(rho, 1e-9, "density matrix")
        if abs(np.trace(rho).real - 1.0) > 1e-9:
            raise ValueError(f"density matrix has trace {np.trace(rho).real!r}")
        if np.linalg.eigvalsh(rho).min() < -REPAIR_FLOOR:
            raise ValueError("density matrix is not positive semidefinite")
        object.__setattr__(self, "rho", rho)

    def expect(self, X) -> float:
        return float(np.trace(self.rho @ X).real)


def decay_qubit(gamma: float = 1.0, control_set=(0.0,), drive: float = 0.5) -> QuantumModel:
    """Two-level emitter, ``L = sqrt(gamma) sigma_-``, ``H(u) = drive * u * sigma_x``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return QuantumModel.from_function(
        lambda u: drive * u * pauli_x(), np.sqrt(gamma) * sigma_minus(), control_set, name="decay-qubit"
    )


def _dims(model: QuantumModel, X):
    if X.shape[-2:] != (model.dim, model.dim):
        raise ValueError(f"operator of shape {X.shape[-2:]} does not match model dimension {model.dim}")


def apply_superop(v: np.ndarray, ops: np.ndarray, idx) -> np.ndarray:
    """``v[p] @ ops[idx[p]]`` for a batch of row vectors, grouped by index."""
    idx = np.asarray(idx)
    if idx.ndim == 0:
        return v @ ops[int(idx)]
    k0 = int(idx[0])
    if np.all(idx == k0):
        return v @ ops[k0]
    out = np.empty(v.shape, complex)
    for k in np.unique(idx):
        rows = idx == k
        out[rows] = v[rows] @ ops[k]
    return out


def lindblad_apply(model: QuantumModel, u, X) -> np.ndarray:
    """Heisenberg generator ``-i[X, H] + 1/2 L*[X, L] + 1/2 [L*, X] L``."""
    X = np.asarray(X, complex)
    _dims(model, X)
    H = model.hamiltonian(u)
    L = model.L
    Ld = dag(L)
    return -1j * (X @ H - H @ X) + 0.5 * Ld @ (X @ L - L @ X) + 0.5 * (Ld @ X - X @ Ld) @ L


def _adjoint(H, L, rho):
    Ld = dag(L)
    LdL = Ld @ L
    return -1j * (H @ rho - rho @ H) + L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)


def lindblad_adjoint_apply(model: QuantumModel, u, rho) -> np.ndarray:
    """Schrodinger generator ``-i[H, rho] + L rho L* - 1/2 {L*L, rho}``."""
    rho = rho.rho if isinstance(rho, DensityState) else np.asarray(rho, complex)
    _dims(model, rho)
    H = model.hamiltonian(u)
    if rho.ndim == 3 and H.ndim == 2:
        H = H[None]
    return _adjoint(H, model.L, rho)


def _min_eig(rho):
    if rho.shape[-1] == 2:
        a, d = rho[..., 0, 0].real, rho[..., 1, 1].real
        return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(rho[..., 1, 0]) ** 2)
    return np.linalg.eigvalsh(rho)[..., 0]


def repair(rho, max_repair: float = MAX_REPAIR, step: Optional[int] = None):
    """Hermitize, clip negative eigenvalues and renormalize the trace.

    Works on a batch. Eigenvalues below ``-max_repair`` times the trace raise
    :class:`NumericalError`; milder clipping is counted under
    ``"density_repairs"`` in :mod:`infostate.diagnostics`, and the largest
    relative clipped magnitude as ``"density_repair_max"``.
    """
    rho = 0.5 * (rho + dag(rho))
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    lo = _min_eig(rho)
    bad = lo < 0
    if np.any(bad):
        worst = float(np.max(-lo / np.maximum(np.abs(tr), 1e-300)))
        if worst > max_repair:
            raise NumericalError(
                f"density matrix eigenvalue {lo.min():.3g} beyond repair tolerance at step {step}", step=step
            )
        diagnostics.count("density_repairs", int(np.sum(lo < -REPAIR_FLOOR)))
        diagnostics.record_max("density_repair_max", worst)
        if rho.ndim == 2:
            w, v = np.linalg.eigh(rho)
            rho = (v * np.clip(w, 0.0, None)) @ dag(v)
        else:
            w, v = np.linalg.eigh(rho[bad])
            rho = rho.copy()
            rho[bad] = (v * np.clip(w, 0.0, None)[..., None, :]) @ dag(v)
        tr = np.trace(rho, axis1=-2, axis2=-1).real
    if np.any(tr <= 0):
        raise NumericalError(f"density matrix trace vanished at step {step}", step=step)
    return rho / tr[..., None, None]


def master_evolve(model: QuantumModel, u_schedule, rho0, times: TimeGrid) -> np.ndarray:
    """Explicit Euler for the unconditional state; returns ``(n_steps+1, n, n)``."""
    u_schedule = np.broadcast_to(np.asarray(u_schedule, float), (times.n_steps,))
    rho = rho0.rho if isinstance(rho0, DensityState) else np.asarray(rho0, complex)
    _dims(model, rho)
    out = np.empty((times.n_steps + 1,) + rho.shape, complex)
    out[0] = rho
    idx = model.control_index(u_schedule)
    for k in range(times.n_steps):
        rho = rho + _adjoint(model.H[idx[k]], model.L, rho) * times.dt
        rho = repair(rho, step=k + 1)
        out[k + 1] = rho
    return out


def bloch_vector(rho) -> np.ndarray:
    """``(<sigma_x>, <sigma_y>, <sigma_z>)`` for qubit states, batched."""
    rho = np.asarray(rho)
    x = 2 * rho[..., 1, 0].real
    y = 2 * rho[..., 1, 0].imag
    z = (rho[..., 0, 0] - rho[..., 1, 1]).real
    return np.stack([x, y, z], axis=-1)


def from_bloch(r) -> np.ndarray:
    """Density matrices ``(I + r . sigma) / 2`` for Bloch vectors ``r`` of shape ``(..., 3)``."""
    r = np.asarray(r, float)
    out = np.empty(r.shape[:-1] + (2, 2), complex)
    out[..., 0, 0] = 0.5 * (1 + r[..., 2])
    out[..., 1, 1] = 0.5 * (1 - r[..., 2])
    out[..., 0, 1] = 0.5 * (r[..., 0] - 1j * r[..., 1])
    out[..., 1, 0] = 0.5 * (r[..., 0] + 1j * r[..., 1])
    return out


def trace_norm(A) -> float:
    """Sum of singular values (nuclear norm)."""
    return float(np.linalg.svd(np.asarray(A), compute_uv=False).sum())
