"""Linear quantum systems in quadrature form, coherent interconnection,
frequency-domain gains and dissipation checks.

Each field port is a pair of real quadratures ``(q, p)`` with
``q = b + b*`` and ``p = -i (b - b*)``; vacuum inputs are white noise of unit
intensity per quadrature. A mode ``a`` has ``a*a = (x^2 + p^2 - 2) / 4``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .stochastic import path_rng

__all__ = [
    "LinearQuantumSystem",
    "QuadraticForm",
    "Wiring",
    "DissipationReport",
    "cavity",
    "interconnect",
    "transfer",
    "hinfty_gain",
    "mode_energy",
    "hinf_supply",
    "bounded_real_storage",
    "check_dissipation",
    "realizability_residuals",
    "phase_shifter",
    "fig5_network",
    "write_system",
    "read_system",
]

J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _theta(n_pairs: int) -> np.ndarray:
    return np.kron(np.eye(n_pairs), J2)


@dataclass(frozen=True)
class LinearQuantumSystem:
    """``dx = A x dt + B dw``, ``dy = C x dt + D dw`` with labelled two-quadrature ports."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    inputs: tuple
    outputs: tuple
    name: str = ""

    def __post_init__(self):
        A = np.asarray(self.A, float)
        A = A.reshape(0, 0) if A.size == 0 else np.atleast_2d(A)
        n = A.shape[0]
        ni, no = 2 * len(self.inputs), 2 * len(self.outputs)
        try:
            B = np.asarray(self.B, float).reshape(n, ni)
            C = np.asarray(self.C, float).reshape(no, n)
            D = np.asarray(self.D, float).reshape(no, ni)
        except ValueError:
            raise ValueError("matrix shapes do not match the state dimension and port lists") from None
        if A.shape != (n, n) or n % 2:
            raise ValueError("A must be square with an even number of quadratures")
        labels = tuple(self.inputs) + tuple(self.outputs)
        if len(set(labels)) != len(labels):
            raise ValueError(f"port labels must be unique, got {labels}")
        for k, v in dict(A=A, B=B, C=C, D=D).items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{k} has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def in_cols(self, port: str) -> slice:
        i = self.inputs.index(port)
        return slice(2 * i, 2 * i + 2)

    def out_rows(self, port: str) -> slice:
        i = self.outputs.index(port)
        return slice(2 * i, 2 * i + 2)

    def is_stable(self) -> bool:
        return self.n_states == 0 or bool(np.max(np.linalg.eigvals(self.A).real) < 0)


@dataclass(frozen=True)
class QuadraticForm:
    """``v^T M v + offset``."""

    M: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, float))
        if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T), initial=0.0) > 1e-12 * max(1.0, np.abs(M).max()):
            raise ValueError("quadratic form matrix must be square and symmetric")
        object.__setattr__(self, "M", 0.5 * (M + M.T))

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, float)
        return np.einsum("...i,ij,...j->...", v, self.M, v) + self.offset

    def is_psd(self, tol: float = 1e-10) -> bool:
        return bool(np.linalg.eigvalsh(self.M).min() >= -tol)


@dataclass(frozen=True)
class Wiring:
    """``(output port, input port)`` connections between two systems."""

    connections: tuple = ()

    def __post_init__(self):
        conns = tuple((str(a), str(b)) for a, b in self.connections)
        outs = [a for a, _ in conns]
        ins = [b for _, b in conns]
        if len(set(outs)) != len(outs) or len(set(ins)) != len(ins):
            raise ValueError("each port may appear in at most one connection")
        object.__setattr__(self, "connections", conns)


def cavity(kappas: Sequence[float], detuning: float = 0.0, inputs: Optional[Sequence[str]] = None,
           outputs: Optional[Sequence[str]] = None, name: str = "cavity") -> LinearQuantumSystem:
    """Single-mode cavity with one mirror per coupling rate.

    ``A = -(sum kappa / 2) I + detuning J``, ``B_i = -sqrt(kappa_i) I``,
    ``C_i = sqrt(kappa_i) I``, ``D = I`` (each mirror reflects its own input).
    """
    k = np.asarray(kappas, float)
    if k.ndim != 1 or k.size == 0 or np.any(k <= 0):
        raise ValueError("cavity needs at least one strictly positive coupling rate")
    m = k.size
    inputs = tuple(inputs) if inputs is not None else tuple(f"in{i + 1}" for i in range(m))
    outputs = tuple(outputs) if outputs is not None else tuple(f"out{i + 1}" for i in range(m))
    if len(inputs) != m or len(outputs) != m:
        raise ValueError("one input and one output label per mirror")
    A = -0.5 * k.sum() * np.eye(2) + detuning * J2
    B = np.hstack([-math.sqrt(ki) * np.eye(2) for ki in k])
    C = np.vstack([math.sqrt(ki) * np.eye(2) for ki in k])
    sys = LinearQuantumSystem(A, B, C, np.eye(2 * m), inputs, outputs, name)
    res = realizability_residuals(sys)
    if res["dynamics"] > 1e-10 * max(1.0, k.sum()):
        raise AssertionError(f"cavity construction lost physical realizability ({res})")
    return sys


def phase_shifter(theta: float, inp: str, out: str, name: str = "phase") -> LinearQuantumSystem:
    """Static quadrature rotation by ``theta`` (no internal modes)."""
    c, s_ = math.cos(theta), math.sin(theta)
    return LinearQuantumSystem(np.zeros((0, 0)), np.zeros((0, 2)), np.zeros((2, 0)),
                               np.array([[c, -s_], [s_, c]]), (inp,), (out,), name)


def realizability_residuals(sys: LinearQuantumSystem) -> dict:
    """Residuals of the canonical-commutation conditions.

    ``dynamics``: ``A Th + Th A^T + B Th_w B^T``; ``coupling``:
    ``B - Th C^T Th_y D`` (meaningful for square ``D``); ``feedthrough``:
    ``D Th_w D^T - Th_y``. Max-abs entries are reported.
    """
    Th = _theta(sys.n_states // 2)
    Tw = _theta(len(sys.inputs))
    Ty = _theta(len(sys.outputs))
    out = dict(dynamics=float(np.abs(sys.A @ Th + Th @ sys.A.T + sys.B @ Tw @ sys.B.T).max()))
    out["feedthrough"] = float(np.abs(sys.D @ Tw @ sys.D.T - Ty).max())
    if sys.D.shape[0] == sys.D.shape[1]:
        out["coupling"] = float(np.abs(sys.B - Th @ sys.C.T @ Ty @ sys.D).max())
    return out


def _direct_sum(a: LinearQuantumSystem, b: LinearQuantumSystem) -> LinearQuantumSystem:
    return LinearQuantumSystem(
        sla.block_diag(a.A, b.A),
        sla.block_diag(a.B, b.B),
        sla.block_diag(a.C, b.C),
        sla.block_diag(a.D, b.D),
        a.inputs + b.inputs,
        a.outputs + b.outputs,
        f"{a.name}+{b.name}",
    )


def interconnect(first: LinearQuantumSystem, second: LinearQuantumSystem, wiring: Wiring,
                 name: Optional[str] = None) -> LinearQuantumSystem:
    """Feed the named outputs into the named inputs and eliminate those ports.

    States are ordered ``(first, second)``; the remaining ports keep their
    original order.
    """
    S = _direct_sum(first, second)
    for o, i in wiring.connections:
        if o not in S.outputs:
            raise ValueError(f"unknown output port {o!r}")
        if i not in S.inputs:
            raise ValueError(f"unknown input port {i!r}")
    if not wiring.connections:
        return LinearQuantumSystem(S.A, S.B, S.C, S.D, S.inputs, S.outputs, name or S.name)
    c_in = [i for _, i in wiring.connections]
    c_out = [o for o, _ in wiring.connections]
    cols = lambda ports: np.concatenate([np.arange(S.in_cols(p).start, S.in_cols(p).stop) for p in ports]) if ports else np.array([], int)
    rows = lambda ports: np.concatenate([np.arange(S.out_rows(p).start, S.out_rows(p).stop) for p in ports]) if ports else np.array([], int)
    ext_in = [p for p in S.inputs if p not in c_in]
    ext_out = [p for p in S.outputs if p not in c_out]
    ci, co, ei, eo = cols(c_in), rows(c_out), cols(ext_in), rows(ext_out)
    # u_c = y_c = C_c x + D_cc u_c + D_ce u_e
    loop = np.eye(len(ci)) - S.D[np.ix_(co, ci)]
    cond = np.linalg.cond(loop)
    if not np.isfinite(cond) or cond > 1e12:
        pairs = ", ".join(f"{o}->{i}" for o, i in wiring.connections)
        raise ValueError(f"ill-posed algebraic loop through {pairs} (I - feedthrough is singular)")
    Minv = np.linalg.inv(loop)
    Kx = Minv @ S.C[co]
    Ku = Minv @ S.D[np.ix_(co, ei)]
    A = S.A + S.B[:, ci] @ Kx
    B = S.B[:, ei] + S.B[:, ci] @ Ku
    C = S.C[eo] + S.D[np.ix_(eo, ci)] @ Kx
    D = S.D[np.ix_(eo, ei)] + S.D[np.ix_(eo, ci)] @ Ku
    return LinearQuantumSystem(A, B.reshape(len(A), -1), C.reshape(-1, len(A)), D.reshape(len(eo), len(ei)),
                               tuple(ext_in), tuple(ext_out), name or S.name)


def transfer(sys: LinearQuantumSystem, src: str, dst: str, omegas) -> np.ndarray:
    """``C (i w - A)^-1 B + D`` restricted to the ports; shape ``(len(omegas), 2, 2)``."""
    B = sys.B[:, sys.in_cols(src)]
    C = sys.C[sys.out_rows(dst)]
    D = sys.D[sys.out_rows(dst), sys.in_cols(src)]
    n = sys.n_states
    out = np.empty((len(omegas), C.shape[0], B.shape[1]), complex)
    for j, w in enumerate(np.asarray(omegas, float)):
        out[j] = C @ np.linalg.solve(1j * w * np.eye(n) - sys.A, B) + D
    return out


def hinfty_gain(sys: LinearQuantumSystem, src: str, dst: str, omegas) -> float:
    """Peak largest singular value over the frequency grid."""
    omegas = np.asarray(omegas, float)
    if omegas.size == 0:
        raise ValueError("frequency grid is empty")
    if not sys.is_stable():
        raise ValueError("system is not stable (A has eigenvalues with nonnegative real part)")
    G = transfer(sys, src, dst, omegas)
    sv = np.linalg.svd(G, compute_uv=False)[:, 0]
    k = int(np.argmax(sv))
    # the response is even in omega, so a peak at omega = 0 is a genuine maximum
    at_edge = k == omegas.size - 1 or (k == 0 and omegas[0] != 0.0)
    if omegas.size > 1 and at_edge and sv[k] > sv.min() * (1 + 1e-9):
        warnings.warn(
            f"peak gain attained at the grid endpoint omega={omegas[k]:.4g}; refine or extend the grid",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(sv[k])


# -- dissipation -------------------------------------------------------------


def mode_energy(n_modes: int) -> QuadraticForm:
    """Total photon number ``sum a_j* a_j`` in quadrature form."""
    return QuadraticForm(0.25 * np.eye(2 * n_modes), -0.5 * n_modes)


def hinf_supply(sys: LinearQuantumSystem, src: str, dst: str, gamma: float) -> QuadraticForm:
    """``gamma^2 |beta|^2 - |C_z x + D_zw beta|^2`` over ``(x, beta)``, ``beta`` the signal part of ``src``."""
    Cz = sys.C[sys.out_rows(dst)]
    Dz = sys.D[sys.out_rows(dst), sys.in_cols(src)]
    F = np.hstack([Cz, Dz])
    N = -F.T @ F
    N[sys.n_states:, sys.n_states:] += gamma**2 * np.eye(2)
    return QuadraticForm(N)


def bounded_real_storage(sys: LinearQuantumSystem, src: str, dst: str, gamma: float) -> Optional[QuadraticForm]:
    """Stabilizing solution of the bounded-real Riccati equation, or ``None``.

    ``A'M + MA + C'C + (MB + C'D)(gamma^2 I - D'D)^-1 (B'M + D'C) = 0`` with
    ``B, C, D`` restricted to the ports. It exists (and is PSD) exactly when
    ``gamma`` exceeds the gain.
    """
    B = sys.B[:, sys.in_cols(src)]
    C = sys.C[sys.out_rows(dst)]
    D = sys.D[sys.out_rows(dst), sys.in_cols(src)]
    R = gamma**2 * np.eye(B.shape[1]) - D.T @ D
    if np.linalg.eigvalsh(R).min() <= 0:
        return None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            M = sla.solve_continuous_are(sys.A, B, C.T @ C, -R, s=C.T @ D)
    except (np.linalg.LinAlgError, ValueError):
        return None
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)):
        return None
    Rinv = np.linalg.inv(R)
    K = Rinv @ (B.T @ M + D.T @ C)
    res = sys.A.T @ M + M @ sys.A + C.T @ C + (M @ B + C.T @ D) @ K
    closed = sys.A + B @ K
    scale = max(1.0, np.abs(M).max())
    if (np.abs(res).max() > 1e-8 * scale or np.linalg.eigvalsh(M).min() < -1e-9 * scale
            or np.max(np.linalg.eigvals(closed).real) >= 0):
        return None
    return QuadraticForm(M)


@dataclass
class DissipationReport:
    margin: float  # largest eigenvalue of the dissipation matrix; <= tol means the inequality holds
    passed: bool
    noise_constant: float  # tr(B' M B), the vacuum contribution to dE[V]/dt
    storage_rate: Optional[float]  # max generalized eigenvalue of (A'M + MA) relative to M
    empirical_worst: Optional[float] = None
    empirical_stderr: Optional[float] = None
    empirical_time: Optional[float] = None
    storage: Optional[QuadraticForm] = field(default=None, repr=False)
    witness_omega: Optional[float] = None


def check_dissipation(sys: LinearQuantumSystem, V: Optional[QuadraticForm], S: QuadraticForm,
                      signal_inputs: Sequence[str] = (), T: float = 0.0, n_traj: int = 0, seed: int = 0,
                      dt: float = 1e-3, tol: float = 1e-9, omegas=None, gain_ports=None,
                      gamma: Optional[float] = None) -> DissipationReport:
    """Check ``E[V(t) - V(0) - int (S + lambda)] <= 0`` for vacuum inputs.

    Algebraic part: with ``v = (x, beta)`` over the state and the signal
    parts of ``signal_inputs``, the matrix
    ``[[A'M + MA, M B_s], [B_s' M, 0]] - N_S`` must be negative semidefinite;
    ``lambda = tr(B' M B)`` is the vacuum noise constant.

    ``V=None`` requests the bounded-real storage for ``gain_ports = (src, dst)``
    at level ``gamma`` (``S`` should then be :func:`hinf_supply` at the same
    level); when it does not exist, a frequency in
    ``omegas`` with ``sigma_max > gamma`` is reported as the witness and the
    check fails.

    Empirical part (``n_traj > 0``): Euler simulation of the quadrature
    dynamics with every input in vacuum, reporting the worst-time sample mean
    of ``V(t) - V(0) - int (S(x, 0) + lambda)`` and its standard error.
    """
    n = sys.n_states
    sig = list(signal_inputs)
    Bs = np.hstack([sys.B[:, sys.in_cols(p)] for p in sig]) if sig else np.zeros((n, 0))
    m = Bs.shape[1]
    if S.M.shape != (n + m, n + m):
        raise ValueError(f"supply form must act on {n} states + {m} signal quadratures")
    witness = None
    if V is None:
        if gain_ports is None or gamma is None or len(sig) != 1:
            raise ValueError("bounded-real storage needs gain_ports=(src, dst), gamma and one signal input")
        src, dst = gain_ports
        V = bounded_real_storage(sys, src, dst, gamma)
        if V is None:
            grid = np.linspace(0, 50, 2001) if omegas is None else np.asarray(omegas, float)
            G = transfer(sys, src, dst, grid)
            sv = np.linalg.svd(G, compute_uv=False)[:, 0]
            k = int(np.argmax(sv))
            witness = float(grid[k])
            return DissipationReport(float(sv[k] ** 2 - gamma**2), False, float("nan"), None, witness_omega=witness)
    if V.M.shape != (n, n):
        raise ValueError(f"storage must act on the {n} state quadratures")
    if not V.is_psd():
        raise ValueError("storage function must be positive semidefinite")
    M = V.M
    Pi = np.zeros((n + m, n + m))
    Pi[:n, :n] = sys.A.T @ M + M @ sys.A
    Pi[:n, n:] = M @ Bs
    Pi[n:, :n] = Bs.T @ M
    Pi -= S.M
    margin = float(np.linalg.eigvalsh(0.5 * (Pi + Pi.T)).max())
    lam = float(np.trace(sys.B.T @ M @ sys.B))
    rate = None
    if np.linalg.eigvalsh(M).min() > 1e-12:
        rate = float(sla.eigh(sys.A.T @ M + M @ sys.A, M, eigvals_only=True).max())
    scale = max(1.0, np.abs(Pi).max())
    rep = DissipationReport(margin, margin <= tol * scale, lam, rate, storage=V)
    if n_traj > 0:
        worst, se, t = _empirical_dissipation(sys, V, S, lam, T, dt, n_traj, seed, m)
        rep.empirical_worst, rep.empirical_stderr, rep.empirical_time = worst, se, t
    return rep


def _empirical_dissipation(sys, V, S, lam, T, dt, n_traj, seed, m):
    n = sys.n_states
    N = int(round(T / dt))
    if N < 1:
        raise ValueError("empirical check needs T >= dt")
    k_in = sys.B.shape[1]
    noise = np.empty((n_traj, N, k_in))
    x0 = np.empty((n_traj, n))
    for i in range(n_traj):
        noise[i] = path_rng(seed, i).standard_normal((N, k_in)) * math.sqrt(dt)
        x0[i] = path_rng(seed, i, 1).standard_normal(n)  # vacuum: unit variance per quadrature
    x = x0.copy()
    v0 = V(x0)
    integral = np.zeros(n_traj)
    beta = np.zeros((n_traj, m))
    worst, worst_se, worst_t = -np.inf, 0.0, 0.0
    for k in range(N):
        integral += (S(np.hstack([x, beta])) + lam) * dt
        x = x + x @ sys.A.T * dt + noise[:, k] @ sys.B.T
        d = V(x) - v0 - integral
        mean = float(d.mean())
        if mean > worst:
            worst, worst_se, worst_t = mean, float(d.std(ddof=1) / math.sqrt(n_traj)), (k + 1) * dt
    return worst, worst_se, worst_t


# -- the two-cavity coherent feedback network ----------------------------------


def fig5_network(plant_kappas=(2.6, 0.2, 0.2), controller_kappas=(5.0, 5.0, 2.0), controller_detuning=0.0,
                 plant_detuning=0.0, phase=math.pi, controller=True):
    """Plant and controller cavities wired through the coherent signals ``u`` and ``y``.

    Plant mirrors take inputs ``(w, u, v)`` and emit ``(w_out, y, z)``. The
    controller cavity takes ``(y, v_K1, v_K2)`` on its three mirrors; the
    field leaving its second mirror passes a phase shifter and becomes ``u``.
    Matched first and second controller mirrors with a weak third mirror
    transmit ``y`` almost fully at resonance, and the ``pi`` shift turns
    that into loop gain that suppresses the plant mode. With
    ``controller=False`` the plant input ``u`` stays in vacuum.

    Returns ``(system, plant, controller)``; ``system`` is the plant itself
    when the controller is disconnected.
    """
    plant = cavity(plant_kappas, plant_detuning, ("w", "u", "v"), ("w_out", "y", "z"), "plant")
    cav = cavity(controller_kappas, controller_detuning, ("y_in", "v_K1", "v_K2"), ("z_K0", "u_pre", "z_K2"), "controller-cavity")
    ctrl = interconnect(cav, phase_shifter(phase, "u_shift", "u_out"), Wiring((("u_pre", "u_shift"),)), name="controller")
    if not controller:
        return plant, plant, ctrl
    closed = interconnect(plant, ctrl, Wiring((("y", "y_in"), ("u_out", "u"))), name="closed-loop")
    return closed, plant, ctrl


# -- text format -------------------------------------------------------------


def write_system(sys: LinearQuantumSystem, path) -> None:
    """Plain-text dump: name, port labels, then each matrix with its shape."""
    lines = [f"system {sys.name or 'unnamed'}", "inputs " + " ".join(sys.inputs), "outputs " + " ".join(sys.outputs)]
    for key in ("A", "B", "C", "D"):
        M = getattr(sys, key)
        lines.append(f"{key} {M.shape[0]} {M.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in M)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_system(path) -> LinearQuantumSystem:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    it = iter(lines)
    head = next(it).split(maxsplit=1)
    if head[0] != "system":
        raise ValueError("expected a 'system <name>' header")
    name = head[1] if len(head) > 1 else ""
    fields = {}
    for ln in it:
        parts = ln.split()
        if parts[0] in ("inputs", "outputs"):
            fields[parts[0]] = tuple(parts[1:])
        elif parts[0] in ("A", "B", "C", "D"):
            r, c = int(parts[1]), int(parts[2])
            rows = [list(map(float, next(it).split())) for _ in range(r)]
            M = np.array(rows, float).reshape(r, c)
            fields[parts[0]] = M
        else:
            raise ValueError(f"unexpected line {ln!r}")
    missing = {"inputs", "outputs", "A", "B", "C", "D"} - set(fields)
    if missing:
        raise ValueError(f"system file lacks {sorted(missing)}")
    return LinearQuantumSystem(fields["A"], fields["B"], fields["C"], fields["D"],
                               fields["inputs"], fields["outputs"], name)
