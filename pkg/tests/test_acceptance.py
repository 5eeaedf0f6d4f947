"""Acceptance criteria 1-11. Each test records a single PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from infostate.classical import (
    CostSpec,
    GaussianState,
    MarkovChainModel,
    cost_via_infostate,
    discretize_generator,
    evaluate_cost_mc,
    evaluate_rs_cost_mc,
    filter_step,
    kalman_step,
    lqg_1d,
    rs_filter_step,
    run_filter,
    simulate,
)
from infostate.cli import main
from infostate.coherent import (
    Wiring,
    cavity,
    check_dissipation,
    fig5_network,
    hinf_supply,
    hinfty_gain,
    interconnect,
    phase_shifter,
    realizability_residuals,
    transfer,
)
from infostate.dp import KalmanThresholdController, SimplexGrid, filter_riccati, lqg_synthesize, rs_value_iteration, value_iteration
from infostate.quantum.core import decay_qubit, excited, master_evolve, pauli_x, trace_norm
from infostate.quantum.feedback import ThresholdController, evaluate_quantum_rs_cost, homodyne_batch, qubit_stabilize
from infostate.scenarios import SCENARIOS, resolve_config, run_config
from infostate.stochastic import make_time_grid

pytestmark = pytest.mark.acceptance


def _run(scenario, seed, **sections):
    cfg, defaulted = resolve_config(dict(scenario=scenario, seed=seed, **sections))
    return run_config(cfg, defaulted)


def _z(a, b):
    return (a.mean - b.mean) / math.hypot(a.stderr, b.stderr)


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_tower_property(criterion):
    t0 = time.perf_counter()
    rep = _run("lqg-1d", 2024, controller=dict(type="threshold"),
               solver=dict(n_paths=10_000, dt=1e-3, dx=0.05, infostate=True))
    elapsed = time.perf_counter() - t0
    direct, info = rep.metrics["cost"], rep.metrics["cost_infostate"]
    z = _z(direct, info)
    ok = abs(z) <= 3 and elapsed <= 120
    criterion(1, ok, f"direct {direct.mean:.4f}+-{direct.stderr:.4f}, infostate {info.mean:.4f}+-{info.stderr:.4f}, "
                     f"z={z:.2f} (|z|<=3), runtime {elapsed:.1f}s (<=120s)")
    assert ok


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_kalman_oracle(criterion):
    model, cost = lqg_1d()
    grid = make_time_grid(1.0, 1e-3)
    lin = model.linear
    ctrl = KalmanThresholdController(lin, 0.0, 0.25)
    _, tr = next(simulate(model, ctrl, grid, 1, 17))
    dys = tr.obs_increments[:, :, 0]
    chain = discretize_generator(model, np.arange(-4.0, 4.0 + 0.025, 0.05))
    W = run_filter(chain, chain.gaussian_weights(0.0, 0.5), tr.controls, dys, grid.dt)[0]
    m_grid = W @ chain.grid
    v_grid = W @ chain.grid**2 - m_grid**2
    g = GaussianState(np.zeros((1, 1)), 0.25)
    m_k, v_k = [0.0], [0.25]
    for k in range(grid.n_steps):
        g = kalman_step(g, lin["a"], lin["b"], lin["c"], lin["sigma"], tr.controls[:, k], dys[:, k], grid.dt)
        m_k.append(g.mean[0, 0])
        v_k.append(g.covariance[0, 0])
    m_k, v_k = np.array(m_k), np.array(v_k)
    e_mean = np.max(np.abs(m_grid - m_k) / np.sqrt(v_k))
    e_var = np.max(np.abs(v_grid - v_k) / v_k)
    ok = grid.n_steps == 1000 and e_mean <= 0.05 and e_var <= 0.05
    criterion(2, ok, f"over {grid.n_steps} steps max mean error {e_mean:.4f} (Kalman std units), "
                     f"max variance error {e_var:.4f} (<=0.05)")
    assert ok


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_riccati(criterion):
    times = make_time_grid(10.0, 1e-3)
    P_f = filter_riccati(dict(a=-1, b=1, c=1, sigma=1), 0.0, times)[-1, 0, 0]
    # backward sweep: the value at t=0 has run for the full horizon
    P_c = lqg_synthesize(dict(a=0, b=1, c=1, sigma=1), dict(q=1.0, r=1.0, p=0.0), times).P[0, 0, 0]
    e_f = abs(P_f - (math.sqrt(2) - 1)) / (math.sqrt(2) - 1)
    e_c = abs(P_c - 1.0)
    ok = e_f <= 0.01 and e_c <= 0.01
    criterion(3, ok, f"filter P={P_f:.6f} (rel err {e_f:.2e}), control P={P_c:.6f} (rel err {e_c:.2e}), tol 1%")
    assert ok


# -- 4 -----------------------------------------------------------------------

Q0 = np.array([[-1.0, 1.0], [0.5, -0.5]])
Q1 = np.array([[-1.0, 1.0], [6.0, -6.0]])
CHAIN = MarkovChainModel(np.array([0.0, 1.0]), (Q0, Q1), np.array([-1.0, 1.0]), (0.0, 1.0))
COST = CostSpec(L=lambda x, u: 1 + x[:, 0] + 0.01 * u[:, 0], Phi=lambda x: np.zeros(len(x)))
DT = 0.05


def _brute(pi, k, N):
    x = CHAIN.grid[:, None]
    if k == N:
        return pi @ COST.terminal(x)
    best = math.inf
    for j, u in enumerate(CHAIN.control_set):
        v = pi @ COST.running(x, np.full(2, u)) * DT
        hb = CHAIN.propagate(pi, j, DT) @ CHAIN.h_vals
        for s in (1, -1):
            v += 0.5 * _brute(filter_step(pi, CHAIN, u, hb * DT + s * math.sqrt(DT), DT), k + 1, N)
        best = min(best, v)
    return best


def _rs_brute(sig, k, N, cost):
    x = CHAIN.grid[:, None]
    if k == N:
        return sig @ np.exp(cost.mu * cost.terminal(x))
    best = math.inf
    for u in CHAIN.control_set:
        v = 0.0
        for s in (1, -1):
            w, ls = rs_filter_step(sig, CHAIN, u, s * math.sqrt(DT), DT, cost, 0.0)
            v += 0.5 * _rs_brute(w * math.exp(ls), k + 1, N, cost)
        best = min(best, v)
    return best


def test_criterion_4_dp(criterion):
    g = SimplexGrid(2, 20)
    rs_cost = CostSpec(COST.L, COST.Phi, 0.5)
    err = 0.0
    for N in (1, 2):
        times = make_time_grid(N * DT, DT)
        V, _ = value_iteration(CHAIN, COST, g, times)
        err = max(err, np.abs(V.values[:, 0] - [_brute(p, 0, N) for p in g.points]).max())
        Vr, _ = rs_value_iteration(CHAIN, rs_cost, g, times)
        err = max(err, np.abs(Vr.values[:, 0] - [_rs_brute(p, 0, N, rs_cost) for p in g.points]).max())
    dp = _run("bench-bimodal", 3).metrics["cost"]
    consts = {u: _run("bench-bimodal", 3, controller=dict(type="constant", params=dict(value=u))).metrics["cost"]
              for u in (0.0, 1.0)}
    u_best = min(consts, key=lambda u: consts[u].mean)
    best = consts[u_best]
    margin = 2 * math.hypot(dp.stderr, best.stderr)
    ok = err <= 1e-12 and dp.mean <= best.mean + margin
    criterion(4, ok, f"enumeration max error {err:.1e} (<=1e-12); bench DP {dp.mean:.4f}+-{dp.stderr:.4f} vs "
                     f"best constant u={u_best:g} {best.mean:.4f}+-{best.stderr:.4f} (allowance {margin:.4f})")
    assert ok


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_risk_sensitive(criterion):
    grid = make_time_grid(1.0, 2e-3)
    n = 10_000
    parts, ok = [], True
    for mu, seed in ((0.05, 31), (0.1, 32)):
        model, cost = lqg_1d(mu=mu)
        chain = discretize_generator(model, np.arange(-4.0, 4.0 + 0.025, 0.05))
        ctrl = KalmanThresholdController(model.linear, 0.0, 0.25)
        info = cost_via_infostate(ctrl, model, cost, chain, n, seed, grid, mode="risk-sensitive")
        direct = evaluate_rs_cost_mc(model, cost, ctrl, n, seed + 100, grid)
        z = _z(info, direct)
        ok &= abs(z) <= 3
        parts.append(f"mu={mu}: infostate {info.mean:.4f} vs direct {direct.mean:.4f}, z={z:.2f}")
    mu = 1e-3
    model, cost = lqg_1d(mu=mu)
    ctrl = KalmanThresholdController(model.linear, 0.0, 0.25)
    rs = evaluate_rs_cost_mc(model, cost, ctrl, n, 41, grid)
    rn = evaluate_cost_mc(model, cost, ctrl, n, 42, grid)
    taylor = (rs.mean - 1) / mu
    combined = math.hypot(rs.stderr / mu, rn.stderr)
    zt = (taylor - rn.mean) / combined
    ok &= abs(zt) <= 3
    parts.append(f"Taylor (J-1)/mu={taylor:.4f} vs J={rn.mean:.4f}, z={zt:.2f}")
    criterion(5, ok, "; ".join(parts) + " (|z|<=3)")
    assert ok


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_trajectories_vs_master(criterion):
    model = decay_qubit(1.0)
    grid = make_time_grid(1.0, 1e-3)
    rho0 = 0.5 * (np.eye(2) + 0.6 * pauli_x())
    n = 10_000
    acc = np.zeros((2, 2), complex)
    for start in range(0, n, 2500):
        acc += homodyne_batch(model, 0.0, rho0, grid, 5, range(start, start + 2500)).final.sum(axis=0)
    mean = acc / n
    ref = master_evolve(model, 0.0, rho0, grid)[-1]
    tn = trace_norm(mean - ref)
    fine = make_time_grid(1.0, 1e-4)
    pop = master_evolve(model, 0.0, excited(), fine)[-1][0, 0].real
    e_pop = abs(pop - math.exp(-1.0))
    ok = tn <= 0.02 and e_pop <= 1e-3
    criterion(6, ok, f"trace norm {tn:.4f} at {n} trajectories (<=0.02); excited population {pop:.6f} "
                     f"vs e^-1, error {e_pop:.1e} (<=1e-3)")
    assert ok


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_quantum_rs_forms(criterion):
    model, cost, rho0 = qubit_stabilize(mu=0.1)
    grid = make_time_grid(2.0, 0.002)
    ctrl = ThresholdController(model, rho0, 0.0, 3.0)
    n = 10_000
    state = evaluate_quantum_rs_cost(model, cost, ctrl, n, 3, grid, rho0, form="state")
    prop = evaluate_quantum_rs_cost(model, cost, ctrl, n, 4, grid, rho0, form="propagator")
    z = _z(state, prop)
    ok = abs(z) <= 3
    criterion(7, ok, f"state form {state.mean:.5f}+-{state.stderr:.5f}, propagator form "
                     f"{prop.mean:.5f}+-{prop.stderr:.5f}, z={z:.2f} (|z|<=3)")
    assert ok


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_innovations(criterion):
    c = _run("lqg-1d", 8, controller=dict(type="threshold"),
             solver=dict(n_paths=100, innovation_paths=100)).checks["innovations"]
    q = _run("qubit-stabilize", 8, solver=dict(n_traj=500)).checks["innovations"]
    ok = c["n"] >= 100_000 and q["n"] >= 100_000 and c["passed"] and q["passed"]
    criterion(8, ok, f"classical n={c['n']} z_mean={c['z_mean']:.2f} z_var={c['z_var']:.2f}; "
                     f"quantum n={q['n']} z_mean={q['z_mean']:.2f} z_var={q['z_var']:.2f} (|z|<=4)")
    assert ok


# -- 9 -----------------------------------------------------------------------

OMEGAS = np.linspace(0.0, 40.0, 4001)


def _random_cavities(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        m = int(rng.integers(2, 5))
        yield cavity(rng.uniform(0.1, 5.0, m), rng.uniform(-5.0, 5.0))


def test_criterion_9_coherent(criterion):
    allpass = 0.0
    for kappa, det in ((0.3, 0.0), (1.0, 2.0), (7.5, -4.0)):
        sv = np.linalg.svd(transfer(cavity([kappa], det), "in1", "out1", OMEGAS), compute_uv=False)
        allpass = max(allpass, np.abs(sv - 1).max())
    mismatches = 0
    for sys in _random_cavities(10, 9):
        gain = hinfty_gain(sys, "in1", "out2", OMEGAS)
        for f in (0.5, 0.9, 0.99, 1.01, 1.1, 2.0):
            rep = check_dissipation(sys, None, hinf_supply(sys, "in1", "out2", f * gain), signal_inputs=("in1",),
                                    gain_ports=("in1", "out2"), gamma=f * gain, omegas=OMEGAS)
            mismatches += rep.passed != (f >= 1)
    closed, plant, _ = fig5_network()
    g_open = hinfty_gain(plant, "w", "z", OMEGAS)
    g_closed = hinfty_gain(closed, "w", "z", OMEGAS)
    ok = allpass <= 1e-9 and mismatches == 0 and g_closed < g_open
    criterion(9, ok, f"all-pass deviation {allpass:.1e} (<=1e-9); bounded-real mismatches {mismatches}/60; "
                     f"w->z gain {g_closed:.4f} closed vs {g_open:.4f} open")
    assert ok


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_realizability(criterion):
    systems = list(_random_cavities(20, 10))
    systems += [cavity([1.0]), cavity([2.0, 0.5], 1.3), cavity([5.0, 5.0, 2.0])]
    closed, plant, ctrl = fig5_network()
    systems += [closed, plant, ctrl, fig5_network(controller_detuning=0.7, phase=1.0)[0]]
    a = cavity([1.0], 0.2, ("w",), ("y",))
    b = cavity([2.0, 0.5], -0.3, ("u", "v"), ("z", "r"))
    systems.append(interconnect(a, b, Wiring((("y", "u"),))))
    systems.append(interconnect(a, phase_shifter(0.4, "p", "q"), Wiring((("y", "p"),))))
    worst = max(realizability_residuals(s)["dynamics"] for s in systems)
    ok = worst <= 1e-10
    criterion(10, ok, f"max |A Th + Th A' + B Th_w B'| = {worst:.1e} over {len(systems)} systems (<=1e-10)")
    assert ok


# -- 11 ----------------------------------------------------------------------


def test_criterion_11_determinism(criterion, tmp_path):
    differing = []
    for name in sorted(SCENARIOS):
        dirs = [tmp_path / f"{name}-{i}" for i in (0, 1)]
        for d in dirs:
            assert main(["run", name, "--seed", "123", "--out", str(d)]) == 0
        a = {p.name: p.read_bytes() for p in sorted(dirs[0].glob("*.csv"))}
        b = {p.name: p.read_bytes() for p in sorted(dirs[1].glob("*.csv"))}
        if not a or a != b:
            differing.append(name)
    ok = not differing
    criterion(11, ok, f"{len(SCENARIOS)} built-ins rerun with seed 123; CSV mismatches: {differing or 'none'}")
    assert ok
