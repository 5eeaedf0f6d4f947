import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infostate.classical import CostSpec, MarkovChainModel, filter_step, lqg_1d, rs_filter_step
from infostate.dp import (
    PolicyController,
    PolicyTable,
    SimplexGrid,
    _argmin_lowest,
    filter_riccati,
    lqg_synthesize,
    quantized_cost_mc,
    read_policy_csv,
    run_closed_loop,
    rs_value_iteration,
    value_iteration,
    write_tables_csv,
)
from infostate.stochastic import ConstantController, make_time_grid

# -- lattice -----------------------------------------------------------------


@pytest.mark.parametrize("n,m,count", [(2, 10, 11), (3, 7, 36), (4, 5, 56)])
def test_lattice_size(n, m, count):
    g = SimplexGrid(n, m)
    assert len(g) == count
    assert np.allclose(g.points.sum(axis=1), 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(1, 8), st.integers(0, 2**31))
def test_interpolation_exact_for_linear(n, m, seed):
    g = SimplexGrid(n, m)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    q = rng.dirichlet(np.ones(n), 50)
    assert np.allclose(g.interpolate(g.points @ a, q), q @ a, atol=1e-12)
    verts, w = g.barycentric(q)
    assert w.min() >= -1e-12
    assert np.allclose(np.einsum("qj,qjk->qk", w, g.points[verts]), q, atol=1e-12)


def test_lattice_nodes_reproduced():
    g = SimplexGrid(3, 6)
    f = np.sin(np.arange(len(g)))
    assert np.allclose(g.interpolate(f, g.points), f, atol=1e-14)
    assert np.array_equal(g.nearest(g.points), np.arange(len(g)))


def test_projection_counted():
    g = SimplexGrid(2, 4)
    g.projections = 0
    g.interpolate(np.zeros(len(g)), np.array([[1.2, -0.2]]))
    assert g.projections == 1


def test_tie_break_lowest_index():
    q = np.array([[1.0, 1.0 + 1e-14, 2.0], [3.0, 2.0, 2.0]])
    assert _argmin_lowest(q).tolist() == [0, 1]


# -- value iteration ---------------------------------------------------------


def _info_free_chain():
    return MarkovChainModel(np.array([0.0, 1.0]), (np.zeros((2, 2)), np.zeros((2, 2))), np.zeros(2), (0.0, 1.0))


def _u_cost(mu=None):
    return CostSpec(L=lambda x, u: np.where(u[:, 0] == 0, 1.0, 2.0), Phi=lambda x: np.zeros(len(x)), mu=mu)


def test_one_step_example():
    V, P = value_iteration(_info_free_chain(), _u_cost(), SimplexGrid(2, 10), make_time_grid(0.1, 0.1))
    assert np.allclose(V.values[:, 0], 0.1, atol=1e-15)
    assert np.all(P.controls[:, 0] == 0)


def test_terminal_slice():
    ch = _info_free_chain()
    cost = CostSpec(L=lambda x, u: np.zeros(len(x)), Phi=lambda x: 3.0 + x[:, 0])
    g = SimplexGrid(2, 8)
    V, _ = value_iteration(ch, cost, g, make_time_grid(0.2, 0.1))
    assert np.allclose(V.values[:, -1], g.points @ np.array([3.0, 4.0]))
    Vr, _ = rs_value_iteration(ch, CostSpec(cost.L, cost.Phi, 0.5), g, make_time_grid(0.2, 0.1))
    assert np.allclose(Vr.values[:, -1], g.points @ np.exp(0.5 * np.array([3.0, 4.0])))


# Two controls, informative observations and a final-step control that
# dominates pointwise (L(., 0) <= L(., 1), Phi = 0). The value one step before
# the horizon is then linear in the state, so lattice interpolation is exact
# and DP must reproduce enumeration over controls and innovation signs.
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


@pytest.mark.parametrize("N", [1, 2])
def test_dp_matches_enumeration(N):
    g = SimplexGrid(2, 20)
    V, P = value_iteration(CHAIN, COST, g, make_time_grid(N * DT, DT))
    brute = np.array([_brute(p, 0, N) for p in g.points])
    assert np.abs(V.values[:, 0] - brute).max() <= 1e-12
    if N == 2:
        assert len(np.unique(P.controls[:, 0])) == 2


@pytest.mark.parametrize("N", [1, 2])
def test_rs_dp_matches_enumeration(N):
    g = SimplexGrid(2, 20)
    cost = CostSpec(COST.L, COST.Phi, 0.5)
    V, _ = rs_value_iteration(CHAIN, cost, g, make_time_grid(N * DT, DT))
    brute = np.array([_rs_brute(p, 0, N, cost) for p in g.points])
    assert np.abs(V.values[:, 0] - brute).max() <= 1e-12


def test_rs_small_mu_reduction():
    g = SimplexGrid(2, 10)
    times = make_time_grid(0.1, 0.1)
    Vn, _ = value_iteration(_info_free_chain(), _u_cost(), g, times)
    mu = 1e-3
    Vr, _ = rs_value_iteration(_info_free_chain(), _u_cost(mu), g, times)
    assert np.abs((Vr.values[:, 0] - 1) / mu - Vn.values[:, 0]).max() < 1e-3


def test_rs_homogeneity():
    g = SimplexGrid(2, 20)
    V, _ = rs_value_iteration(CHAIN, CostSpec(COST.L, COST.Phi, 0.5), g, make_time_grid(2 * DT, DT))
    s = np.array([[0.3, 0.7]])
    assert V.value(2 * s)[0] == pytest.approx(2 * V.value(s)[0], rel=1e-14)


def test_value_dominates_constant_policies():
    g = SimplexGrid(2, 20)
    times = make_time_grid(0.5, DT)
    V, _ = value_iteration(CHAIN, COST, g, times)
    rng = np.random.default_rng(0)
    for pi in rng.dirichlet(np.ones(2), 3):
        v = V.value(pi[None], 0)[0]
        for u in CHAIN.control_set:
            e = quantized_cost_mc(CHAIN, COST, u, pi, times, 4000, 1)
            assert v <= e.mean + 3 * e.stderr


def test_guardrails():
    with pytest.raises(ValueError):
        value_iteration(CHAIN, COST, SimplexGrid(2, 50), make_time_grid(0.1, DT))
    V, _ = value_iteration(CHAIN, COST, SimplexGrid(2, 50), make_time_grid(0.1, DT), guard=dict(max_mesh=60))
    assert V.values.shape == (51, 3)


def test_policy_csv_roundtrip(tmp_path):
    g = SimplexGrid(2, 20)
    V, P = value_iteration(CHAIN, COST, g, make_time_grid(3 * DT, DT))
    path = tmp_path / "tables.csv"
    write_tables_csv(path, V, P)
    back = read_policy_csv(path, g, CHAIN.control_set)
    assert np.array_equal(back.controls, P.controls)


def test_constant_policy_table_matches_constant_controller():
    from infostate.classical import bench_bimodal, discretize_generator

    model, cost = bench_bimodal()
    times = make_time_grid(0.5, 0.01)
    ch = discretize_generator(model, np.linspace(-2, 2, 5))
    g = SimplexGrid(ch.n, 2)
    table = PolicyTable(np.ones((len(g), times.n_steps), dtype=np.int64), model.control_set, g)
    pi0 = ch.gaussian_weights(-1.0, 0.1)
    a = run_closed_loop(model, cost, PolicyController(table, ch, pi0), 300, 5, times)
    b = run_closed_loop(model, cost, ConstantController(1.0), 300, 5, times)
    assert np.array_equal(a.samples, b.samples)


# -- Riccati / LQG -----------------------------------------------------------


def test_zero_weights_zero_gain():
    c = lqg_synthesize(dict(a=-1, b=1, c=1, sigma=1), dict(q=0.0, r=1.0, p=0.0), make_time_grid(1.0, 0.01))
    assert np.all(c.P == 0) and np.all(c.gains == 0)


def test_control_riccati_fixed_point():
    c = lqg_synthesize(dict(a=0, b=1, c=1, sigma=1), dict(q=1.0, r=1.0, p=0.0), make_time_grid(10.0, 1e-3))
    assert c.P[0, 0, 0] == pytest.approx(1.0, rel=0.01)


def test_filter_riccati_fixed_point():
    P = filter_riccati(dict(a=-1, b=1, c=1, sigma=1), 0.0, make_time_grid(10.0, 1e-3))
    assert P[-1, 0, 0] == pytest.approx(math.sqrt(2) - 1, rel=0.01)


def test_invalid_weights():
    with pytest.raises(ValueError):
        lqg_synthesize(dict(a=0, b=1, c=1, sigma=1), dict(q=1.0, r=0.0, p=0.0), make_time_grid(1.0, 0.1))


def test_lqg_realized_cost_matches_prediction():
    model, cost = lqg_1d()
    times = make_time_grid(1.0, 1e-3)
    c = lqg_synthesize(model.linear, cost.params, times, m0=0.0, P0=0.25)
    e = run_closed_loop(model, cost, c, 4000, 7, times)
    assert abs(e.mean - c.predicted_cost()) < 3 * e.stderr
    assert c.riccati_value() == pytest.approx(c.predicted_cost(), rel=0.02)


@pytest.mark.parametrize("factor", [0.8, 1.2])
def test_lqg_local_optimality(factor):
    model, cost = lqg_1d()
    times = make_time_grid(1.0, 1e-3)
    c = lqg_synthesize(model.linear, cost.params, times, m0=0.0, P0=0.25)
    base = run_closed_loop(model, cost, c, 4000, 8, times)
    pert = run_closed_loop(model, cost, c.scaled(factor), 4000, 8, times)
    d = base - pert
    assert d.mean <= 3 * d.stderr
    assert c.scaled(factor).predicted_cost() > c.predicted_cost()
