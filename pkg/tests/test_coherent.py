import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infostate.coherent import (
    LinearQuantumSystem,
    QuadraticForm,
    Wiring,
    cavity,
    check_dissipation,
    fig5_network,
    hinf_supply,
    hinfty_gain,
    interconnect,
    mode_energy,
    phase_shifter,
    read_system,
    realizability_residuals,
    transfer,
    write_system,
)

OMEGAS = np.linspace(0.0, 40.0, 2001)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 50.0), st.floats(-10.0, 10.0))
def test_single_mirror_all_pass(kappa, detuning):
    sys = cavity([kappa], detuning)
    sv = np.linalg.svd(transfer(sys, "in1", "out1", OMEGAS), compute_uv=False)
    assert np.abs(sv - 1).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=1, max_size=4), st.floats(-5.0, 5.0))
def test_cavity_spectrum_and_realizability(kappas, detuning):
    sys = cavity(kappas, detuning)
    ev = np.linalg.eigvals(sys.A)
    assert np.allclose(ev.real, -0.5 * sum(kappas))
    assert np.allclose(np.sort(ev.imag), [-abs(detuning), abs(detuning)])
    res = realizability_residuals(sys)
    assert max(res.values()) < 1e-10 * max(1.0, sum(kappas))


def test_two_mirror_resonant_transmission():
    sys = cavity([1.5, 1.5])
    G = transfer(sys, "in1", "out2", [0.0])[0]
    assert np.allclose(np.abs(G), np.eye(2), atol=1e-12)
    assert np.linalg.norm(transfer(sys, "in1", "out1", [0.0])[0]) < 1e-12


def test_phase_shifter_is_rotation():
    ps = phase_shifter(0.3, "a", "b")
    assert ps.n_states == 0
    assert np.allclose(ps.D @ ps.D.T, np.eye(2))


def test_empty_wiring_is_direct_sum():
    a, b = cavity([1.0], 0.5, ("a",), ("a_out",)), cavity([2.0, 3.0], 0.0, ("b1", "b2"), ("c1", "c2"))
    s = interconnect(a, b, Wiring())
    assert s.inputs == ("a", "b1", "b2") and s.outputs == ("a_out", "c1", "c2")
    assert np.array_equal(s.A[:2, 2:], np.zeros((2, 2)))
    assert np.array_equal(s.A[2:, 2:], b.A)


def test_cascade_by_hand():
    # series connection: the output of the first cavity drives the second
    a = cavity([1.0], 0.2, ("w",), ("y",))
    b = cavity([2.0, 0.5], -0.3, ("u", "v"), ("z", "r"))
    s = interconnect(a, b, Wiring((("y", "u"),)))
    Bu = b.B[:, 0:2]
    A = np.block([[a.A, np.zeros((2, 2))], [Bu @ a.C, b.A]])
    B = np.block([[a.B, np.zeros((2, 2))], [Bu @ a.D, b.B[:, 2:4]]])
    C = np.block([[b.D[:, 0:2] @ a.C, b.C]])
    D = np.hstack([b.D[:, 0:2] @ a.D, b.D[:, 2:4]])
    assert s.inputs == ("w", "v") and s.outputs == ("z", "r")
    assert np.allclose(s.A, A) and np.allclose(s.B, B)
    assert np.allclose(s.C, C) and np.allclose(s.D, D)


def test_cascade_transfer_is_product():
    a = cavity([1.0], 0.2, ("w",), ("y",))
    b = cavity([2.0, 0.5], -0.3, ("u", "v"), ("z", "r"))
    s = interconnect(a, b, Wiring((("y", "u"),)))
    w = np.linspace(0, 5, 11)
    assert np.allclose(transfer(s, "w", "z", w), transfer(b, "u", "z", w) @ transfer(a, "w", "y", w))


def test_feedback_loop_stable_and_realizable():
    closed, _, _ = fig5_network()
    assert closed.is_stable()
    assert max(realizability_residuals(closed).values()) < 1e-10
    assert closed.inputs == ("w", "v", "v_K1", "v_K2")


def test_algebraic_loop_rejected():
    a = phase_shifter(0.0, "p", "q")
    b = phase_shifter(0.0, "r", "s")
    with pytest.raises(ValueError, match="algebraic loop"):
        interconnect(a, b, Wiring((("q", "r"), ("s", "p"))))


def test_unknown_port_and_duplicate_wiring():
    a, b = cavity([1.0]), cavity([1.0], inputs=("x",), outputs=("y",))
    with pytest.raises(ValueError):
        interconnect(a, b, Wiring((("nope", "x"),)))
    with pytest.raises(ValueError):
        Wiring((("out1", "x"), ("out1", "in1")))


def test_shape_validation():
    with pytest.raises(ValueError):
        LinearQuantumSystem(np.eye(2), np.eye(3), np.eye(2), np.eye(2), ("a",), ("b",))
    with pytest.raises(ValueError):
        LinearQuantumSystem(np.eye(2), np.eye(2), np.eye(2), np.eye(2), ("a",), ("a",))


def test_zero_transfer_between_uncoupled_ports():
    a, b = cavity([1.0]), cavity([1.0], inputs=("x",), outputs=("y",))
    s = interconnect(a, b, Wiring())
    assert hinfty_gain(s, "in1", "y", OMEGAS) == 0.0


def test_coherent_feedback_reduces_gain():
    closed, plant, _ = fig5_network()
    g_open = hinfty_gain(plant, "w", "z", OMEGAS)
    g_closed = hinfty_gain(closed, "w", "z", OMEGAS)
    assert g_closed < g_open
    # plant alone: 2 sqrt(k_w k_z) / sum(k) at resonance
    assert g_open == pytest.approx(2 * math.sqrt(2.6 * 0.2) / 3.0, rel=1e-9)


def test_endpoint_peak_warns():
    sys = cavity([1.0, 1.0], 5.0)
    with pytest.warns(RuntimeWarning):
        hinfty_gain(sys, "in1", "out2", np.linspace(0, 2, 50))


def test_unstable_gain_rejected():
    sys = LinearQuantumSystem(np.eye(2), -np.eye(2), np.eye(2), np.eye(2), ("a",), ("b",))
    with pytest.raises(ValueError):
        hinfty_gain(sys, "a", "b", OMEGAS)


def test_damped_cavity_energy_rate():
    k = 3.0
    sys = cavity([k])
    rep = check_dissipation(sys, QuadraticForm(np.eye(2)), QuadraticForm(np.zeros((2, 2))))
    assert rep.storage_rate == pytest.approx(-k)
    assert rep.passed
    rep = check_dissipation(sys, mode_energy(1), QuadraticForm(np.zeros((2, 2))))
    assert rep.noise_constant == pytest.approx(k / 2)


def test_zero_storage():
    sys = cavity([1.0])
    rep = check_dissipation(sys, QuadraticForm(np.zeros((2, 2))), QuadraticForm(np.zeros((2, 2))))
    assert rep.margin == 0.0 and rep.passed and rep.storage_rate is None


def test_non_psd_storage_rejected():
    with pytest.raises(ValueError):
        check_dissipation(cavity([1.0]), QuadraticForm(-np.eye(2)), QuadraticForm(np.zeros((2, 2))))


def _gain_check(sys, src, dst, gamma):
    return check_dissipation(sys, None, hinf_supply(sys, src, dst, gamma), signal_inputs=(src,),
                             gain_ports=(src, dst), gamma=gamma, omegas=OMEGAS)


@pytest.mark.parametrize("factor,expected", [(1.02, True), (0.98, False)])
def test_bounded_real_matches_gain(factor, expected):
    sys = cavity([1.0, 0.4, 0.2], 0.7)
    g = hinfty_gain(sys, "in1", "out2", OMEGAS)
    rep = _gain_check(sys, "in1", "out2", factor * g)
    assert rep.passed is expected
    if not expected:
        assert rep.witness_omega is not None


def test_empirical_dissipation_small():
    sys = cavity([2.0])
    rep = check_dissipation(sys, mode_energy(1), QuadraticForm(np.zeros((2, 2))), T=0.5, dt=0.01, n_traj=400, seed=1)
    assert rep.empirical_worst <= 3 * rep.empirical_stderr + 1e-12


def test_text_roundtrip(tmp_path):
    closed, _, _ = fig5_network()
    path = tmp_path / "closed.txt"
    write_system(closed, path)
    back = read_system(path)
    for key in "ABCD":
        assert np.array_equal(getattr(back, key), getattr(closed, key))
    assert back.inputs == closed.inputs and back.outputs == closed.outputs


def test_text_missing_field(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("system x\ninputs a\noutputs b\nA 0 0\n")
    with pytest.raises(ValueError):
        read_system(path)
