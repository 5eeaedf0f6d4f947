"""Coherent feedback between two cavities and the bounded-real certificate of its gain."""
import numpy as np

from infostate.coherent import check_dissipation, fig5_network, hinf_supply, hinfty_gain, transfer

omegas = np.linspace(0.0, 40.0, 4001)
closed, plant, _ = fig5_network()
g_open = hinfty_gain(plant, "w", "z", omegas)
g_closed = hinfty_gain(closed, "w", "z", omegas)
print(f"w -> z gain: open {g_open:.4f}, closed {g_closed:.4f}")

for factor in (0.98, 1.02):
    gamma = factor * g_closed
    rep = check_dissipation(closed, None, hinf_supply(closed, "w", "z", gamma), signal_inputs=("w",),
                            gain_ports=("w", "z"), gamma=gamma, omegas=omegas)
    print(f"gamma = {factor:.2f} x gain: certificate {'found' if rep.passed else 'absent'}")

for w in (0.0, 1.0, 3.0, 10.0):
    s = np.linalg.svd(transfer(closed, "w", "z", [w])[0], compute_uv=False)[0]
    print(f"omega {w:5.1f}  sigma_max {s:.4f}")
