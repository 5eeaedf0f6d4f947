"""Homodyne feedback on a decaying qubit: threshold rule, Bloch-ball DP and no drive."""
import numpy as np

from infostate.quantum.feedback import ThresholdController, evaluate_quantum_cost, qubit_stabilize
from infostate.quantum.qubit_dp import BlochGrid, QubitPolicyController, qubit_mfc_value_iteration
from infostate.stochastic import ConstantController, make_time_grid

model, cost, rho0 = qubit_stabilize()
grid = make_time_grid(2.0, 0.01)
V, P = qubit_mfc_value_iteration(model, cost, BlochGrid(8, 12, 16), grid)
controllers = {
    "no drive": ConstantController(0.0),
    "threshold": ThresholdController(model, rho0, 0.0, 3.0),
    "dp policy": QubitPolicyController(P, model, rho0),
}
for name, ctrl in controllers.items():
    e = evaluate_quantum_cost(model, cost, ctrl, 1000, 0, grid, rho0)
    print(f"{name:10s} {e.mean:.4f} +- {e.stderr:.4f}")
print("DP value at the initial state:", float(V.value(np.array([[0.0, 0.0, 1.0]]), 0)[0]))
