"""Grid filter against the Kalman filter on the scalar linear model."""
import numpy as np

from infostate.classical import GaussianState, discretize_generator, kalman_step, lqg_1d, run_filter, simulate
from infostate.dp import KalmanThresholdController
from infostate.stochastic import make_time_grid

model, _ = lqg_1d()
lin = model.linear
grid = make_time_grid(1.0, 1e-3)
_, tr = next(simulate(model, KalmanThresholdController(lin, 0.0, 0.25), grid, 1, seed=1))
dys = tr.obs_increments[:, :, 0]

chain = discretize_generator(model, np.arange(-4.0, 4.025, 0.05))
W = run_filter(chain, chain.gaussian_weights(0.0, 0.5), tr.controls, dys, grid.dt)[0]
mean = W @ chain.grid
var = W @ chain.grid**2 - mean**2

g = GaussianState(np.zeros((1, 1)), 0.25)
print(f"{'t':>5} {'x':>8} {'grid mean':>10} {'kalman':>8} {'grid var':>9} {'kalman':>8}")
for k in range(grid.n_steps + 1):
    if k % 100 == 0:
        print(f"{grid.times[k]:5.2f} {tr.states[0, k, 0]:8.4f} {mean[k]:10.4f} {g.mean[0, 0]:8.4f} "
              f"{var[k]:9.5f} {g.covariance[0, 0]:8.5f}")
    if k < grid.n_steps:
        g = kalman_step(g, lin["a"], lin["b"], lin["c"], lin["sigma"], tr.controls[:, k], dys[:, k], grid.dt)
