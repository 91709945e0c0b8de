"""Nonlinear example: regulating a ball-and-beam system to the origin.

One-stage problems are solved by brute force over a torque grid with
Newton polish, and duals are recovered from the active set at the
optimum, so the same machinery produces lower bounds for the nonlinear
dynamics.  This desk-scale demo uses a small sample set and short
budgets; the acceptance suite runs the larger protocol.
"""

import numpy as np

import gddp

spec = gddp.ball_and_beam_spec()
print(gddp.validate_spec(spec).summary())
print("drift at origin:", spec.dynamics.drift(np.zeros(4)))
print("input matrix at origin:", spec.dynamics.input_matrix(np.zeros(4)).ravel())

x0 = gddp.BALL_AND_BEAM_X0
print(f"\ninitial state {x0} (ball 1 m out, beam 10 degrees down), |x0| = {np.linalg.norm(x0):.4f}")

rollouts = gddp.run_ball_and_beam(iters_list=(20, 60), seed=0, M=40, rollout_steps=40, grid_points=401)
for budget, traj in rollouts:
    norms = [float(np.linalg.norm(s)) for s in traj.states]
    print(f"\nafter {budget} iterations: final |x| = {norms[-1]:.4f}")
    print("  |x| along rollout:", " ".join(f"{v:.2f}" for v in norms[::5]))
