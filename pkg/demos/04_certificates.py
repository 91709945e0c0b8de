"""Sandwiching the optimal value at a query state.

The approximation itself is a certified lower bound; an upper bound is
assembled from a greedy rollout whose steps contribute their Bellman
errors, finished by an exact steering sequence into the origin whose
steps contribute detour costs.  On an unconstrained-regime problem the
truth is known from the Riccati oracle and must land inside the bracket.
"""

import numpy as np

import gddp

spec = gddp.ProblemSpec(
    n=1,
    m=1,
    gamma=1.0,
    dynamics=gddp.DynamicsModel.linear([[0.5]], [[1.0]]),
    cost=gddp.StageCost(
        1, (gddp.CostTerm(0, gddp.QuadraticForm([[1.0]], [0.0], 0.0), [0.0], [[1.0]]),)
    ),
    constraints=gddp.InputConstraintSet.box([-1e3], [1e3], 1),
    class_tag=gddp.ProblemClass.CONVEX_QUADRATIC,
)
ric = gddp.solve_dare([[0.5]], [[1.0]], [[1.0]], [[1.0]], 1.0)
p_star = float(ric.P[0, 0])

result = gddp.run(spec, [[2.0], [-1.0], [4.0], [0.5]], gddp.GddpConfig(delta=1e-6, rng_seed=0))
print(f"run converged: {result.converged} ({result.iterations_used} iterations, "
      f"{len(result.V_hat)} bounds)")

print(f"\n{'x':>6} {'lower':>10} {'truth':>10} {'upper':>10} {'gap':>9}")
for x in [0.5, 1.0, 2.0, 3.0, 5.0]:
    cert = gddp.certify_m1(spec, result.V_hat, [x], max_steps=30)
    truth = 0.5 * p_star * x**2
    inside = cert.lower - 1e-9 <= truth <= cert.upper
    print(f"{x:>6.2f} {cert.lower:>10.5f} {truth:>10.5f} {cert.upper:>10.5f} "
          f"{cert.gap:>9.2e} {'ok' if inside else 'VIOLATED'}")

# certificates also work along a pre-planned waypoint path
V = result.V_hat
waypoints = gddp.rollout_greedy(spec, V, [2.0], 25)
waypoints.states[-1] = np.zeros(1)
cert = gddp.certify_m2(spec, V, waypoints)
print(f"\nwaypoint certificate at x=2: [{cert.lower:.5f}, {cert.upper:.5f}] "
      f"(method {cert.method.value})")
