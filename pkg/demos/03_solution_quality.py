"""Solution quality after a fixed iteration budget, in and out of sample.

Runs the random-uniform picker for a fixed number of iterations on a
2-state system, then reports mean relative Bellman errors and
rollout-based suboptimality bounds both on the sample set and on fresh
evaluation states.  Out-of-sample figures are expected to be somewhat
worse, since the bounds were fitted at the sample points.
"""

import numpy as np

import gddp
from gddp.driver import GddpState, gddp_iterate

row = gddp.run_quality_experiment(n=2, m=1, M=50, iters=50, eval_samples=200, seed=0)
print("fixed-budget quality metrics (n=2, M=50, 50 iterations):")
print(f"  mean relative Bellman error  in-sample: {row.mean_rel_bellman_error_in:.4%}")
print(f"                              out-sample: {row.mean_rel_bellman_error_out:.4%}")
print(f"  value-weighted subopt bound  in-sample: {row.subopt_bound_in:.4%}")
print(f"                              out-sample: {row.subopt_bound_out:.4%}")

# convergence-curve data: certificate gap at checkpoints along one run
spec = gddp.generate_random_system(gddp.RandomSystemConfig(n=2, m=1, seed=0))
rng = np.random.default_rng(0)
samples = rng.normal(0, 5.0, size=(20, 2))
eval_pts = rng.normal(0, 5.0, size=(30, 2))

state = GddpState.initial(spec, samples)
state.bellman_errors[:] = np.inf
cfg = gddp.GddpConfig(picker=gddp.Picker.RANDOM_UNIFORM, rng_seed=0, max_iterations=100)
pick_rng = np.random.default_rng(0)

print("\niteration  mean subopt bound (eval set)")
for checkpoint in range(5, 55, 5):
    while state.iteration < checkpoint:
        gddp_iterate(spec, state, cfg, pick_rng)
    gaps, vals = [], []
    for x in eval_pts:
        cert = gddp.certify_m1(spec, state.V.snapshot(), x, max_steps=30)
        gaps.append(cert.gap)
        vals.append(cert.lower)
    print(f"{checkpoint:>9}  {sum(gaps) / max(sum(vals), 1e-12):.4%}")
