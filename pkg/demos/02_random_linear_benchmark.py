"""Iterations-to-tolerance on random constrained linear systems.

Generates one random stable controllable system per state/input dimension
pair, then runs the lower-bounding loop with the largest-error picker for
growing sample-set sizes.  Iteration counts grow roughly linearly with the
number of sample points and are largely insensitive to the dimensions.
"""

import gddp

dims = [(1, 1), (2, 1), (3, 1)]
M_list = [1, 2, 5, 10]

rows = gddp.run_iterations_experiment(dims, M_list, delta=1e-3, seed=0)

print(f"{'n':>3} {'m':>3} {'M':>4} {'iterations':>11} {'converged':>10}")
for row in rows:
    print(f"{row['n']:>3} {row['m']:>3} {row['M']:>4} {row['iterations']:>11} {str(row['converged']):>10}")

print("\nCSV form:\n")
print(gddp.bench.rows_to_csv([{k: r[k] for k in ('n', 'm', 'M', 'iterations')} for r in rows]))
