"""Independent ground-truth solvers used for testing and acceptance.

Two oracles: the discounted discrete algebraic Riccati equation for
unconstrained linear-quadratic problems, and gridded value iteration with
multilinear interpolation for small constrained problems.  Both are kept
deliberately independent of the main solver path.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import NoConvergence, ValidationError
from .problem import ProblemSpec

__all__ = [
    "RiccatiSolution",
    "solve_dare",
    "dare_residual",
    "GridValueFunction",
    "GridBellmanOperator",
    "grid_value_iteration",
    "save_grid_value_function",
    "load_grid_value_function",
]


@dataclass(frozen=True)
class RiccatiSolution:
    """Solution of the discounted DARE: V*(x) = 1/2 x'Px, u = -K_gain x."""

    P: np.ndarray
    K_gain: np.ndarray
    residual: float


def dare_residual(P, A, B, Q, R, gamma) -> float:
    """Sup-norm defect of P in the gamma-scaled Riccati fixed point."""
    At = np.sqrt(gamma) * A
    Bt = np.sqrt(gamma) * B
    S = R + Bt.T @ P @ Bt
    next_P = Q + At.T @ P @ At - At.T @ P @ Bt @ np.linalg.solve(S, Bt.T @ P @ At)
    return float(np.abs(P - next_P).max())


def solve_dare(A, B, Q, R, gamma=1.0, tol=1e-12, max_iters=200000) -> RiccatiSolution:
    """Fixed-point iteration for the discounted Riccati equation.

    The discount enters through the scaled pair (sqrt(gamma) A,
    sqrt(gamma) B).  Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from
    P0 = Q until the sup-norm update is below ``tol``; the returned gain
    satisfies u = -K_gain x in the original (undiscounted) coordinates.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    At = np.sqrt(gamma) * A
    Bt = np.sqrt(gamma) * B

    P = Q.copy()
    for _ in range(max_iters):
        S = R + Bt.T @ P @ Bt
        K = np.linalg.solve(S, Bt.T @ P @ At)
        next_P = Q + At.T @ P @ At - At.T @ P @ Bt @ K
        next_P = 0.5 * (next_P + next_P.T)
        if np.abs(next_P - P).max() <= tol:
            P = next_P
            break
        P = next_P
    else:
        raise NoConvergence(f"Riccati fixed point did not converge in {max_iters} iterations")

    res = dare_residual(P, A, B, Q, R, gamma)
    if res > 1e-10:
        raise NoConvergence(f"Riccati residual {res:.3e} exceeds 1e-10")
    # Optimal feedback of the discounted problem: u = -(R + g B'PB)^-1 g B'PA x,
    # which in scaled quantities is (R + Bt'P Bt)^-1 Bt'P At with no extra factor.
    S = R + Bt.T @ P @ Bt
    K_gain = np.linalg.solve(S, Bt.T @ P @ At)
    return RiccatiSolution(P=P, K_gain=K_gain, residual=res)


# ---------------------------------------------------------------------------
# Gridded value iteration


class GridValueFunction:
    """Values on a rectangular grid with a multilinear interpolation evaluator."""

    def __init__(self, lo, hi, counts, values, clamped_fraction=0.0):
        self.lo = np.asarray(lo, dtype=float).reshape(-1)
        self.hi = np.asarray(hi, dtype=float).reshape(-1)
        self.counts = np.asarray(counts, dtype=int).reshape(-1)
        self.values = np.asarray(values, dtype=float).reshape(tuple(self.counts))
        self.clamped_fraction = float(clamped_fraction)
        self.steps = (self.hi - self.lo) / (self.counts - 1)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    def axes(self):
        return [np.linspace(self.lo[d], self.hi[d], self.counts[d]) for d in range(self.ndim)]

    def evaluate(self, x) -> float:
        return float(self.evaluate_batch(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def evaluate_batch(self, X) -> np.ndarray:
        """Multilinear interpolation; queries outside the box are clamped to it."""
        X = np.asarray(X, dtype=float)
        return _interp_multilinear(self.values, self.lo, self.steps, self.counts, X)


def _interp_multilinear(values, lo, steps, counts, X):
    X = np.clip(X, lo, lo + steps * (counts - 1))
    rel = (X - lo) / steps
    base = np.floor(rel).astype(int)
    base = np.minimum(base, counts - 2)
    base = np.maximum(base, 0)
    frac = rel - base
    d = len(counts)
    out = np.zeros(len(X))
    for corner in itertools.product((0, 1), repeat=d):
        idx = tuple(base[:, k] + corner[k] for k in range(d))
        w = np.ones(len(X))
        for k in range(d):
            w = w * (frac[:, k] if corner[k] else 1.0 - frac[:, k])
        out += w * values[idx]
    return out


class GridBellmanOperator:
    """One synchronous Bellman sweep on a fixed state/input grid.

    Precomputes, for every (grid state, grid input) pair, the stage cost
    and the interpolation stencil of the successor state; a sweep is then
    a gather plus a min-reduction.  Successors leaving the box are clamped
    to its boundary and flagged.
    """

    def __init__(self, spec: ProblemSpec, lo, hi, state_pts, input_pts):
        if spec.n > 3:
            raise ValidationError("grid value iteration is limited to n <= 3")
        self.spec = spec
        self.lo = np.asarray(lo, dtype=float).reshape(-1)
        self.hi = np.asarray(hi, dtype=float).reshape(-1)
        self.counts = np.full(spec.n, int(state_pts)) if np.isscalar(state_pts) else np.asarray(state_pts, int)
        self.steps = (self.hi - self.lo) / (self.counts - 1)

        axes = [np.linspace(self.lo[d], self.hi[d], self.counts[d]) for d in range(spec.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.states = np.stack([m.reshape(-1) for m in mesh], axis=1)  # (S, n)

        u_box = spec.constraints.derived_box(np.zeros(spec.n))
        if u_box is None:
            raise ValidationError("grid value iteration needs box-shaped input constraints")
        u_lo, u_hi = u_box
        u_counts = np.full(spec.m, int(input_pts)) if np.isscalar(input_pts) else np.asarray(input_pts, int)
        u_axes = [np.linspace(u_lo[d], u_hi[d], u_counts[d]) for d in range(spec.m)]
        u_mesh = np.meshgrid(*u_axes, indexing="ij")
        self.inputs = np.stack([m.reshape(-1) for m in u_mesh], axis=1)  # (U, m)

        S, U = len(self.states), len(self.inputs)
        drift = spec.dynamics.drift(self.states)  # (S, n)
        Fu = spec.dynamics.input_matrix(self.states)  # (S, n, m) or (n, m) broadcast
        if Fu.ndim == 2:
            succ = drift[:, None, :] + np.einsum("nm,um->un", Fu, self.inputs)[None, :, :]
        else:
            succ = drift[:, None, :] + np.einsum("snm,um->sun", Fu, self.inputs)
        succ = succ.reshape(S * U, spec.n)

        clipped = np.clip(succ, self.lo, self.hi)
        self.clamped_fraction = float(np.mean(np.any(clipped != succ, axis=1)))
        rel = (clipped - self.lo) / self.steps
        base = np.minimum(np.floor(rel).astype(int), self.counts - 2)
        base = np.maximum(base, 0)
        frac = rel - base

        d = spec.n
        n_corners = 2**d
        flat_idx = np.zeros((S * U, n_corners), dtype=np.int64)
        weights = np.zeros((S * U, n_corners))
        strides = np.ones(d, dtype=np.int64)
        for k in range(d - 2, -1, -1):
            strides[k] = strides[k + 1] * self.counts[k + 1]
        for ci, corner in enumerate(itertools.product((0, 1), repeat=d)):
            idx = np.zeros(S * U, dtype=np.int64)
            w = np.ones(S * U)
            for k in range(d):
                idx += (base[:, k] + corner[k]) * strides[k]
                w *= frac[:, k] if corner[k] else 1.0 - frac[:, k]
            flat_idx[:, ci] = idx
            weights[:, ci] = w
        self._flat_idx = flat_idx
        self._weights = weights

        # stage costs for every (state, input) pair
        cost = np.zeros((S, U))
        phis = spec.cost.phi_batch(self.states)  # (S, J)
        r_mat = spec.cost.r_matrix()
        R_stk = spec.cost.R_stack()
        u_quad = 0.5 * np.einsum("jab,ua,ub->uj", R_stk, self.inputs, self.inputs) + self.inputs @ r_mat.T  # (U, J)
        owners = spec.cost.owners
        for k in range(spec.cost.K):
            sel = owners == k
            cost += np.max(phis[:, None, sel] + u_quad[None, :, sel], axis=2)
        self._cost = cost  # (S, U)

    def sweep(self, values: np.ndarray) -> np.ndarray:
        """Apply the grid Bellman operator once to a flat or nd value array."""
        flat = np.asarray(values, dtype=float).reshape(-1)
        interp = (flat[self._flat_idx] * self._weights).sum(axis=1)  # (S*U,)
        q = self._cost + self.spec.gamma * interp.reshape(self._cost.shape)
        out = q.min(axis=1)
        return out.reshape(np.asarray(values).shape)


def grid_value_iteration(
    spec: ProblemSpec,
    box,
    state_pts: int = 51,
    input_pts: int = 11,
    stop_tol: float = 1e-3,
    max_sweeps: int = 100000,
) -> GridValueFunction:
    """Value iteration from zero on a rectangular grid.

    ``box`` is a pair (lo, hi) of per-axis state bounds (scalars are
    broadcast).  Sweeps are synchronous; iteration stops when the maximum
    absolute change in value falls below ``stop_tol``.
    """
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (spec.n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (spec.n,)).copy()
    op = GridBellmanOperator(spec, lo, hi, state_pts, input_pts)
    values = np.zeros(np.prod(op.counts))
    for _ in range(max_sweeps):
        new = op.sweep(values)
        delta = np.abs(new - values).max()
        values = new
        if delta < stop_tol:
            break
    else:
        raise NoConvergence(f"grid value iteration did not reach {stop_tol} in {max_sweeps} sweeps")
    return GridValueFunction(lo, hi, op.counts, values, clamped_fraction=op.clamped_fraction)


# ---------------------------------------------------------------------------
# Flat binary serialization: little-endian header (ndim; per-dim lo, hi,
# count) followed by the value payload as float64.

_MAGIC = b"GVF1"


def save_grid_value_function(gvf: GridValueFunction, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", gvf.ndim))
        for d in range(gvf.ndim):
            fh.write(struct.pack("<ddq", gvf.lo[d], gvf.hi[d], int(gvf.counts[d])))
        fh.write(gvf.values.astype("<f8").tobytes(order="C"))


def load_grid_value_function(path) -> GridValueFunction:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValidationError("not a grid value function file")
        (ndim,) = struct.unpack("<q", fh.read(8))
        lo, hi, counts = [], [], []
        for _ in range(ndim):
            a, b, c = struct.unpack("<ddq", fh.read(24))
            lo.append(a)
            hi.append(b)
            counts.append(c)
        payload = fh.read()
        values = np.frombuffer(payload, dtype="<f8").astype(float)
    return GridValueFunction(lo, hi, counts, values.reshape(tuple(counts)))
