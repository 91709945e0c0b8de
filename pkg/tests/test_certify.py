import numpy as np
import pytest

import gddp
from gddp import (
    CertMethod,
    GddpConfig,
    LowerBound,
    Picker,
    QuadraticForm,
    Trajectory,
    ValueApprox,
    accumulate_certificate_terms,
    certificate_to_dict,
    certify_m1,
    certify_m2,
    detour_cost,
    greedy_action,
    rollout_greedy,
    tail_completion,
)

from conftest import make_scalar_lqr, widen_box, worked_value_approx


@pytest.fixture
def riccati_scalar():
    spec = widen_box(make_scalar_lqr(), 1e3)
    ric = gddp.solve_dare([[0.5]], [[1.0]], [[1.0]], [[1.0]], 1.0)
    V = ValueApprox.initial(spec)
    V.append(LowerBound.from_quadratic(1, QuadraticForm(ric.P, np.zeros(1), 0.0)))
    return spec, V, ric


class TestGreedyAction:
    def test_worked_case(self, scalar_lqr, worked_V):
        V = ValueApprox(1, spec=scalar_lqr, bounds=worked_V.bounds[:2])
        u, x_plus, j_p = greedy_action(scalar_lqr, V, [2.0])
        assert u == pytest.approx([-0.5], abs=1e-6)
        assert x_plus == pytest.approx([0.5], abs=1e-6)
        assert j_p == pytest.approx(2.25, abs=1e-6)

    def test_matches_lqr_gain(self, riccati_scalar):
        spec, V, ric = riccati_scalar
        for x in [0.1, -0.4, 0.25]:
            u, _, _ = greedy_action(spec, V, [x])
            assert u[0] == pytest.approx(-float(ric.K_gain[0, 0]) * x, abs=1e-4)

    def test_equilibrium(self, scalar_lqr):
        u, x_plus, j_p = greedy_action(scalar_lqr, ValueApprox.initial(scalar_lqr), [0.0])
        assert u == pytest.approx([0.0], abs=1e-6)
        assert j_p == pytest.approx(0.0, abs=1e-8)


class TestDetourCost:
    def test_zero_for_greedy_successor(self, scalar_lqr, worked_V):
        V = ValueApprox(1, spec=scalar_lqr, bounds=worked_V.bounds[:2])
        theta = detour_cost(scalar_lqr, V, [2.0], [0.5])
        assert theta == pytest.approx(0.0, abs=1e-6)

    def test_forced_successor(self, scalar_lqr, worked_V):
        V = ValueApprox(1, spec=scalar_lqr, bounds=worked_V.bounds[:2])
        theta = detour_cost(scalar_lqr, V, [2.0], [1.0])
        assert theta == pytest.approx(0.25, abs=1e-6)

    def test_unreachable(self, scalar_lqr, worked_V):
        with pytest.raises(gddp.Unreachable):
            detour_cost(scalar_lqr, worked_V, [2.0], [10.0])

    def test_nonnegative_on_random_targets(self):
        spec = gddp.generate_random_system(gddp.RandomSystemConfig(n=2, m=1, seed=6))
        rng = np.random.default_rng(6)
        result = gddp.run(spec, rng.normal(0, 5, size=(3, 2)), GddpConfig(delta=1e-3))
        V = result.V_hat
        checked = 0
        for _ in range(20):
            x = rng.normal(0, 2, size=2)
            u = rng.uniform(-1, 1, size=1)
            y = gddp.eval_dynamics(spec, x, u)  # reachable by construction
            theta = detour_cost(spec, V, x, y)
            assert theta >= -1e-8
            checked += 1
        assert checked == 20

    def test_multi_input_slice(self):
        # m > rank(W): input freedom remains after pinning the successor
        spec = gddp.ProblemSpec(
            n=1,
            m=2,
            gamma=1.0,
            dynamics=gddp.DynamicsModel.linear([[0.5]], [[1.0, 1.0]]),
            cost=gddp.StageCost(
                1,
                (
                    gddp.CostTerm(
                        0, QuadraticForm([[1.0]], [0.0], 0.0), [0.0, 0.0], [[1.0, 0.0], [0.0, 4.0]]
                    ),
                ),
            ),
            constraints=gddp.InputConstraintSet.box([-1.0, -1.0], [1.0, 1.0], 1),
            class_tag=gddp.ProblemClass.CONVEX_QUADRATIC,
        )
        V = ValueApprox.initial(spec)
        # reach y = 0.5 from x = 1: u1 + u2 = 0; optimal split minimizes
        # (u1^2 + 4 u2^2)/2 subject to u1 + u2 = 0 -> u1 = -u2, cost 2.5 u2^2 -> u = 0
        theta = detour_cost(spec, V, [1.0], [0.5])
        j_free = greedy_action(spec, V, [1.0])[2]
        assert theta == pytest.approx(0.5 + 0.0 - j_free, abs=1e-6)


class TestRollout:
    def test_contracts_toward_origin(self, riccati_scalar):
        spec, V, _ = riccati_scalar
        traj = rollout_greedy(spec, V, [2.0], 20)
        mags = [abs(float(s[0])) for s in traj.states]
        assert all(b <= a + 1e-12 for a, b in zip(mags, mags[1:]))
        assert mags[-1] < 0.05

    def test_origin_stays_fixed(self, scalar_lqr):
        traj = rollout_greedy(scalar_lqr, ValueApprox.initial(scalar_lqr), [0.0], 5)
        assert all(abs(float(s[0])) <= 1e-9 for s in traj.states)
        assert np.all(np.abs(traj.bellman_errors) <= 1e-8)

    def test_records_errors_and_costs(self, scalar_lqr, worked_V):
        traj = rollout_greedy(scalar_lqr, worked_V, [2.0], 4)
        assert traj.horizon == 4
        assert len(traj.bellman_errors) == 4
        assert len(traj.stage_costs) == 4
        assert traj.feasible


class TestTailCompletion:
    def test_scalar_one_step(self, scalar_lqr):
        inputs = tail_completion(scalar_lqr, [0.3], [0.0])
        assert inputs.shape == (1, 1)
        assert inputs[0, 0] == pytest.approx(-0.15, abs=1e-12)

    def test_already_at_anchor(self, scalar_lqr):
        inputs = tail_completion(scalar_lqr, [0.0], [0.0])
        assert np.allclose(inputs, 0.0)

    def test_two_state_exact(self):
        spec = gddp.generate_random_system(gddp.RandomSystemConfig(n=2, m=1, seed=12))
        spec = widen_box(spec, 1e6)
        rng = np.random.default_rng(12)
        for _ in range(5):
            x = rng.normal(0, 0.5, size=2)
            inputs = tail_completion(spec, x, np.zeros(2))
            state = x
            for u in inputs:
                state = gddp.eval_dynamics(spec, state, u)
            assert np.linalg.norm(state) <= 1e-10

    def test_box_violation_raises(self, scalar_lqr):
        with pytest.raises(gddp.BoxViolated) as info:
            tail_completion(scalar_lqr, [10.0], [0.0])  # needs u = -5
        assert info.value.inputs is not None


class TestCertifyM1:
    def test_zero_state(self, scalar_lqr):
        cert = certify_m1(scalar_lqr, ValueApprox.initial(scalar_lqr), [0.0])
        assert cert.lower == 0.0
        assert cert.upper == 0.0

    def test_exact_value_gives_tight_gap(self, riccati_scalar):
        spec, V, ric = riccati_scalar
        cert = certify_m1(spec, V, [2.0], max_steps=30)
        vstar = 0.5 * float(ric.P[0, 0]) * 4.0
        assert cert.lower == pytest.approx(vstar, abs=1e-9)
        assert cert.gap <= 1e-4 * (1 + abs(vstar))
        assert cert.lower - 1e-6 <= vstar <= cert.upper

    def test_converged_run_sandwiches_truth(self, scalar_lqr):
        result = gddp.run(
            scalar_lqr, [[2.0], [1.0], [-1.5]], GddpConfig(delta=1e-4, picker=Picker.MAX_BELLMAN_ERROR)
        )
        ric = gddp.solve_dare([[0.5]], [[1.0]], [[1.0]], [[1.0]], 1.0)
        cert = certify_m1(scalar_lqr, result.V_hat, [2.0], max_steps=30)
        vstar = 0.5 * float(ric.P[0, 0]) * 4.0  # box inactive from x=2
        assert cert.lower - 1e-6 <= vstar <= cert.upper
        assert cert.gap <= 0.05 * cert.lower  # a few percent at convergence
        assert cert.method is CertMethod.M1

    def test_accumulation_is_reproducible(self, riccati_scalar):
        spec, V, _ = riccati_scalar
        cert = certify_m1(spec, V, [1.0], max_steps=20)
        total = accumulate_certificate_terms(cert.gamma, cert.per_step_theta, cert.per_step_eps)
        assert cert.upper == cert.lower + total  # bit-level

    def test_refuses_non_equilibrium_anchor(self, scalar_lqr):
        with pytest.raises(gddp.ValidationError):
            certify_m1(scalar_lqr, ValueApprox.initial(scalar_lqr), [2.0], anchor=[1.0])

    def test_thetas_zero_on_greedy_steps(self, riccati_scalar):
        spec, V, _ = riccati_scalar
        cert = certify_m1(spec, V, [2.0], max_steps=12)
        # exactly the final (tail) step may carry a detour cost
        assert np.all(cert.per_step_theta[:-1] == 0.0)


class TestCertifyM2:
    def test_greedy_waypoints_match_m1_scale(self, riccati_scalar):
        spec, V, _ = riccati_scalar
        traj = rollout_greedy(spec, V, [1.0], 25)
        traj.states[-1] = np.zeros(1)  # treat the tail as the anchor
        cert = certify_m2(spec, V, traj)
        assert cert.method is CertMethod.MIXED
        assert cert.upper >= cert.lower
        assert cert.gap <= 2e-2  # near-exact value: all thetas and errors tiny

    def test_three_waypoint_path(self, scalar_lqr, worked_V):
        V = ValueApprox(1, spec=scalar_lqr, bounds=worked_V.bounds[:2])
        # 2 -> 1 -> 0.5 -> 0 is dynamically feasible: u = y - 0.5 x in [-1, 1]
        states = [np.array([2.0]), np.array([1.0]), np.array([0.5]), np.array([0.0])]
        inputs = [np.array([0.0]), np.array([0.0]), np.array([-0.25])]
        costs = np.array([gddp.eval_stage_cost(scalar_lqr, s, u) for s, u in zip(states, inputs)])
        traj = Trajectory(states=states, inputs=inputs, stage_costs=costs, feasible=True)
        cert = certify_m2(scalar_lqr, V, traj)
        assert np.all(cert.per_step_theta >= 0.0)
        assert np.isfinite(cert.upper)
        assert cert.upper >= cert.lower
        total = accumulate_certificate_terms(cert.gamma, cert.per_step_theta, cert.per_step_eps)
        assert cert.upper == cert.lower + total

    def test_unreachable_jump(self, scalar_lqr, worked_V):
        states = [np.array([2.0]), np.array([10.0]), np.array([0.0])]
        inputs = [np.array([9.0]), np.array([-5.0])]
        traj = Trajectory(states=states, inputs=inputs, stage_costs=np.zeros(2), feasible=False)
        with pytest.raises(gddp.Unreachable):
            certify_m2(scalar_lqr, worked_V, traj)


class TestCertificateJson:
    def test_shape(self, riccati_scalar):
        spec, V, _ = riccati_scalar
        cert = certify_m1(spec, V, [1.0], max_steps=10)
        data = certificate_to_dict(cert)
        assert set(data) == {"query_state", "lower", "upper", "method", "steps"}
        assert data["method"] == "M1"
        assert len(data["steps"]) == len(cert.per_step_eps)
        assert {"x", "u", "theta", "eps"} <= set(data["steps"][0])
