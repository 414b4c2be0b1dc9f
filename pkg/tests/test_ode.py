import math

import numpy as np
import pytest
from scipy.linalg import expm

from rbflow.controls import ConstantControl, PiecewiseConstantControl
from rbflow.errors import AlignmentError, BlowUpError, DomainError
from rbflow.field import NeuronField
from rbflow.ode import (
    DropoutSchedule,
    EvalCounter,
    SolverConfig,
    coupled_error_different_controls,
    fit_loglog_slope,
    integrate,
    integrate_full,
    integrate_random,
    realization_weights,
    trajectory_error_mc,
)
from rbflow.scheme import BatchScheme


def linear_relu_field(M, c, shift=50.0):
    """ReLU field equal to ``M x + c`` wherever every pre-activation stays positive.

    Neuron ``k < d`` is ``e_k relu(<M_k, x> + shift)``; the last neuron is constant
    and cancels the shifts, so on the region explored by the tests the field is affine.
    """
    d = M.shape[0]
    f = NeuronField(d, d + 1, "relu")
    W = np.vstack([np.eye(d), (c - shift) / shift])
    A = np.vstack([M, np.zeros((1, d))])
    b = np.full(d + 1, shift)
    return f, f.pack(W, A, b)


def constant_neurons():
    """p=2, d=2 field with constant neurons f_1 = (1, 0), f_2 = (0, 1)."""
    f = NeuronField(2, 2, "relu")
    return f, f.pack(np.eye(2), np.zeros((2, 2)), np.ones(2))


def smooth_instance(seed=0, T=1.0):
    f = NeuronField(2, 6, "tanh")
    rng = np.random.default_rng(seed)
    return f, ConstantControl(f.random_params(rng), T), rng.normal(size=2)


class TestSolverConfig:
    def test_grid(self):
        s = SolverConfig("rk4", 0.25, 1.0)
        assert s.n_steps == 4
        np.testing.assert_array_equal(s.times, [0, 0.25, 0.5, 0.75, 1.0])

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            SolverConfig("euler", 0.3, 1.0)

    def test_dt_larger_than_T(self):
        with pytest.raises(DomainError):
            SolverConfig("euler", 2.0, 1.0)


class TestIntegrateFull:
    def test_zero_field(self):
        f = NeuronField(2, 3, "tanh")
        traj = integrate_full(f, ConstantControl(np.zeros(f.n_params), 1.0), [0.3, -2.0], SolverConfig("rk4", 0.1, 1.0))
        np.testing.assert_array_equal(traj.states, np.tile([0.3, -2.0], (11, 1)))

    def test_scalar_exponential(self):
        f = NeuronField(1, 1, "relu")
        theta = f.pack([[1.0]], [[1.0]], [0.0])
        traj = integrate_full(f, ConstantControl(theta, 1.0), [0.7], SolverConfig("rk4", 0.01, 1.0))
        np.testing.assert_allclose(traj.final, [math.e * 0.7], atol=1e-8)

    @pytest.mark.parametrize("method,tol", [("euler", 2e-2), ("rk2", 1e-4), ("rk4", 1e-9)])
    def test_linear_system_matches_matrix_exponential(self, method, tol):
        M = np.array([[-0.3, 0.8], [-0.5, 0.1]])
        c = np.array([0.2, -0.1])
        f, theta = linear_relu_field(M, c)
        x0 = np.array([0.4, 0.9])
        traj = integrate_full(f, ConstantControl(theta, 1.0), x0, SolverConfig(method, 1 / 64, 1.0))
        # augmented exponential handles the affine term
        aug = np.zeros((3, 3))
        aug[:2, :2], aug[:2, 2] = M, c
        exact = (expm(aug) @ np.append(x0, 1.0))[:2]
        np.testing.assert_allclose(traj.final, exact, atol=tol)

    @pytest.mark.parametrize("method,order,tol", [("euler", 1, 0.2), ("rk2", 2, 0.3), ("rk4", 4, 0.5)])
    def test_order_of_accuracy(self, method, order, tol):
        f, ctrl, x0 = smooth_instance(3)
        ref = integrate_full(f, ctrl, x0, SolverConfig("rk4", 1 / 4096, 1.0)).final
        dts = [1 / 8, 1 / 16, 1 / 32, 1 / 64] if method != "euler" else [1 / 32, 1 / 64, 1 / 128, 1 / 256]
        errs = [np.linalg.norm(integrate_full(f, ctrl, x0, SolverConfig(method, dt, 1.0)).final - ref) for dt in dts]
        assert abs(fit_loglog_slope(dts, errs).slope - order) <= tol

    def test_piecewise_control_switches_on_grid(self):
        f, theta = constant_neurons()
        W, A, b = f.unpack(theta)
        ctrl = PiecewiseConstantControl.uniform(np.stack([theta, f.pack(3 * W, A, b)]), 1.0)
        traj = integrate_full(f, ctrl, [0.0, 0.0], SolverConfig("rk4", 0.25, 1.0))
        # rate 1 on [0, 1/2) and 3 on [1/2, 1]: exact for constant-in-x fields
        np.testing.assert_allclose(traj.final, [2.0, 2.0], atol=1e-14)

    def test_blow_up(self):
        f = NeuronField(1, 1, "relu")
        theta = f.pack([[50.0]], [[1.0]], [0.0])
        with pytest.raises(BlowUpError) as exc:
            integrate_full(f, ConstantControl(theta, 1.0), [1.0], SolverConfig("euler", 0.01, 1.0))
        assert exc.value.step > 0

    def test_horizon_mismatch(self):
        f, ctrl, x0 = smooth_instance()
        with pytest.raises(AlignmentError):
            integrate_full(f, ctrl, x0, SolverConfig("rk4", 0.1, 2.0))

    def test_batched_initial_states(self):
        f, ctrl, _ = smooth_instance()
        X0 = np.random.default_rng(1).normal(size=(5, 2))
        solver = SolverConfig("rk4", 0.05, 1.0)
        batched = integrate_full(f, ctrl, X0, solver).final
        single = np.array([integrate_full(f, ctrl, x, solver).final for x in X0])
        np.testing.assert_allclose(batched, single, rtol=1e-13)

    def test_counter(self):
        f, ctrl, x0 = smooth_instance()
        counter = EvalCounter()
        integrate_full(f, ctrl, x0, SolverConfig("rk4", 0.1, 1.0), counter)
        assert counter.neuron_evals == 10 * 4 * f.p


class TestIntegrateRandom:
    def test_single_batch_is_bit_identical(self):
        f, ctrl, x0 = smooth_instance()
        solver = SolverConfig("rk4", 1 / 32, 1.0)
        s = BatchScheme.single(f.p)
        sched = DropoutSchedule.sample(s, 1.0, 1 / 8, 0)
        np.testing.assert_array_equal(integrate_random(f, s, ctrl, x0, sched, solver).states,
                                      integrate_full(f, ctrl, x0, solver).states)

    def test_hand_integrated_pick_one(self):
        f, theta = constant_neurons()
        s = BatchScheme.pick_one(2)
        T = 2.0
        sched = DropoutSchedule(s, T / 2, np.array([[True, False], [False, True]]))
        traj = integrate_random(f, s, ConstantControl(theta, T), [0.5, 0.5], sched, SolverConfig("euler", 0.25, T))
        np.testing.assert_allclose(traj.final - [0.5, 0.5], [T, T], atol=1e-14)

    def test_misaligned_schedule(self):
        f, ctrl, x0 = smooth_instance()
        s = BatchScheme.pick_one(f.p)
        sched = DropoutSchedule.sample(s, 1.0, 0.25, 0)
        with pytest.raises(AlignmentError):
            integrate_random(f, s, ctrl, x0, sched, SolverConfig("rk4", 0.1, 1.0))

    def test_schedule_reproducible(self):
        s = BatchScheme.balanced(6, 2)
        a = DropoutSchedule.sample(s, 1.0, 1 / 16, 42, 3)
        b = DropoutSchedule.sample(s, 1.0, 1 / 16, 42, 3)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert a.interval_index(0.0) == 0 and a.interval_index(1.0) == 15
        assert a.interval_index(1 / 16) == 1

    def test_mean_endpoint_near_full(self):
        f, ctrl, x0 = smooth_instance(4)
        ctrl = ctrl * 0.5
        solver = SolverConfig("rk4", 1 / 64, 1.0)
        s = BatchScheme.balanced(f.p, 3)
        W = realization_weights(s, 1 / 64, solver, 1000, 7)
        ends = integrate(f, ctrl, np.broadcast_to(x0, (1000, 2)), solver, W).final
        full = integrate_full(f, ctrl, x0, solver).final
        mc = trajectory_error_mc(f, s, ctrl, x0, 1 / 64, solver, 200, 8)
        # bias is at most the RMS error; 3 standard errors cover the sampling noise
        se = ends.std(axis=0, ddof=1) / math.sqrt(len(ends))
        assert np.all(np.abs(ends.mean(axis=0) - full) <= 3 * se + math.sqrt(mc.mean_sq_sup_error))


class TestErrorEstimates:
    def test_single_batch_zero(self):
        f, ctrl, x0 = smooth_instance()
        mc = trajectory_error_mc(f, BatchScheme.single(f.p), ctrl, x0, 0.25, SolverConfig("rk4", 1 / 16, 1.0), 5, 0)
        assert mc.mean_sq_sup_error == 0.0 and mc.std_error == 0.0

    def test_pick_one_one_interval(self):
        f, theta = constant_neurons()
        T = 1.5
        mc = trajectory_error_mc(f, BatchScheme.pick_one(2), ConstantControl(theta, T), [0.0, 0.0], T,
                                 SolverConfig("euler", T / 4, T), 8, 0)
        # |t (f1 + f2) - 2 t f_j|^2 peaks at t = T with value 2 T^2 for either batch
        np.testing.assert_allclose(mc.samples, 2 * T * T, rtol=1e-13)
        assert mc.std_error == pytest.approx(0.0, abs=1e-12)

    def test_error_trend_in_h(self):
        f, ctrl, x0 = smooth_instance(5, T=2.0)
        solver = SolverConfig("rk4", 1 / 128, 2.0)
        s = BatchScheme.disjoint(f.p, 2)
        hs = [2 / 4, 2 / 8, 2 / 16, 2 / 32, 2 / 64]
        errs = [trajectory_error_mc(f, s, ctrl, x0, h, solver, 40, 11).mean_sq_sup_error for h in hs]
        assert fit_loglog_slope(hs, errs).slope > 0.5
        assert errs[-1] < errs[0]

    def test_needs_two_realizations(self):
        f, ctrl, x0 = smooth_instance()
        with pytest.raises(DomainError):
            trajectory_error_mc(f, BatchScheme.pick_one(f.p), ctrl, x0, 0.5, SolverConfig("rk4", 0.25, 1.0), 1, 0)


class TestLogLogFit:
    def test_exact_power_laws(self):
        h = np.array([0.1, 0.05, 0.025, 0.0125])
        assert fit_loglog_slope(h, 3 * h).slope == pytest.approx(1.0, abs=1e-12)
        assert fit_loglog_slope(h, 3 * h**2).slope == pytest.approx(2.0, abs=1e-12)

    def test_noisy_linear(self):
        rng = np.random.default_rng(0)
        h = 2.0 ** -np.arange(8)
        err = h * (1 + 0.2 * rng.uniform(-1, 1, size=8))
        assert 0.7 <= fit_loglog_slope(h, err).slope <= 1.3

    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            fit_loglog_slope([1, 2, 3], [1, 0, 2])


class TestCoupledError:
    def test_equal_controls_reduce_to_mc(self):
        f, ctrl, x0 = smooth_instance()
        s = BatchScheme.pick_one(f.p)
        solver = SolverConfig("rk4", 1 / 16, 1.0)
        ce = coupled_error_different_controls(f, s, ctrl, ctrl, x0, 0.25, solver, 6, 2)
        mc = trajectory_error_mc(f, s, ctrl, x0, 0.25, solver, 6, 2)
        assert ce.mean_sq_sup_error == mc.mean_sq_sup_error
        assert ce.control_l1_distance == 0.0

    def test_superquadratic_growth_in_control_gap(self):
        f = NeuronField(1, 1, "relu")
        base = f.pack([[1.0]], [[1.0]], [0.0])
        solver = SolverConfig("rk4", 1 / 64, 1.0)
        s = BatchScheme.single(1)

        def err(c):
            other = ConstantControl(f.pack([[c]], [[1.0]], [0.0]), 1.0)
            return coupled_error_different_controls(f, s, ConstantControl(base, 1.0), other, [1.0], 0.5, solver, 2, 0)

        e1, e2 = err(1.1), err(1.2)
        assert e2.control_l1_distance == pytest.approx(2 * e1.control_l1_distance)
        assert e2.mean_sq_sup_error >= 4 * e1.mean_sq_sup_error
