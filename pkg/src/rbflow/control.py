"""Supervised training as optimal control of the (masked) neural ODE.

The cost is ``J = alpha/2 |theta|_{L2}^2 + sum_m g_m(x_m(T)) + beta sum_m int l_m(x_m(t)) dt``
with ``g_m = l_m = |x - y_m|^2``.  Gradients come from the costate
``p' = -(dF/dx)^T p - beta grad l``, ``p(T) = grad g``, integrated backwards with RK4
on the forward grid.  When a dropout schedule is given, the forward and backward
passes use the same masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np

from .controls import Control
from .errors import AlignmentError, BlowUpError, DomainError, StepSizeError
from .field import FieldMode
from .ode import DropoutSchedule, Method, SolverConfig, Trajectory, integrate

INCREASE_RTOL = 1e-10
DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True, eq=False)
class CostConfig:
    alpha: float
    beta: float
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if not self.alpha > 0 or self.beta < 0:
            raise DomainError("need alpha > 0 and beta >= 0")
        if X.shape != Y.shape or X.shape[0] == 0:
            raise DomainError("dataset must be a nonempty set of (x, y) pairs of equal shape")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n_data(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True, eq=False)
class AdjointTrajectory:
    times: np.ndarray
    costates: np.ndarray  # (n + 1, n_data, d)


@dataclass
class TrainState:
    control: Control
    iteration: int = 0
    history: list = dc_field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "converged": self.converged,
            "history": [[int(k), float(J), float(g)] for k, J, g in self.history],
            "control": self.control.to_dict(),
        }


def _step_weights(schedule: DropoutSchedule | None, solver: SolverConfig):
    return None if schedule is None else schedule.step_weights(solver)


def forward(field, cost: CostConfig, control: Control, solver: SolverConfig, schedule=None) -> Trajectory:
    """States of every datum, shape ``(n + 1, n_data, d)``."""
    return integrate(field, control, cost.X, solver, _step_weights(schedule, solver))


def cost_from_trajectory(cost: CostConfig, control: Control, traj: Trajectory) -> float:
    sq = ((traj.states - cost.Y) ** 2).sum(axis=-1).sum(axis=-1)
    terminal = float(sq[-1])
    running = float(np.trapezoid(sq, traj.times))
    return 0.5 * cost.alpha * control.l2_norm_sq() + terminal + cost.beta * running


def evaluate_cost(field, cost: CostConfig, control: Control, solver: SolverConfig, schedule=None) -> float:
    """``J`` (no schedule) or its masked counterpart (with schedule).

    The Tikhonov term is the exact L2 norm of the control class; the running
    cost uses the trapezoid rule on the solver grid.
    """
    return cost_from_trajectory(cost, control, forward(field, cost, control, solver, schedule))


def integrate_adjoint(field, cost: CostConfig, control: Control, traj: Trajectory, solver: SolverConfig,
                      schedule=None) -> AdjointTrajectory:
    """Backward RK4 for the costates; forward states at half steps are linearly interpolated."""
    if traj.states.shape[0] != solver.n_steps + 1:
        raise AlignmentError("forward trajectory is not on the solver grid")
    W = _step_weights(schedule, solver)
    X, Y, beta = traj.states, cost.Y, cost.beta
    times, dt = traj.times, solver.dt
    n = solver.n_steps
    P = np.empty_like(X)
    p = 2.0 * (X[-1] - Y)
    P[-1] = p

    def rhs(x, th, w, pk):
        return -field.vjp_x(x, th, pk, w) - 2.0 * beta * (x - Y)

    for k in range(n - 1, -1, -1):
        w = None if W is None else W[k]
        t0, t1 = times[k], times[k + 1]
        x0, x1 = X[k], X[k + 1]
        xm = 0.5 * (x0 + x1)
        th1, thm, th0 = control(t1, left=True), control(0.5 * (t0 + t1)), control(t0)
        # integrate s = T - t forward: dp/ds = -rhs
        k1 = rhs(x1, th1, w, p)
        k2 = rhs(xm, thm, w, p - 0.5 * dt * k1)
        k3 = rhs(xm, thm, w, p - 0.5 * dt * k2)
        k4 = rhs(x0, th0, w, p - dt * k3)
        p = p - dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(p)):
            raise DomainError(f"costate became non-finite at step {k}")
        P[k] = p
    return AdjointTrajectory(times, P)


def _pullback_sum(field, control, traj, adj, solver, W):
    """``int_0^T (d theta_t / d params)^T sum_m (grad_theta F)^T p_m dt`` by per-step trapezoid."""
    times, dt = traj.times, solver.dt
    X, P = traj.states, adj.costates
    acc = np.zeros_like(control.params)
    for k in range(solver.n_steps):
        w = None if W is None else W[k]
        t0, t1 = times[k], times[k + 1]
        th0, th1 = control(t0), control(t1, left=True)
        g0 = field.grad_theta_transpose_apply(X[k], th0, P[k], w).sum(axis=0)
        g1 = field.grad_theta_transpose_apply(X[k + 1], th1, P[k + 1], w).sum(axis=0)
        acc += 0.5 * dt * (control.pullback(t0, g0) + control.pullback(t1, g1, left=True))
    return acc


@dataclass(frozen=True, eq=False)
class GradientResult:
    value: float
    gradient: Control
    norm: float
    trajectory: Trajectory
    adjoint: AdjointTrajectory


def value_and_gradient(field, cost: CostConfig, control: Control, solver: SolverConfig, schedule=None) -> GradientResult:
    """Cost and its L2 Riesz gradient within the control's class.

    The gradient satisfies ``<grad, delta>_{L2} = dJ[delta]`` for every ``delta``
    in the class, so for piecewise-constant controls it is the interval average
    of the pointwise gradient ``alpha theta_t + sum_m (grad_theta F)^T p_m``.
    """
    traj = forward(field, cost, control, solver, schedule)
    J = cost_from_trajectory(cost, control, traj)
    adj = integrate_adjoint(field, cost, control, traj, solver, schedule)
    W = _step_weights(schedule, solver)
    euclid = _pullback_sum(field, control, traj, adj, solver, W)
    g = cost.alpha * control.params + control.gram_solve(euclid)
    grad = control.with_params(g)
    return GradientResult(J, grad, math.sqrt(max(grad.l2_norm_sq(), 0.0)), traj, adj)


def gradient(field, cost: CostConfig, control: Control, solver: SolverConfig, schedule=None) -> Control:
    return value_and_gradient(field, cost, control, solver, schedule).gradient


def pointwise_gradient(field, cost, control, solver, schedule=None) -> np.ndarray:
    """``alpha theta_t + sum_m (grad_theta F)^T p_m`` on each grid point, shape ``(n + 1, n_params)``."""
    res = value_and_gradient(field, cost, control, solver, schedule)
    W = _step_weights(schedule, solver)
    out = []
    for k, t in enumerate(res.trajectory.times):
        w = None if W is None else W[min(k, solver.n_steps - 1)]
        th = control(t)
        g = field.grad_theta_transpose_apply(res.trajectory.states[k], th, res.adjoint.costates[k], w).sum(axis=0)
        out.append(cost.alpha * th + g)
    return np.array(out)


def train_gd(field, cost: CostConfig, init_control: Control, solver: SolverConfig, schedule=None,
             eta: float = 1e-2, iters: int = 100, stop_tol: float = 0.0, momentum: float = 0.0,
             callback=None) -> TrainState:
    """Gradient descent ``theta <- theta - eta grad J`` with the schedule held fixed.

    ``momentum`` > 0 switches to heavy-ball updates (used by the demo only).
    Raises ``StepSizeError`` after ten consecutive increases of the cost, or when
    an update makes the state blow up.
    """
    if not eta > 0:
        raise DomainError("step size must be positive")
    state = TrainState(init_control)
    control = init_control
    velocity = np.zeros_like(control.params)
    increases, last = 0, math.inf
    for k in range(iters):
        try:
            res = value_and_gradient(field, cost, control, solver, schedule)
        except BlowUpError as exc:
            if k == 0:
                raise
            raise StepSizeError(f"state blew up after {k} updates; try a smaller step than eta={eta}") from exc
        state.history.append((k, res.value, res.norm))
        if callback is not None:
            callback(k, res)
        # rounding noise at a converged iterate is not an increase
        increases = increases + 1 if res.value > last + INCREASE_RTOL * abs(last) else 0
        if increases >= DIVERGENCE_PATIENCE:
            raise StepSizeError(f"cost increased {increases} times in a row; try a smaller step than eta={eta}")
        last = res.value
        if res.norm < stop_tol:
            state.converged = True
            break
        velocity = momentum * velocity - eta * res.gradient.params
        control = control.with_params(control.params + velocity)
        state.iteration = k + 1
    else:
        res = value_and_gradient(field, cost, control, solver, schedule)
        state.history.append((iters, res.value, res.norm))
        state.converged = res.norm < stop_tol
    state.control = control
    return state


def predict_labels(field, control: Control, X, solver: SolverConfig, targets, schedule=None) -> np.ndarray:
    """Label of the target nearest to each terminal state."""
    traj = integrate(field, control, np.atleast_2d(X), solver, _step_weights(schedule, solver))
    d2 = ((traj.final[:, None, :] - np.asarray(targets)[None]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


@dataclass(frozen=True)
class GapRow:
    h: float
    gap_sq: float
    J_full: float
    J_random: float
    converged: bool


def optimal_cost_gap(field, cost: CostConfig, solver: SolverConfig, scheme, h_levels, init_control: Control,
                     eta: float, iters: int, seed: int, stop_tol: float = 0.0) -> list[GapRow]:
    """Squared gap ``|J(theta*) - J_hat(theta_hat*)|^2`` for each switching step.

    Both problems start from ``init_control``; each level draws its schedule from
    ``seed``.  ``converged`` records whether both runs met ``stop_tol``.
    """
    full = train_gd(field, cost, init_control, solver, None, eta, iters, stop_tol)
    J_full = evaluate_cost(field, cost, full.control, solver)
    rows = []
    for h in h_levels:
        sched = DropoutSchedule.sample(scheme, solver.T, h, seed)
        rnd = train_gd(field, cost, init_control, solver, sched, eta, iters, stop_tol)
        J_rnd = evaluate_cost(field, cost, rnd.control, solver, sched)
        ok = (full.converged and rnd.converged) if stop_tol > 0 else True
        rows.append(GapRow(float(h), (J_full - J_rnd) ** 2, J_full, J_rnd, ok))
    return rows


@dataclass(frozen=True)
class ControlGap:
    mean: float
    std: float
    samples: np.ndarray


def control_gap_mc(field, cost: CostConfig, solver: SolverConfig, scheme, h: float, K: int, seed: int,
                   init_control: Control, eta: float, iters: int) -> ControlGap:
    """Monte-Carlo ``E |theta* - theta_hat*|_{L2}^2`` over ``K`` schedules (realization streams of ``seed``).

    Needs a weights-only field, where ``F`` is affine in the trained parameters.
    """
    if field.mode is not FieldMode.WEIGHTS_ONLY:
        raise DomainError("control_gap_mc needs a weights-only field")
    full = train_gd(field, cost, init_control, solver, None, eta, iters).control
    gaps = []
    for k in range(K):
        sched = DropoutSchedule.sample(scheme, solver.T, h, seed, k)
        rnd = train_gd(field, cost, init_control, solver, sched, eta, iters).control
        gaps.append((full - rnd).l2_norm_sq())
    gaps = np.array(gaps)
    std = float(np.std(gaps, ddof=1)) if K > 1 else 0.0
    return ControlGap(float(gaps.mean()), std, gaps)


__all__ = [
    "AdjointTrajectory",
    "CostConfig",
    "Method",
    "TrainState",
    "control_gap_mc",
    "evaluate_cost",
    "gradient",
    "integrate_adjoint",
    "optimal_cost_gap",
    "pointwise_gradient",
    "predict_labels",
    "train_gd",
    "value_and_gradient",
]
