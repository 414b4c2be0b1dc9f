"""Fixed-step integration of the full and the randomly masked dynamics.

The integrators are duck-typed on the field: anything exposing
``eval(x, theta, weights)`` and an integer ``p`` works, which lets tests plug in
closed-form linear fields.  States may carry leading batch axes, in which case
one call integrates many initial conditions (or many dropout realizations)
at once.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np
from scipy.stats import linregress

from .controls import Control, PiecewiseConstantControl
from .errors import AlignmentError, BlowUpError, DomainError
from .scheme import BatchScheme, realization_rng

BLOWUP_NORM = 1e12


class Method(str, enum.Enum):
    EULER = "euler"
    RK2 = "rk2"
    RK4 = "rk4"


ORDER = {Method.EULER: 1, Method.RK2: 2, Method.RK4: 4}
STAGES = {Method.EULER: 1, Method.RK2: 2, Method.RK4: 4}


def _steps(T: float, dt: float, what: str) -> int:
    ratio = T / dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise AlignmentError(f"{what}: T/dt = {ratio!r} is not an integer")
    return n


@dataclass(frozen=True)
class SolverConfig:
    method: Method
    dt: float
    T: float

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (self.dt > 0 and self.T > 0) or self.dt > self.T:
            raise DomainError("need 0 < dt <= T")
        _steps(self.T, self.dt, "solver grid")

    @property
    def n_steps(self) -> int:
        return _steps(self.T, self.dt, "solver grid")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def refined(self, factor: int) -> SolverConfig:
        return SolverConfig(self.method, self.dt / factor, self.T)


@dataclass(frozen=True, eq=False)
class DropoutSchedule:
    """Active sets ``masks[k]`` held on ``[k h, (k+1) h)``, sampled i.i.d. from ``scheme``."""

    scheme: BatchScheme
    h: float
    masks: np.ndarray
    seed: int | None = None
    index: int | None = None

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[1] != self.scheme.p:
            raise DomainError("masks must have shape (n_s, p)")
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)

    @classmethod
    def sample(cls, scheme: BatchScheme, T: float, h: float, seed: int, index: int | None = None):
        """Draw ``n_s = T / h`` active sets; ``index`` selects a realization stream of ``seed``."""
        n_s = _steps(T, h, "dropout schedule")
        rng = np.random.default_rng(seed) if index is None else realization_rng(seed, index)
        return cls(scheme, h, scheme.sample_masks(rng, n_s), seed, index)

    @property
    def n_s(self) -> int:
        return self.masks.shape[0]

    @property
    def T(self) -> float:
        return self.n_s * self.h

    def interval_index(self, t: float) -> int:
        """Zero-based interval holding ``t`` (left-closed, the last interval also holds ``T``)."""
        return min(math.floor(t / self.h + 1e-9), self.n_s - 1)

    def weights(self) -> np.ndarray:
        """Per-interval Horvitz-Thompson weights, shape ``(n_s, p)``."""
        return self.scheme.mask_weights(self.masks)

    def step_weights(self, solver: SolverConfig) -> np.ndarray:
        """Weights for each solver step, aligned by integer step arithmetic."""
        if abs(solver.T - self.T) > 1e-9 * solver.T:
            raise AlignmentError("schedule horizon differs from solver horizon")
        m = _steps(self.h, solver.dt, "dropout interval")
        return np.repeat(self.weights(), m, axis=0)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "h": self.h,
            "seed": self.seed,
            "index": self.index,
            "active": [np.flatnonzero(m).tolist() for m in self.masks],
        }


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class EvalCounter:
    """Counts neuron evaluations (active neurons times points) made by the integrators."""

    neuron_evals: int = 0
    field_evals: int = 0
    per_step: list = dc_field(default_factory=list)


def _check_control(control: Control, solver: SolverConfig):
    if abs(control.T - solver.T) > 1e-9 * solver.T:
        raise AlignmentError("control horizon differs from solver horizon")
    if isinstance(control, PiecewiseConstantControl):
        control.check_aligned(solver.dt)


def integrate(field, control: Control, x0, solver: SolverConfig, step_weights=None, counter=None) -> Trajectory:
    """Fixed-step integration with optional per-step neuron weights.

    ``step_weights`` has shape ``(n_steps, ..., p)`` and multiplies the neurons on
    each step; every stage of a step uses that step's weights.  The final RK4 stage
    reads the control's left limit so that a piecewise-constant control switches
    only at the start of a step.
    """
    _check_control(control, solver)
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite initial state")
    n, dt, method = solver.n_steps, solver.dt, solver.method
    times = solver.times
    if step_weights is not None and len(step_weights) != n:
        raise AlignmentError("step weights do not match the solver grid")
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    n_points = int(np.prod(x.shape[:-1], dtype=int))

    for k in range(n):
        t = times[k]
        w = None if step_weights is None else step_weights[k]

        def F(y, th, w=w):
            return field.eval(y, th, w)

        if method is Method.EULER:
            x = x + dt * F(x, control(t))
        elif method is Method.RK2:
            k1 = F(x, control(t))
            x = x + dt * F(x + 0.5 * dt * k1, control(t + 0.5 * dt))
        else:
            th_mid = control(t + 0.5 * dt)
            k1 = F(x, control(t))
            k2 = F(x + 0.5 * dt * k1, th_mid)
            k3 = F(x + 0.5 * dt * k2, th_mid)
            k4 = F(x + dt * k3, control(t + dt, left=True))
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if counter is not None:
            active = field.p * n_points if w is None else int(np.count_nonzero(np.broadcast_to(w, x.shape[:-1] + (field.p,))))
            counter.neuron_evals += STAGES[method] * active
            counter.field_evals += STAGES[method]
        norm = float(np.max(np.abs(x))) if x.size else 0.0
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise BlowUpError(k + 1, norm)
        states[k + 1] = x
    return Trajectory(times, states)


def integrate_full(field, control: Control, x0, solver: SolverConfig, counter=None) -> Trajectory:
    """Trajectory of ``x' = F(x, theta_t)``."""
    return integrate(field, control, x0, solver, None, counter)


def integrate_random(field, scheme: BatchScheme, control: Control, x0, schedule: DropoutSchedule,
                     solver: SolverConfig, counter=None) -> Trajectory:
    """Trajectory of the masked dynamics driven by ``schedule``."""
    if schedule.scheme is not scheme and schedule.scheme.to_dict() != scheme.to_dict():
        raise AlignmentError("schedule was drawn from a different scheme")
    return integrate(field, control, x0, solver, schedule.step_weights(solver), counter)


def realization_weights(scheme: BatchScheme, h: float, solver: SolverConfig, K: int, master_seed: int) -> np.ndarray:
    """Stacked step weights for realizations ``0..K-1``, shape ``(n_steps, K, p)``."""
    ws = [DropoutSchedule.sample(scheme, solver.T, h, master_seed, k).step_weights(solver) for k in range(K)]
    return np.stack(ws, axis=1)


@dataclass(frozen=True)
class MCError:
    mean_sq_sup_error: float
    std_error: float
    samples: np.ndarray


def _summarize(errs: np.ndarray) -> MCError:
    K = errs.size
    se = float(np.std(errs, ddof=1) / math.sqrt(K)) if K > 1 else 0.0
    return MCError(float(np.mean(errs)), se, errs)


def sup_sq_errors(field, scheme, control, x0, h, solver, K, master_seed, reference: Trajectory) -> np.ndarray:
    """``max_t |x_t - x_hat_t|^2`` for realizations ``0..K-1`` against ``reference``."""
    x0 = np.asarray(x0, dtype=float)
    W = realization_weights(scheme, h, solver, K, master_seed)
    W = W.reshape(W.shape[:2] + (1,) * (x0.ndim - 1) + W.shape[2:])
    xk = np.broadcast_to(x0, (K,) + x0.shape)
    rand = integrate(field, control, xk, solver, W)
    diff = rand.states - reference.states[:, None]
    sq = (diff**2).sum(axis=-1)
    sq = sq.reshape(sq.shape[0], K, -1).max(axis=2)
    return sq.max(axis=0)


def trajectory_error_mc(field, scheme: BatchScheme, control: Control, x0, h: float, solver: SolverConfig,
                        K: int, master_seed: int, reference: Trajectory | None = None) -> MCError:
    """Monte-Carlo mean and standard error of ``max_t |x_t - x_hat_t|^2``.

    The full trajectory is integrated once on the solver grid (or passed in as
    ``reference``) and shared by all realizations.
    """
    if K < 2:
        raise DomainError("need at least two realizations")
    if reference is None:
        reference = integrate_full(field, control, x0, solver)
    return _summarize(sup_sq_errors(field, scheme, control, x0, h, solver, K, master_seed, reference))


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    r2: float


def fit_loglog_slope(h, err) -> LogLogFit:
    """Least squares of ``log err`` on ``log h``."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.size < 3 or h.shape != err.shape:
        raise DomainError("need at least three (h, error) pairs")
    if np.any(h <= 0) or np.any(err <= 0):
        raise DomainError("log-log fit needs positive values")
    res = linregress(np.log(h), np.log(err))
    return LogLogFit(float(res.slope), float(res.intercept), float(res.rvalue**2))


@dataclass(frozen=True)
class CoupledError:
    mean_sq_sup_error: float
    std_error: float
    control_l1_distance: float


def control_l1_distance(c1: Control, c2: Control, solver: SolverConfig) -> float:
    """Trapezoid quadrature of ``|theta1_t - theta2_t|`` on the solver grid."""
    t = solver.times
    gaps = np.array([np.linalg.norm(c1(s) - c2(s)) for s in t])
    return float(np.trapezoid(gaps, t))


def coupled_error_different_controls(field, scheme, control1, control2, x0, h, solver, K, seed) -> CoupledError:
    """Error between the full flow under ``control1`` and the random flow under ``control2``."""
    if abs(control1.T - control2.T) > 1e-12:
        raise AlignmentError("controls have different horizons")
    ref = integrate_full(field, control1, x0, solver)
    mc = _summarize(sup_sq_errors(field, scheme, control2, x0, h, solver, K, seed, ref))
    return CoupledError(mc.mean_sq_sup_error, mc.std_error, control_l1_distance(control1, control2, solver))
