"""Time-dependent parameter paths ``t -> theta(t)`` on a horizon ``[0, T]``.

A control is a finite-dimensional family parametrised by a flat vector
(``params``).  Each class knows its L2 Gram matrix in those coordinates, which
is what turns the pointwise gradient of a cost into a gradient inside the class.
"""

from __future__ import annotations

import numpy as np

from .errors import AlignmentError, DomainError, ShapeError
from .field import FieldMode, NeuronField

# Tolerance (relative to T) used to decide whether a time sits on a breakpoint.
KNOT_RTOL = 1e-9


class Control:
    """Shared behaviour of the concrete control classes."""

    T: float

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, params) -> Control:
        raise NotImplementedError

    def __call__(self, t: float, left: bool = False) -> np.ndarray:
        raise NotImplementedError

    def pullback(self, t: float, g, left: bool = False) -> np.ndarray:
        """``(d theta(t) / d params)^T g``."""
        raise NotImplementedError

    def gram(self) -> np.ndarray:
        raise NotImplementedError

    def gram_solve(self, v) -> np.ndarray:
        return np.linalg.solve(self.gram(), v)

    def l2_inner(self, other: Control) -> float:
        """``int_0^T <theta(t), other(t)> dt`` for two members of the same class."""
        return float(self.params @ self.gram() @ other.params)

    def l2_norm_sq(self) -> float:
        return self.l2_inner(self)

    def extreme_values(self) -> list[np.ndarray]:
        raise NotImplementedError

    def neuron_origin_sup(self, field: NeuronField) -> np.ndarray:
        """Per-neuron ``sup_t |f_i(0, theta(t))|``."""
        vals = [np.linalg.norm(field.neuron_values(np.zeros(field.d), th), axis=-1) for th in self.extreme_values()]
        return np.max(vals, axis=0)

    def sup_norm(self) -> float:
        return max(float(np.linalg.norm(th)) for th in self.extreme_values())

    def __add__(self, other: Control) -> Control:
        return self.with_params(self.params + other.params)

    def __sub__(self, other: Control) -> Control:
        return self.with_params(self.params - other.params)

    def __mul__(self, c: float) -> Control:
        return self.with_params(c * self.params)

    __rmul__ = __mul__


def _finite(x, what: str) -> np.ndarray:
    x = np.array(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite {what}")
    return x


class ConstantControl(Control):
    def __init__(self, theta, T: float):
        self.theta = _finite(theta, "parameters").ravel()
        self.T = float(T)
        if not self.T > 0:
            raise DomainError("horizon must be positive")

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, params) -> ConstantControl:
        return ConstantControl(params, self.T)

    def __call__(self, t, left=False):
        return self.theta

    def pullback(self, t, g, left=False):
        return np.asarray(g, dtype=float)

    def gram(self):
        return self.T * np.eye(self.theta.size)

    def gram_solve(self, v):
        return np.asarray(v, dtype=float) / self.T

    def l2_inner(self, other):
        return self.T * float(self.theta @ other.params)

    def extreme_values(self):
        return [self.theta]

    def to_dict(self):
        return {"repr": "constant", "T": self.T, "theta": self.theta.tolist()}


class PiecewiseConstantControl(Control):
    """Value ``values[k]`` on ``[knots[k], knots[k+1])``; the last value also holds at ``T``."""

    def __init__(self, knots, values):
        self.knots = _finite(knots, "breakpoints").ravel()
        self.values = np.atleast_2d(_finite(values, "parameters"))
        if self.knots.size != self.values.shape[0] + 1:
            raise ShapeError("need one more breakpoint than values")
        if self.knots[0] != 0.0 or np.any(np.diff(self.knots) <= 0):
            raise DomainError("breakpoints must start at 0 and increase strictly")
        self.T = float(self.knots[-1])
        self._tol = KNOT_RTOL * self.T

    @classmethod
    def uniform(cls, values, T: float) -> PiecewiseConstantControl:
        values = np.atleast_2d(values)
        return cls(np.linspace(0.0, T, values.shape[0] + 1), values)

    @property
    def n_pieces(self) -> int:
        return self.values.shape[0]

    @property
    def params(self):
        return self.values.ravel()

    def with_params(self, params):
        return PiecewiseConstantControl(self.knots, np.asarray(params).reshape(self.values.shape))

    def index(self, t: float, left: bool = False) -> int:
        if left:
            k = int(np.searchsorted(self.knots, t - self._tol, side="left")) - 1
        else:
            k = int(np.searchsorted(self.knots, t + self._tol, side="right")) - 1
        return min(max(k, 0), self.n_pieces - 1)

    def __call__(self, t, left=False):
        return self.values[self.index(t, left)]

    def pullback(self, t, g, left=False):
        out = np.zeros_like(self.values)
        out[self.index(t, left)] = g
        return out.ravel()

    def gram(self):
        return np.kron(np.diag(np.diff(self.knots)), np.eye(self.values.shape[1]))

    def gram_solve(self, v):
        v = np.asarray(v, dtype=float).reshape(self.values.shape)
        return (v / np.diff(self.knots)[:, None]).ravel()

    def l2_inner(self, other):
        return float(np.sum(np.diff(self.knots)[:, None] * self.values * other.values))

    def extreme_values(self):
        return list(self.values)

    def check_aligned(self, dt: float):
        """Raise if a breakpoint is not a multiple of the solver step ``dt``."""
        ratio = self.knots / dt
        if np.any(np.abs(ratio - np.round(ratio)) > 1e-6):
            raise AlignmentError("Piecewise control breakpoints not aligned with solver grid")

    def to_dict(self):
        return {"repr": "piecewise", "knots": self.knots.tolist(), "values": self.values.tolist()}


class AffineBiasControl(Control):
    """``theta(t) = theta0 + t * E b1`` where ``E`` places ``b1`` in the bias slots.

    Only the biases drift in time; weights stay at ``theta0``.
    """

    def __init__(self, field: NeuronField, theta0, b1, T: float):
        if field.mode is not FieldMode.FULL:
            raise ShapeError("affine bias controls need a full-mode field")
        self.field = field
        self.theta0 = _finite(theta0, "parameters").ravel()
        self.b1 = _finite(b1, "bias slopes").ravel()
        if self.theta0.size != field.n_params or self.b1.size != field.p:
            raise ShapeError("parameter sizes do not match the field")
        self.T = float(T)
        self._slots = np.arange(field.p) * field.block_size + 2 * field.d

    @property
    def params(self):
        return np.concatenate([self.theta0, self.b1])

    def with_params(self, params):
        params = np.asarray(params, dtype=float)
        n = self.theta0.size
        return AffineBiasControl(self.field, params[:n], params[n:], self.T)

    def __call__(self, t, left=False):
        th = self.theta0.copy()
        th[self._slots] += t * self.b1
        return th

    def pullback(self, t, g, left=False):
        g = np.asarray(g, dtype=float)
        return np.concatenate([g, t * g[self._slots]])

    def gram(self):
        n, T = self.theta0.size, self.T
        G = np.zeros((n + self.b1.size,) * 2)
        G[np.arange(n), np.arange(n)] = T
        j = n + np.arange(self.b1.size)
        G[self._slots, j] = G[j, self._slots] = T**2 / 2
        G[j, j] = T**3 / 3
        return G

    def extreme_values(self):
        return [self(0.0), self(self.T)]

    def neuron_origin_sup(self, field):
        W, _, b0 = field.unpack(self.theta0)
        s = field.activation.sup_abs_on_interval(b0, b0 + self.T * self.b1)
        return np.linalg.norm(W, axis=1) * s

    def to_dict(self):
        return {
            "repr": "affine_bias",
            "T": self.T,
            "theta0": self.theta0.tolist(),
            "b1": self.b1.tolist(),
            "field": self.field.to_dict(),
        }


def control_from_dict(doc: dict) -> Control:
    kind = doc["repr"]
    if kind == "constant":
        return ConstantControl(doc["theta"], doc["T"])
    if kind == "piecewise":
        return PiecewiseConstantControl(doc["knots"], doc["values"])
    if kind == "affine_bias":
        return AffineBiasControl(NeuronField.from_dict(doc["field"]), doc["theta0"], doc["b1"], doc["T"])
    raise ValueError(f"unknown control kind {kind!r}")


__all__ = [
    "KNOT_RTOL",
    "AffineBiasControl",
    "ConstantControl",
    "Control",
    "PiecewiseConstantControl",
    "control_from_dict",
]
