"""Cost-accuracy trade-off for the random model integrated with explicit Euler.

The RMS error of the random model at switching step ``h`` and solver step
``dt = gamma h`` is bounded by the envelope ``E(h) = sqrt(S h) + c_int gamma h``.
Cost is counted in neuron evaluations: ``T r / (gamma h)`` for the random
model, ``T p / dt`` for the full model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import DomainError, UnboundedError

DEFAULT_C_STAB = 2.0


class Regime(str, enum.Enum):
    DISCRETIZATION_LIMITED = "discretization_limited"
    VARIANCE_LIMITED = "variance_limited"


def integration_constant(lam_F_x: float, lam_F_0: float, lam_gradx: float | None, T: float, pi_min: float,
                         x0_norm: float) -> float:
    """First-order Euler constant ``lam_grad/(2 pi) e^{lam T/pi} (e^{lam T/pi} - 1) (|x0| + lam_0/lam)``.

    For ``lam_F_x = 0`` the field is constant in ``x`` and Euler is exact, so 0 is returned.
    """
    if lam_gradx is None:
        raise DomainError("the integration constant needs a Lipschitz bound on the Jacobian (smooth activation)")
    if not 0 < pi_min <= 1:
        raise DomainError("pi_min must lie in (0, 1]")
    if lam_F_x == 0:
        return 0.0
    e = math.exp(lam_F_x * T / pi_min)
    return lam_gradx / (2.0 * pi_min) * e * (e - 1.0) * (x0_norm + lam_F_0 / lam_F_x)


def kappa(pi_min: float, lam_F_x: float, T: float) -> float:
    """``(1/pi) (e^{lam T/pi} - 1) / (e^{lam T} - 1)``, with its ``lam -> 0`` limit ``1/pi^2``."""
    if lam_F_x == 0:
        return 1.0 / pi_min**2
    return (math.expm1(lam_F_x * T / pi_min) / math.expm1(lam_F_x * T)) / pi_min


def gamma_cap(pi_min: float, lam_F_x: float, c_stab: float = DEFAULT_C_STAB) -> float:
    """Largest admissible ``gamma = dt / h``: ``min(1, c_stab pi_min / lam)``."""
    if lam_F_x <= 0:
        return 1.0
    return min(1.0, c_stab * pi_min / lam_F_x)


@dataclass(frozen=True)
class CostModelParams:
    S: float
    c_int: float
    gamma: float
    T: float
    r: float
    p: int
    pi_min: float = 1.0
    lam_F_x: float = 0.0
    lam_F_0: float = 0.0
    lam_gradx_F_x: float | None = None
    x0_norm: float = 0.0
    c_int_fm_override: float | None = None
    c_stab: float = DEFAULT_C_STAB

    def __post_init__(self):
        if self.S < 0 or self.c_int < 0:
            raise DomainError("S and c_int must be nonnegative")
        if not 0 < self.gamma <= gamma_cap(self.pi_min, self.lam_F_x, self.c_stab) * (1 + 1e-12):
            raise DomainError("gamma exceeds min(1, c_stab pi_min / lam_F_x)")
        if not 0 < self.r <= self.p:
            raise DomainError("mean batch size must lie in (0, p]")
        if not 0 < self.pi_min <= 1 or not self.T > 0:
            raise DomainError("need pi_min in (0, 1] and T > 0")

    @classmethod
    def from_bounds(cls, S, T, r, p, pi_min, lam_F_x, lam_F_0, lam_gradx_F_x, x0_norm, gamma=None,
                    c_stab=DEFAULT_C_STAB):
        """Derive ``c_int`` (and ``gamma`` at its cap unless given) from Lipschitz bounds."""
        c = integration_constant(lam_F_x, lam_F_0, lam_gradx_F_x, T, pi_min, x0_norm)
        g = gamma_cap(pi_min, lam_F_x, c_stab) if gamma is None else gamma
        return cls(S, c, g, T, r, p, pi_min, lam_F_x, lam_F_0, lam_gradx_F_x, x0_norm, None, c_stab)

    @property
    def c_int_fm(self) -> float:
        """Integration constant of the full model (same formula with ``pi_min = 1``)."""
        if self.c_int_fm_override is not None:
            return self.c_int_fm_override
        return integration_constant(self.lam_F_x, self.lam_F_0, self.lam_gradx_F_x, self.T, 1.0, self.x0_norm)

    @property
    def eps_c(self) -> float:
        """Critical tolerance ``S / (c_int gamma)`` (infinite without integration error)."""
        cg = self.c_int * self.gamma
        return math.inf if cg == 0 else self.S / cg

    @property
    def kappa(self) -> float:
        return kappa(self.pi_min, self.lam_F_x, self.T)


@dataclass(frozen=True)
class CostReport:
    eps: float
    h_star: float
    C_RM_star: float
    C_FM_star: float
    ratio: float
    regime: Regime
    eps_c: float

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "h_star": self.h_star,
            "C_RM_star": self.C_RM_star,
            "C_FM_star": self.C_FM_star,
            "ratio": self.ratio,
            "regime": self.regime.value,
            "eps_c": self.eps_c,
        }


def error_envelope(params: CostModelParams, h: float) -> float:
    if not h > 0:
        raise DomainError("h must be positive")
    return math.sqrt(params.S * h) + params.c_int * params.gamma * h


def _check_eps(params, eps):
    if not eps > 0:
        raise DomainError("tolerance must be positive")
    if params.S == 0 and params.c_int * params.gamma == 0:
        raise UnboundedError("S = 0 and c_int gamma = 0: every step size meets the tolerance")


def optimal_h(params: CostModelParams, eps: float) -> float:
    """Largest ``h`` with ``E(h) <= eps``: ``4 eps^2 / S (1 + sqrt(1 + 4 c_int gamma eps / S))^-2``."""
    _check_eps(params, eps)
    S, cg = params.S, params.c_int * params.gamma
    if S == 0:
        return eps / cg
    if cg == 0:
        return eps * eps / S
    return 4.0 * eps * eps / S / (1.0 + math.sqrt(1.0 + 4.0 * cg * eps / S)) ** 2


def cost_ratio(params: CostModelParams, eps: float) -> float:
    """``C_FM* / C_RM*`` written out in closed form."""
    _check_eps(params, eps)
    S, g = params.S, params.gamma
    num = params.p * params.c_int_fm
    if S == 0:
        # h* = eps / (c_int gamma): ratio = p c_FM / (r c_RM)
        return num / (params.r * params.c_int)
    return 4.0 * num * g * eps / (params.r * S * (1.0 + math.sqrt(1.0 + 4.0 * params.c_int * g * eps / S)) ** 2)


def optimal_cost(params: CostModelParams, eps: float) -> CostReport:
    h = optimal_h(params, eps)
    C_rm = params.T * params.r / (params.gamma * h)
    C_fm = params.T * params.p * params.c_int_fm / eps
    regime = Regime.DISCRETIZATION_LIMITED if eps >= params.eps_c else Regime.VARIANCE_LIMITED
    return CostReport(eps, h, C_rm, C_fm, cost_ratio(params, eps), regime, params.eps_c)


def balanced_h(params: CostModelParams, eps: float) -> float:
    """Step that keeps both the model and the integration error below ``eps / 2``."""
    _check_eps(params, eps)
    if eps >= 2.0 * params.eps_c:
        return eps / (2.0 * params.c_int * params.gamma)
    return eps * eps / (4.0 * params.S)


def practical_r(params_builder, eps: float, p: int) -> int:
    """Smallest ``r`` in ``1..p`` with ``eps >= 2 eps_c(r)``; ``p`` if there is none."""
    for r in range(1, p + 1):
        if eps >= 2.0 * params_builder(r).eps_c:
            return r
    return p


def measured_cost(counter) -> int:
    """Neuron evaluations recorded by an ``EvalCounter`` during integration."""
    return int(counter.neuron_evals)
