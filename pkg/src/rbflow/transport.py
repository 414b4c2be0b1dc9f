"""Weighted-particle solver for the continuity equation driven by a neuron field.

Particles follow the flow with RK2 midpoint steps and carry log-weights that
obey ``d/dt log alpha = -div F``, evaluated at the midpoint state and time.
Densities are rendered with a weighted Gaussian KDE on a uniform grid.
Flow-matching training fits the field to straight-line interpolants between
source and target samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controls import AffineBiasControl, Control
from .errors import BlowUpError, DomainError, StepSizeError
from .field import NeuronField
from .ode import (
    BLOWUP_NORM,
    DropoutSchedule,
    SolverConfig,
    _check_control,
    fit_loglog_slope,
)

BUMP_CENTER = np.array([-1.0, -1.0])
MIXTURE_MEANS = np.array([[6.0, 0.0], [4.5, 3.0], [6.0, 2.0]])
MIXTURE_COVS = np.array([
    [[0.2, 0.05], [0.05, 0.2]],
    [[0.2, 0.05], [0.05, 0.2]],
    [[0.05, 0.0], [0.0, 0.05]],
])


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    positions: np.ndarray  # (N, d)
    log_weights: np.ndarray  # (N,)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def total_mass(self) -> float:
        return float(np.exp(self.log_weights).sum())

    def normalized(self) -> ParticleEnsemble:
        lw = self.log_weights - np.logaddexp.reduce(self.log_weights)
        return ParticleEnsemble(self.positions, lw)


# -- densities and samplers -------------------------------------------------

def bump_density(x) -> np.ndarray:
    """Normalised ``(2 / pi) (1 - |x - c|^2)`` on the unit disk around ``c = (-1, -1)``."""
    r2 = ((np.asarray(x, dtype=float) - BUMP_CENTER) ** 2).sum(axis=-1)
    return np.where(r2 < 1.0, (2.0 / math.pi) * (1.0 - r2), 0.0)


def sample_bump(n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from the bump on the box ``[-2, 0]^2``."""
    out = np.empty((0, 2))
    tries = 0
    while out.shape[0] < n:
        m = max(16, int(1.5 * (n - out.shape[0]) / 0.39) + 16)
        prop = rng.uniform(-2.0, 0.0, size=(m, 2))
        r2 = ((prop - BUMP_CENTER) ** 2).sum(axis=1)
        keep = rng.random(m) < (1.0 - r2)
        tries += m
        out = np.concatenate([out, prop[keep]])
        if tries > 100 and out.shape[0] < 1e-3 * tries:
            raise DomainError("rejection sampler acceptance fell below 1e-3")
    return out[:n]


def mixture_density(x) -> np.ndarray:
    """Equal-weight mixture of the three target Gaussians."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for mu, cov in zip(MIXTURE_MEANS, MIXTURE_COVS):
        inv = np.linalg.inv(cov)
        dev = x - mu
        q = np.einsum("...i,ij,...j->...", dev, inv, dev)
        out += np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(np.linalg.det(cov)))
    return out / len(MIXTURE_MEANS)


def sample_mixture(n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.integers(len(MIXTURE_MEANS), size=n)
    chol = np.linalg.cholesky(MIXTURE_COVS)
    z = rng.standard_normal(size=(n, 2))
    return MIXTURE_MEANS[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def sample_initial(N: int, rng: np.random.Generator, sampler=None) -> ParticleEnsemble:
    """``N`` i.i.d. particles (bump by default) with uniform weights ``1 / N``."""
    if N < 1:
        raise DomainError("need at least one particle")
    pos = sample_bump(N, rng) if sampler is None else np.asarray(sampler(N, rng), dtype=float)
    return ParticleEnsemble(pos, np.full(N, -math.log(N)))


# -- flow matching ----------------------------------------------------------

@dataclass(frozen=True)
class FlowMatchConfig:
    pairs: int = 250
    time_samples: int = 4
    iters: int = 2000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.pairs < 1 or self.time_samples < 1 or self.iters < 0:
            raise DomainError("pairs and time_samples must be positive")


@dataclass(frozen=True, eq=False)
class FlowMatchResult:
    control: Control
    losses: np.ndarray


def _affine_loss_grad(field: NeuronField, ctrl: AffineBiasControl, X, t, V):
    W, A, b0 = field.unpack(ctrl.theta0)
    z = X @ A.T + b0 + t[:, None] * ctrl.b1
    s = field.activation(z)
    R = s @ W - V
    n = X.shape[0]
    loss = float((R**2).sum() / n)
    c = field.activation.derivative(z) * (R @ W.T) * (2.0 / n)
    gW = s.T @ R * (2.0 / n)
    gA = c.T @ X
    gb0 = c.sum(axis=0)
    gb1 = (c * t[:, None]).sum(axis=0)
    g0 = field.pack(gW, gA, gb0)
    return loss, np.concatenate([g0, gb1])


def _generic_loss_grad(field, ctrl: Control, X, t, V):
    n = X.shape[0]
    loss = 0.0
    grad = np.zeros_like(ctrl.params)
    for xi, ti, vi in zip(X, t, V):
        th = ctrl(ti)
        r = field.eval(xi, th) - vi
        loss += float(r @ r) / n
        grad += ctrl.pullback(ti, field.grad_theta_transpose_apply(xi, th, 2.0 * r / n))
    return loss, grad


def flow_match_loss_grad(field, control: Control, x0, xT, t):
    """Loss ``mean |F(x_s, theta_t) - (xT - x0) / T|^2`` at interpolants ``x_s`` and its parameter gradient."""
    s = (t / control.T)[:, None]
    X = (1.0 - s) * x0 + s * xT
    V = (xT - x0) / control.T
    if isinstance(control, AffineBiasControl):
        return _affine_loss_grad(field, control, X, t, V)
    return _generic_loss_grad(field, control, X, t, V)


def flow_match_train(field, source, target, init_control: Control, cfg: FlowMatchConfig) -> FlowMatchResult:
    """Adam on the flow-matching loss with fixed source/target pairs.

    ``source`` and ``target`` are samplers ``(n, rng) -> (n, d)``.  Each iteration
    redraws ``time_samples`` uniform times per pair.
    """
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(source(cfg.pairs, rng), dtype=float)
    xT = np.asarray(target(cfg.pairs, rng), dtype=float)
    x0r = np.repeat(x0, cfg.time_samples, axis=0)
    xTr = np.repeat(xT, cfg.time_samples, axis=0)
    control = init_control
    theta = control.params.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = []
    for k in range(cfg.iters):
        t = rng.uniform(0.0, control.T, size=x0r.shape[0])
        loss, g = flow_match_loss_grad(field, control, x0r, xTr, t)
        if not np.isfinite(loss):
            raise StepSizeError("flow-matching loss became non-finite; lower the learning rate")
        losses.append(loss)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mh = m / (1 - cfg.beta1 ** (k + 1))
        vh = v / (1 - cfg.beta2 ** (k + 1))
        theta = theta - cfg.lr * mh / (np.sqrt(vh) + cfg.adam_eps)
        control = control.with_params(theta)
    return FlowMatchResult(control, np.array(losses))


# -- particle push ----------------------------------------------------------

def _divergence(field, x, th, w, mode, probes, rng):
    if mode == "exact":
        return field.divergence_x(x, th, w)
    return field.hutchinson_divergence(x, th, probes, rng, w)


def transport_path(field: NeuronField, control: Control, ensemble: ParticleEnsemble, solver: SolverConfig,
                   schedule: DropoutSchedule | None = None, divergence: str = "exact", probes: int = 1,
                   rng: np.random.Generator | None = None, snapshot_every: int | None = None):
    """RK2-midpoint push of particles and log-weights.

    Returns a list of ``(t, ensemble)``: the initial state, every
    ``snapshot_every``-th step (if given) and the final state.
    """
    field._require_smooth()
    if divergence not in ("exact", "hutchinson"):
        raise ValueError("divergence must be 'exact' or 'hutchinson'")
    if divergence == "hutchinson" and rng is None:
        raise ValueError("Hutchinson divergence needs an rng")
    _check_control(control, solver)
    W = None if schedule is None else schedule.step_weights(solver)
    x = np.array(ensemble.positions, dtype=float)
    lw = np.array(ensemble.log_weights, dtype=float)
    times, dt, n = solver.times, solver.dt, solver.n_steps
    out = [(0.0, ParticleEnsemble(x.copy(), lw.copy()))]
    for k in range(n):
        w = None if W is None else W[k]
        t = times[k]
        tm = t + 0.5 * dt
        th_m = control(tm)
        xm = x + 0.5 * dt * field.eval(x, control(t), w)
        lw = lw - dt * _divergence(field, xm, th_m, w, divergence, probes, rng)
        x = x + dt * field.eval(xm, th_m, w)
        norm = float(np.max(np.abs(x)))
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise BlowUpError(k + 1, norm)
        last = k == n - 1
        if last or (snapshot_every and (k + 1) % snapshot_every == 0):
            out.append((float(times[k + 1]), ParticleEnsemble(x.copy(), lw.copy())))
    return out


def push_ensemble(field, control, ensemble, solver, schedule=None, divergence="exact", probes=1, rng=None):
    """Ensemble at the final time."""
    return transport_path(field, control, ensemble, solver, schedule, divergence, probes, rng)[-1][1]


# -- rendering --------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    resolution: tuple[int, int]  # nx, ny

    @property
    def cell_volume(self) -> float:
        xmin, xmax, ymin, ymax = self.bounds
        nx, ny = self.resolution
        return (xmax - xmin) / nx * (ymax - ymin) / ny

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xmin, xmax, ymin, ymax = self.bounds
        nx, ny = self.resolution
        cx = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
        cy = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
        return cx, cy


@dataclass(frozen=True, eq=False)
class DensityGrid:
    spec: GridSpec
    values: np.ndarray  # (ny, nx)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.spec.cell_volume)


def silverman_bandwidth(ensemble: ParticleEnsemble) -> np.ndarray:
    """Per-axis Silverman rule ``sigma_j (4 / ((d + 2) n_eff))^(1 / (d + 4))`` with weighted spread."""
    w = ensemble.normalized().weights
    x = ensemble.positions
    d = x.shape[1]
    mean = w @ x
    std = np.sqrt(np.maximum(w @ (x - mean) ** 2, 1e-300))
    n_eff = 1.0 / float(w @ w)
    return std * (4.0 / ((d + 2) * n_eff)) ** (1.0 / (d + 4))


def grid_for(ensembles, resolution, bandwidth, pad: float = 3.0) -> GridSpec:
    """Union bounding box of the ensembles padded by ``pad`` bandwidths."""
    pts = np.concatenate([e.positions for e in ensembles])
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2,))
    lo = pts.min(axis=0) - pad * bw
    hi = pts.max(axis=0) + pad * bw
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    return GridSpec((float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])), (int(nx), int(ny)))


def _gauss(c, x, h):
    return np.exp(-0.5 * ((c[None, :] - x[:, None]) / h) ** 2) / (math.sqrt(2.0 * math.pi) * h)


def render_kde(ensemble: ParticleEnsemble, spec: GridSpec, bandwidth=None, normalize: bool = False) -> DensityGrid:
    """Weighted Gaussian KDE (product kernel) at the cell centres.

    Raw weights are used unless ``normalize`` is set, so the grid mass tracks the
    total particle weight.
    """
    if bandwidth is None:
        bandwidth = silverman_bandwidth(ensemble)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2,))
    if np.any(bw <= 0):
        raise DomainError("bandwidth must be positive")
    ens = ensemble.normalized() if normalize else ensemble
    cx, cy = spec.centers()
    kx = _gauss(cx, ens.positions[:, 0], bw[0])
    ky = _gauss(cy, ens.positions[:, 1], bw[1])
    values = (ky * ens.weights[:, None]).T @ kx
    return DensityGrid(spec, values)


def l1_distance(a: DensityGrid, b: DensityGrid) -> float:
    if a.spec != b.spec:
        raise DomainError("grids differ")
    return float(np.abs(a.values - b.values).sum() * a.spec.cell_volume)


# -- rate experiment --------------------------------------------------------

@dataclass(frozen=True)
class L1Row:
    h: float
    mean_l1: float
    std_l1: float


@dataclass(frozen=True, eq=False)
class L1Study:
    rows: list
    slope_vs_h: float
    slope_vs_sqrt_h: float
    r2: float


def l1_error_mc(field, control, scheme, h_levels, N, resolution, K, seed, solver: SolverConfig,
                snapshot_every: int | None = None, bandwidth=None) -> L1Study:
    """``max_t E |rho_t - rho_hat_t|_{L1}`` for each switching step ``h``.

    Full and dropout ensembles share the same initial particles.  Each snapshot
    time has one grid and bandwidth, fixed by the full ensemble, and both
    densities are rendered with normalised weights.  Realization ``k`` at every
    level uses stream ``k`` of ``seed + 1``.
    """
    rng = np.random.default_rng(seed)
    ens0 = sample_initial(N, rng)
    full = transport_path(field, control, ens0, solver, snapshot_every=snapshot_every)
    specs, bws, ref = [], [], []
    for _, e in full:
        bw = silverman_bandwidth(e) if bandwidth is None else np.broadcast_to(bandwidth, (2,))
        spec = grid_for([e], resolution, bw, pad=4.0)
        specs.append(spec)
        bws.append(bw)
        ref.append(render_kde(e, spec, bw, normalize=True))
    rows = []
    for h in h_levels:
        errs = np.zeros((K, len(full)))
        for k in range(K):
            sched = DropoutSchedule.sample(scheme, solver.T, h, seed + 1, k)
            path = transport_path(field, control, ens0, solver, sched, snapshot_every=snapshot_every)
            for j, (_, e) in enumerate(path):
                errs[k, j] = l1_distance(ref[j], render_kde(e, specs[j], bws[j], normalize=True))
        means = errs.mean(axis=0)
        j = int(np.argmax(means))
        rows.append(L1Row(float(h), float(means[j]), float(errs[:, j].std(ddof=1)) if K > 1 else 0.0))
    fit = fit_loglog_slope([r.h for r in rows], [r.mean_l1 for r in rows])
    return L1Study(rows, fit.slope, 2.0 * fit.slope, fit.r2)


def initial_transport_control(field: NeuronField, rng: np.random.Generator, T: float = 1.0, scale: float = 1.0):
    """Random affine-bias control (time-dependent biases) as the flow-matching starting point."""
    theta0 = field.random_params(rng, scale)
    return AffineBiasControl(field, theta0, np.zeros(field.p), T)


__all__ = [
    "DensityGrid",
    "FlowMatchConfig",
    "GridSpec",
    "ParticleEnsemble",
    "bump_density",
    "flow_match_loss_grad",
    "flow_match_train",
    "grid_for",
    "initial_transport_control",
    "l1_distance",
    "l1_error_mc",
    "mixture_density",
    "push_ensemble",
    "render_kde",
    "sample_bump",
    "sample_initial",
    "sample_mixture",
    "silverman_bandwidth",
    "transport_path",
]
