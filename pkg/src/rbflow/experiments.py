"""Experiment drivers shared by the command line and the acceptance suite.

Each driver takes a plain config dataclass and returns in-memory results; the
CLI is responsible for writing them to disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import costmodel as cm
from .control import (
    CostConfig,
    evaluate_cost,
    optimal_cost_gap,
    predict_labels,
    train_gd,
)
from .controls import ConstantControl, PiecewiseConstantControl, control_from_dict
from .datasets import CIRCLE_TARGETS, circles_train_test
from .field import NeuronField
from .ode import (
    DropoutSchedule,
    EvalCounter,
    SolverConfig,
    fit_loglog_slope,
    integrate,
    integrate_full,
    trajectory_error_mc,
)
from .scheme import BatchScheme, s_factor
from .transport import (
    FlowMatchConfig,
    flow_match_train,
    grid_for,
    initial_transport_control,
    l1_error_mc,
    render_kde,
    sample_bump,
    sample_initial,
    sample_mixture,
    silverman_bandwidth,
    transport_path,
)


def make_scheme(name: str, p: int, r: int | None = None, q_B: float | None = None) -> BatchScheme:
    """Canonical scheme from its short name (``single``, ``drop_one``, ..., ``bernoulli``)."""
    name = name.lower()
    if name in ("balanced", "disjoint"):
        return getattr(BatchScheme, name)(p, r)
    if name == "bernoulli":
        return BatchScheme.bernoulli(p, q_B)
    if name not in ("single", "drop_one", "pick_one", "all_subsets"):
        raise ValueError(f"unknown scheme {name!r}")
    return getattr(BatchScheme, name)(p)


def parse_scheme_spec(spec: str, p: int) -> BatchScheme:
    """``name`` or ``name:arg`` (``balanced:2``, ``disjoint:8``, ``bernoulli:0.5``)."""
    name, _, arg = spec.partition(":")
    if name == "bernoulli":
        return make_scheme(name, p, q_B=float(arg or 0.5))
    return make_scheme(name, p, r=int(arg) if arg else None)


# -- trajectory convergence --------------------------------------------------

@dataclass(frozen=True)
class ConvergeConfig:
    p: int = 24
    d: int = 2
    T: float = 2.0
    steps: int = 512
    method: str = "rk4"
    activation: str = "relu"
    scheme: str = "disjoint"
    r: int = 8
    q_B: float = 0.5
    h_coarsest: int = 8
    levels: int = 6
    realizations: int = 20
    init_scale: float = 0.5
    seed: int = 1
    control: dict | None = None

    @property
    def h_levels(self) -> list[float]:
        return [self.T / (self.h_coarsest * 2**k) for k in range(self.levels)]


@dataclass(frozen=True)
class ConvergeResult:
    rows: list  # (h, mean, std_error)
    slope: float | None
    intercept: float | None
    r2: float | None
    degenerate: bool


def converge_setup(cfg: ConvergeConfig):
    rng = np.random.default_rng([cfg.seed, 0])
    field = NeuronField(cfg.d, cfg.p, cfg.activation)
    if cfg.control is not None:
        control = control_from_dict(cfg.control)
    else:
        control = ConstantControl(field.random_params(rng, cfg.init_scale), cfg.T)
    x0 = rng.uniform(-1.0, 1.0, size=cfg.d)
    return field, control, x0


def run_converge(cfg: ConvergeConfig) -> ConvergeResult:
    field, control, x0 = converge_setup(cfg)
    solver = SolverConfig(cfg.method, cfg.T / cfg.steps, cfg.T)
    scheme = make_scheme(cfg.scheme, cfg.p, cfg.r, cfg.q_B)
    ref = integrate_full(field, control, x0, solver)
    rows = []
    for h in cfg.h_levels:
        mc = trajectory_error_mc(field, scheme, control, x0, h, solver, cfg.realizations, cfg.seed, ref)
        rows.append((h, mc.mean_sq_sup_error, mc.std_error))
    errs = [r[1] for r in rows]
    if min(errs) <= 0:
        return ConvergeResult(rows, None, None, None, True)
    fit = fit_loglog_slope([r[0] for r in rows], errs)
    return ConvergeResult(rows, fit.slope, fit.intercept, fit.r2, False)


# -- classification training ---------------------------------------------------

# plain GD on the masked cost oscillates at the full-model step
DEFAULT_ETA = {"full": 1e-3, "random": 5e-4}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    scheme: str = "disjoint"
    r: int = 8
    q_B: float = 0.5
    n_data: int = 100
    noise: float = 0.08
    p: int = 24
    T: float = 2.0
    steps: int = 20
    pieces: int = 4
    h_div: int = 4
    alpha: float = 0.01
    beta: float = 0.5
    eta: float | None = None
    iters: int = 1000
    momentum: float = 0.0
    init_scale: float = 0.5
    activation: str = "gelu"
    seed: int = 0
    boundary_grid: int = 0


@dataclass
class TrainResult:
    state: object
    field: NeuronField
    schedule: DropoutSchedule | None
    metrics: dict
    boundary: np.ndarray | None = None


def train_setup(cfg: TrainConfig):
    train, test = circles_train_test(cfg.n_data, cfg.seed, cfg.noise)
    field = NeuronField(2, cfg.p, cfg.activation)
    rng = np.random.default_rng([cfg.seed, 2])
    theta = field.random_params(rng, cfg.init_scale)
    init = PiecewiseConstantControl.uniform(np.tile(theta, (cfg.pieces, 1)), cfg.T)
    solver = SolverConfig("rk4", cfg.T / cfg.steps, cfg.T)
    cost = CostConfig(cfg.alpha, cfg.beta, train.X, train.Y)
    schedule = None
    if cfg.mode == "random":
        scheme = make_scheme(cfg.scheme, cfg.p, cfg.r, cfg.q_B)
        schedule = DropoutSchedule.sample(scheme, cfg.T, cfg.T / cfg.h_div, cfg.seed + 1)
    elif cfg.mode != "full":
        raise ValueError("mode must be 'full' or 'random'")
    return field, init, solver, cost, schedule, train, test


def _accuracy(field, control, data, solver, schedule=None) -> float:
    return float(np.mean(predict_labels(field, control, data.X, solver, CIRCLE_TARGETS, schedule) == data.labels))


def run_train(cfg: TrainConfig) -> TrainResult:
    field, init, solver, cost, schedule, train, test = train_setup(cfg)
    eta = cfg.eta if cfg.eta is not None else DEFAULT_ETA[cfg.mode]
    state = train_gd(field, cost, init, solver, schedule, eta, cfg.iters, 0.0, cfg.momentum)
    ctrl = state.control
    counter = EvalCounter()
    integrate(field, ctrl, train.X, solver, None if schedule is None else schedule.step_weights(solver), counter)
    metrics = {
        "train_loss": evaluate_cost(field, cost, ctrl, solver, schedule),
        "train_accuracy": _accuracy(field, ctrl, train, solver, schedule),
        "test_accuracy": _accuracy(field, ctrl, test, solver, schedule),
        "train_accuracy_full_field": _accuracy(field, ctrl, train, solver),
        "test_accuracy_full_field": _accuracy(field, ctrl, test, solver),
        "measured_cost_forward": counter.neuron_evals,
        "iterations": state.iteration,
        "eta": eta,
    }
    boundary = None
    if cfg.boundary_grid:
        g = np.linspace(-3.0, 3.0, cfg.boundary_grid)
        pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        lab = predict_labels(field, ctrl, pts, solver, CIRCLE_TARGETS, schedule)
        boundary = np.column_stack([pts, lab])
    return TrainResult(state, field, schedule, metrics, boundary)


# -- transport -----------------------------------------------------------------

@dataclass(frozen=True)
class TransportConfig:
    task: str = "demo"
    N: int = 200
    grid: int = 150
    T: float = 1.0
    steps: int = 256
    p: int = 24
    scheme: str = "disjoint"
    r: int = 8
    q_B: float = 0.5
    h_coarsest: int = 32
    levels: int = 4
    realizations: int = 10
    snapshots: int = 8
    hutchinson_probes: int = 0
    fm_pairs: int = 250
    fm_iters: int = 3000
    fm_lr: float = 1e-2
    fm_time_samples: int = 4
    seed: int = 0

    @property
    def h_levels(self) -> list[float]:
        return [self.T / (self.h_coarsest * 2**k) for k in range(self.levels)]


def trained_transport(cfg: TransportConfig):
    field = NeuronField(2, cfg.p, "tanh")
    init = initial_transport_control(field, np.random.default_rng([cfg.seed, 0]), cfg.T)
    fm = FlowMatchConfig(cfg.fm_pairs, cfg.fm_time_samples, cfg.fm_iters, cfg.fm_lr, seed=cfg.seed)
    res = flow_match_train(field, sample_bump, sample_mixture, init, fm)
    return field, res


@dataclass
class TransportDemo:
    times: list
    full_grids: list
    random_grids: list
    masses: list  # (t, full raw mass, mean random raw mass)
    losses: np.ndarray
    control: object


def run_transport_demo(cfg: TransportConfig) -> TransportDemo:
    """Full and averaged dropout densities at ``snapshots + 1`` equally spaced times.

    Grids are rendered from the raw Liouville weights; the mass columns report
    the grid mass before any normalisation.
    """
    field, fm = trained_transport(cfg)
    solver = SolverConfig("rk2", cfg.T / cfg.steps, cfg.T)
    scheme = make_scheme(cfg.scheme, cfg.p, cfg.r, cfg.q_B)
    ens0 = sample_initial(cfg.N, np.random.default_rng([cfg.seed, 1]))
    every = cfg.steps // cfg.snapshots
    hut = cfg.hutchinson_probes > 0
    mode = "hutchinson" if hut else "exact"

    def path(sched, stream):
        rng = np.random.default_rng([cfg.seed, 2, stream]) if hut else None
        return transport_path(field, fm.control, ens0, solver, sched, mode, max(1, cfg.hutchinson_probes), rng, every)

    full = path(None, 0)
    randoms = []
    for k in range(cfg.realizations):
        sched = DropoutSchedule.sample(scheme, cfg.T, cfg.T / cfg.h_coarsest, cfg.seed + 1, k)
        randoms.append(path(sched, k + 1))
    times, fg, rg, masses = [], [], [], []
    for j, (t, e) in enumerate(full):
        bw = silverman_bandwidth(e)
        spec = grid_for([e] + [rp[j][1] for rp in randoms], cfg.grid, bw)
        g_full = render_kde(e, spec, bw)
        r_grids = [render_kde(rp[j][1], spec, bw) for rp in randoms]
        g_rand = np.mean([g.values for g in r_grids], axis=0)
        times.append(t)
        fg.append(g_full)
        rg.append((spec, g_rand))
        masses.append((t, g_full.mass, float(np.mean([g.mass for g in r_grids]))))
    return TransportDemo(times, fg, rg, masses, fm.losses, fm.control)


def run_transport_rate(cfg: TransportConfig):
    field, fm = trained_transport(cfg)
    solver = SolverConfig("rk2", cfg.T / cfg.steps, cfg.T)
    scheme = make_scheme(cfg.scheme, cfg.p, cfg.r, cfg.q_B)
    every = cfg.steps // cfg.snapshots
    return l1_error_mc(field, fm.control, scheme, cfg.h_levels, cfg.N, cfg.grid, cfg.realizations, cfg.seed,
                       solver, snapshot_every=every)


# -- design levers -------------------------------------------------------------

@dataclass(frozen=True)
class DesignConfig:
    schemes: tuple = ("single", "drop_one", "pick_one", "balanced:2", "disjoint:2", "all_subsets", "bernoulli:0.5")
    p: int = 8
    d: int = 2
    T: float = 1.0
    steps: int = 100
    activation: str = "tanh"
    init_scale: float = 0.5
    seed: int = 0
    field: dict | None = None
    control: dict | None = None


def design_setup(cfg: DesignConfig):
    rng = np.random.default_rng([cfg.seed, 0])
    field = NeuronField.from_dict(cfg.field) if cfg.field else NeuronField(cfg.d, cfg.p, cfg.activation)
    if cfg.control:
        control = control_from_dict(cfg.control)
    else:
        control = ConstantControl(field.random_params(rng, cfg.init_scale), cfg.T)
    x0 = rng.uniform(-1.0, 1.0, size=field.d)
    return field, control, x0


def run_design(cfg: DesignConfig) -> list[dict]:
    field, control, x0 = design_setup(cfg)
    solver = SolverConfig("rk4", control.T / cfg.steps, control.T)
    bounds = field.lipschitz_bound(control)
    traj = integrate_full(field, control, x0, solver)
    rows = []
    for spec in cfg.schemes:
        scheme = parse_scheme_spec(spec, field.p)
        lam = np.array([scheme.lambda_at(field, x, control(t)) for t, x in zip(traj.times, traj.states)])
        l1 = float(np.trapezoid(lam, traj.times))
        S = s_factor(bounds.lam_F_x, bounds.lam_F_0, control.T, l1, scheme.sum_inv_q(), scheme.pi_min,
                     float(np.linalg.norm(x0)))
        rows.append({
            "scheme": spec,
            "lambda_sup": float(lam.max()),
            "lambda_l1": l1,
            "sum_inv_q": scheme.sum_inv_q(),
            "pi_min": scheme.pi_min,
            "r": scheme.mean_batch_size,
            "S": S,
        })
    return rows


# -- cost model ----------------------------------------------------------------

@dataclass(frozen=True)
class CostRunConfig:
    eps: float = 1.0
    scheme: str = "balanced"
    r: int | None = None
    p: int = 8
    d: int = 2
    T: float = 1.0
    steps: int = 100
    activation: str = "tanh"
    init_scale: float = 0.3
    seed: int = 0
    execute: bool = False
    field: dict | None = None
    control: dict | None = None


def cost_params_builder(cfg: CostRunConfig):
    """``r -> CostModelParams`` using Lipschitz bounds and the trajectory's masking variance."""
    dcfg = DesignConfig(p=cfg.p, d=cfg.d, T=cfg.T, steps=cfg.steps, activation=cfg.activation,
                        init_scale=cfg.init_scale, seed=cfg.seed, field=cfg.field, control=cfg.control)
    field, control, x0 = design_setup(dcfg)
    solver = SolverConfig("rk4", control.T / cfg.steps, control.T)
    bounds = field.lipschitz_bound(control)
    x0n = float(np.linalg.norm(x0))

    def build(r: int) -> cm.CostModelParams:
        scheme = make_scheme(cfg.scheme, field.p, r)
        l1 = scheme.lambda_l1_estimate(field, control, x0, solver)
        S = s_factor(bounds.lam_F_x, bounds.lam_F_0, control.T, l1, scheme.sum_inv_q(), scheme.pi_min, x0n)
        return cm.CostModelParams.from_bounds(S, control.T, scheme.mean_batch_size, field.p, scheme.pi_min,
                                              bounds.lam_F_x, bounds.lam_F_0, bounds.lam_gradx_F_x, x0n)

    return build, field, control, x0


def run_cost(cfg: CostRunConfig) -> dict:
    build, field, control, x0 = cost_params_builder(cfg)
    sweep = []
    for r in range(1, field.p + 1):
        if cfg.scheme == "disjoint" and field.p % r:
            continue
        prm = build(r)
        rep = cm.optimal_cost(prm, cfg.eps)
        sweep.append({"r": r, "eps_c": prm.eps_c, "h_star": rep.h_star, "C_RM_star": rep.C_RM_star,
                      "ratio": rep.ratio, "regime": rep.regime.value})
    valid = [row["r"] for row in sweep]
    r_star = next((r for r in valid if cfg.eps >= 2.0 * build(r).eps_c), valid[-1])
    r_use = cfg.r if cfg.r is not None else r_star
    prm = build(r_use)
    report = cm.optimal_cost(prm, cfg.eps).to_dict()
    report.update({"r": r_use, "r_star": r_star, "h_bar": cm.balanced_h(prm, cfg.eps), "gamma": prm.gamma,
                   "c_int": prm.c_int, "c_int_fm": prm.c_int_fm, "S": prm.S, "kappa": prm.kappa})
    if cfg.execute:
        report["execution"] = execute_cost(field, control, x0, make_scheme(cfg.scheme, field.p, r_use), prm,
                                           report["h_star"], cfg.seed)
    return {"report": report, "sweep": sweep}


def execute_cost(field, control, x0, scheme, prm, h_star, seed) -> dict:
    """Run the random model with Euler on a grid aligned to ``h <= h_star`` and count neuron evaluations."""
    T = control.T
    n_s = max(1, math.ceil(T / h_star - 1e-12))
    h = T / n_s
    m = max(1, math.ceil(1.0 / prm.gamma - 1e-12))
    solver = SolverConfig("euler", h / m, T)
    sched = DropoutSchedule.sample(scheme, T, h, seed)
    counter = EvalCounter()
    integrate(field, control, x0, solver, sched.step_weights(solver), counter)
    gamma_eff = 1.0 / m
    return {"h": h, "dt": h / m, "gamma_eff": gamma_eff, "measured": counter.neuron_evals,
            "analytic": T * scheme.mean_batch_size / (gamma_eff * h)}


# -- optimal cost gap ----------------------------------------------------------

@dataclass(frozen=True)
class GapConfig:
    p: int = 8
    n_data: int = 20
    T: float = 1.0
    steps: int = 32
    scheme: str = "disjoint"
    r: int = 4
    h_divs: tuple = (2, 8, 32)
    alpha: float = 0.1
    beta: float = 0.0
    eta: float = 2e-3
    iters: int = 300
    init_scale: float = 0.5
    activation: str = "tanh"
    seeds: tuple = (0, 1, 2, 3, 4)


def gap_instance(cfg: GapConfig):
    data, _ = circles_train_test(cfg.n_data, 1000, 0.08, 1)
    field = NeuronField(2, cfg.p, cfg.activation)
    theta = field.random_params(np.random.default_rng(1000), cfg.init_scale)
    init = ConstantControl(theta, cfg.T)
    solver = SolverConfig("rk4", cfg.T / cfg.steps, cfg.T)
    cost = CostConfig(cfg.alpha, cfg.beta, data.X, data.Y)
    return field, init, solver, cost


def run_gap(cfg: GapConfig) -> list[dict]:
    field, init, solver, cost = gap_instance(cfg)
    scheme = make_scheme(cfg.scheme, cfg.p, cfg.r)
    h_levels = [cfg.T / k for k in cfg.h_divs]
    rows = []
    for seed in cfg.seeds:
        for row in optimal_cost_gap(field, cost, solver, scheme, h_levels, init, cfg.eta, cfg.iters, seed):
            rows.append({"seed": seed, "h": row.h, "gap_sq": row.gap_sq, "J_full": row.J_full,
                         "J_random": row.J_random})
    return rows


def median_gaps(rows: list[dict]) -> list[tuple[float, float]]:
    hs = sorted({r["h"] for r in rows}, reverse=True)
    return [(h, float(np.median([r["gap_sq"] for r in rows if r["h"] == h]))) for h in hs]




