"""Command-line drivers for the experiments.

Every run writes its outputs plus ``manifest.json`` (subcommand, resolved
config, seed, version) into ``--out``.  ``rbflow --manifest path --out dir``
replays a run; outputs contain no timestamps or paths, so replays are
byte-identical.

Exit codes: 0 success, 1 configuration or IO error, 2 numeric failure,
3 acceptance check failed.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# -- deterministic output ------------------------------------------------------

def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def to_json(obj, indent: int = 2, level: int = 0) -> str:
    """JSON text with floats at 17 significant digits and insertion-ordered keys."""
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(to_json(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if hasattr(obj, "item"):  # numpy scalar
        obj = obj.item()
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj)
    if hasattr(obj, "value"):  # enums
        return json.dumps(obj.value)
    return json.dumps(obj)


def write_json(path: Path, obj) -> None:
    path.write_text(to_json(obj) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    def cell(v):
        if isinstance(v, bool) or v is None:
            return str(v)
        if hasattr(v, "item"):
            v = v.item()
        if isinstance(v, float):
            return fmt_float(v)
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_matrix(path: Path, values) -> None:
    path.write_text("\n".join(",".join(fmt_float(v) for v in row) for row in values) + "\n", encoding="utf-8")


# -- argument parsing ------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _load_json(path):
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (RBFLOW_THREADS overrides)")

    ap = argparse.ArgumentParser(prog="rbflow", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--manifest", default=None, help="replay the run described by this manifest.json")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("converge", parents=[common], help="trajectory error vs switching step")
    p.add_argument("--scheme", default="disjoint")
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--q-B", dest="q_B", type=float, default=0.5)
    p.add_argument("--p", type=int, default=24)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=512, help="solver steps on [0, T]")
    p.add_argument("--method", default="rk4", choices=["euler", "rk2", "rk4"])
    p.add_argument("--activation", default="relu", choices=["relu", "tanh", "gelu"])
    p.add_argument("--h-coarsest", type=int, default=8, help="coarsest h is T / this")
    p.add_argument("--h-levels", dest="levels", type=int, default=6)
    p.add_argument("--realizations", type=int, default=20)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--control", default=None, help="control JSON path")

    p = sub.add_parser("train", parents=[common], help="train the classifier on circles")
    p.add_argument("--mode", default="full", choices=["full", "random"])
    p.add_argument("--scheme", default="disjoint")
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--q-B", dest="q_B", type=float, default=0.5)
    p.add_argument("--h-div", type=int, default=4, help="h = T / this")
    p.add_argument("--h", type=float, default=None, help="switching step; overrides --h-div")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=None, help="GD step (default 1e-3 full, 5e-4 random)")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--dataset", default="circles", choices=["circles"])
    p.add_argument("--n-data", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--p", type=int, default=24)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--pieces", type=int, default=4)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--activation", default="gelu", choices=["relu", "tanh", "gelu"])
    p.add_argument("--boundary-grid", type=int, default=0, help="emit an n x n decision grid")

    p = sub.add_parser("transport", parents=[common], help="continuity-equation demo and L1 rate")
    p.add_argument("--task", default="demo", choices=["demo", "rate"])
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--grid", type=int, default=150)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--p", type=int, default=24)
    p.add_argument("--scheme", default="disjoint")
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--h-coarsest", type=int, default=32)
    p.add_argument("--h-levels", dest="levels", type=int, default=4)
    p.add_argument("--realizations", type=int, default=10)
    p.add_argument("--snapshots", type=int, default=8)
    p.add_argument("--hutchinson-probes", type=int, default=0, help="0 uses the exact divergence")
    p.add_argument("--fm-pairs", type=int, default=250)
    p.add_argument("--fm-iters", type=int, default=3000)
    p.add_argument("--fm-lr", type=float, default=1e-2)

    p = sub.add_parser("design", parents=[common], help="design levers per scheme")
    p.add_argument("--schemes", default="single,drop_one,pick_one,balanced:2,disjoint:2,all_subsets,bernoulli:0.5")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--activation", default="tanh", choices=["relu", "tanh", "gelu"])
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--field", default=None, help="field JSON path")
    p.add_argument("--control", default=None, help="control JSON path")

    p = sub.add_parser("cost", parents=[common], help="optimal switching step and cost ratio")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--scheme", default="balanced", choices=["balanced", "disjoint"])
    p.add_argument("--r", type=int, default=None, help="batch size for the report (default r*)")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--activation", default="tanh", choices=["tanh", "gelu"])
    p.add_argument("--init-scale", type=float, default=0.3)
    p.add_argument("--execute", action="store_true", help="run the random model and count evaluations")
    p.add_argument("--field", default=None)
    p.add_argument("--control", default=None)

    p = sub.add_parser("dataset", parents=[common], help="write the circles dataset")
    p.add_argument("--n-data", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.08)

    p = sub.add_parser("gap", parents=[common], help="optimal-cost gap vs switching step")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--n-data", type=int, default=20)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--h-divs", type=_ints, default=(2, 8, 32))
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=2e-3)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    return ap


RUNTIME_KEYS = {"out", "threads", "manifest", "command", "seed"}
DEFAULT_SEED = {"converge": 1}


def resolved_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in RUNTIME_KEYS}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


# -- subcommands -----------------------------------------------------------------

def _version() -> str:
    try:
        from importlib.metadata import PackageNotFoundError, version

        return version("artifact")
    except PackageNotFoundError:  # pragma: no cover - running from a source tree
        return "0.1.0"


def cmd_converge(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import ConvergeConfig, run_converge

    c = dict(cfg)
    c["control"] = _load_json(c.pop("control"))
    res = run_converge(ConvergeConfig(seed=seed, **c))
    write_csv(out / "rates.csv", ["h", "mean_sq_sup_error", "std_error"], res.rows)
    summary = {"slope": res.slope, "intercept": res.intercept, "r2": res.r2, "degenerate": res.degenerate}
    if res.degenerate:
        summary["note"] = "zero error at some level (single-batch scheme); slope fit skipped"
    write_json(out / "summary.json", summary)
    if res.degenerate:
        return EXIT_OK
    return EXIT_OK if res.slope >= 0.5 else EXIT_ACCEPT


def cmd_train(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import TrainConfig, run_train

    c = {k: v for k, v in cfg.items() if k not in ("dataset", "h")}
    if cfg.get("h") is not None:
        c["h_div"] = round(cfg["T"] / cfg["h"])
        if abs(c["h_div"] * cfg["h"] - cfg["T"]) > 1e-9 * cfg["T"]:
            raise ValueError("T must be an integer multiple of h")
    res = run_train(TrainConfig(seed=seed, **c))
    write_csv(out / "history.csv", ["iteration", "J", "grad_norm"], res.state.history)
    model = {"field": res.field.to_dict(), "control": res.state.control.to_dict()}
    if res.schedule is not None:
        model["schedule"] = res.schedule.to_dict()
    write_json(out / "model.json", model)
    write_json(out / "metrics.json", res.metrics)
    if res.boundary is not None:
        write_csv(out / "boundary.csv", ["x", "y", "label"],
                  [(float(a), float(b), int(l)) for a, b, l in res.boundary])
    return EXIT_OK


def cmd_transport(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import TransportConfig, run_transport_demo, run_transport_rate

    tc = TransportConfig(seed=seed, **cfg)
    if tc.task == "rate":
        st = run_transport_rate(tc)
        write_csv(out / "rate.csv", ["h", "sqrt_h", "mean_l1", "std_l1"],
                  [(r.h, math.sqrt(r.h), r.mean_l1, r.std_l1) for r in st.rows])
        write_json(out / "rate_summary.json",
                   {"slope_vs_h": st.slope_vs_h, "slope_vs_sqrt_h": st.slope_vs_sqrt_h, "r2": st.r2})
        return EXIT_OK if 0.3 <= st.slope_vs_h <= 0.7 else EXIT_ACCEPT
    demo = run_transport_demo(tc)
    snap = out / "snapshots"
    snap.mkdir(exist_ok=True)
    grids = []
    for j, (t, g_full, (spec, g_rand)) in enumerate(zip(demo.times, demo.full_grids, demo.random_grids)):
        write_matrix(snap / f"full_{j:03d}.csv", g_full.values)
        write_matrix(snap / f"random_{j:03d}.csv", g_rand)
        grids.append({"index": j, "t": t, "bounds": list(spec.bounds), "resolution": list(spec.resolution)})
    write_csv(out / "masses.csv", ["t", "mass_full", "mass_random_mean"], demo.masses)
    write_csv(out / "flow_matching_loss.csv", ["iteration", "loss"], list(enumerate(demo.losses.tolist())))
    write_json(out / "transport.json", {"snapshots": grids, "control": demo.control.to_dict()})
    ok = all(0.95 <= m <= 1.05 for _, a, b in demo.masses for m in (a, b))
    return EXIT_OK if ok else EXIT_ACCEPT


def cmd_design(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import DesignConfig, run_design

    c = dict(cfg)
    c["schemes"] = tuple(s for s in c["schemes"].split(",") if s)
    c["field"] = _load_json(c["field"])
    c["control"] = _load_json(c["control"])
    rows = run_design(DesignConfig(seed=seed, **c))
    cols = ["scheme", "lambda_sup", "lambda_l1", "sum_inv_q", "pi_min", "r", "S"]
    write_csv(out / "levers.csv", cols, [[row[k] for k in cols] for row in rows])
    return EXIT_OK


def cmd_cost(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import CostRunConfig, run_cost

    c = dict(cfg)
    c["field"] = _load_json(c["field"])
    c["control"] = _load_json(c["control"])
    res = run_cost(CostRunConfig(seed=seed, **c))
    write_json(out / "cost_report.json", res["report"])
    cols = ["r", "eps_c", "h_star", "C_RM_star", "ratio", "regime"]
    write_csv(out / "sweep.csv", cols, [[row[k] for k in cols] for row in res["sweep"]])
    return EXIT_OK


def cmd_dataset(cfg: dict, seed: int, out: Path) -> int:
    from .datasets import make_circles

    ds = make_circles(cfg["n_data"], cfg["noise"], seed)
    rows = [(float(x[0]), float(x[1]), float(y[0]), float(y[1]), int(l)) for x, y, l in zip(ds.X, ds.Y, ds.labels)]
    write_csv(out / "dataset.csv", ["x1", "x2", "y1", "y2", "label"], rows)
    return EXIT_OK


def cmd_gap(cfg: dict, seed: int, out: Path) -> int:
    from .experiments import GapConfig, median_gaps, run_gap

    c = dict(cfg)
    c["h_divs"] = tuple(c["h_divs"])
    c["seeds"] = tuple(c["seeds"])
    rows = run_gap(GapConfig(**c))
    cols = ["seed", "h", "gap_sq", "J_full", "J_random"]
    write_csv(out / "gap.csv", cols, [[row[k] for k in cols] for row in rows])
    med = median_gaps(rows)
    write_csv(out / "gap_median.csv", ["h", "median_gap_sq"], med)
    vals = [m for _, m in med]
    return EXIT_OK if all(a >= b for a, b in itertools.pairwise(vals)) else EXIT_ACCEPT


COMMANDS = {
    "converge": cmd_converge,
    "train": cmd_train,
    "transport": cmd_transport,
    "design": cmd_design,
    "cost": cmd_cost,
    "dataset": cmd_dataset,
    "gap": cmd_gap,
}


def _set_threads(n: int | None) -> None:
    env = os.environ.get("RBFLOW_THREADS")
    if env:
        n = int(env)
    if n:
        for var in THREAD_VARS:
            os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _set_threads(args.threads)

    if args.manifest:
        try:
            man = _load_json(args.manifest)
            command, cfg, seed = man["command"], man["config"], man["seed"]
        except (OSError, KeyError, ValueError) as exc:
            print(f"rbflow: cannot read manifest: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    else:
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        command, cfg = args.command, resolved_config(args)
        seed = args.seed if args.seed is not None else DEFAULT_SEED.get(command, 0)
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"rbflow: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .errors import BlowUpError, DomainError, RBFlowError, StepSizeError

    write_json(out / "manifest.json", {"command": command, "seed": seed, "version": _version(), "config": cfg})
    try:
        code = COMMANDS[command](cfg, seed, out)
    except (BlowUpError, StepSizeError, ArithmeticError) as exc:
        print(f"rbflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, RBFlowError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"rbflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
