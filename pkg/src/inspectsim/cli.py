"""Command-line entry point.

Every invocation prints exactly one JSON document on stdout; diagnostics go
to stderr.  Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path

from .capacity import SWEEP_COLUMNS, estimate_prep_error, min_stable_m, sweep
from .engine import digest, run
from .errors import InspectionError
from .fluid import adaptive_threshold, check_contraction, fluid_integrate
from .lpsolve import b_delta, flp_violations, lower_bound, solve_flp
from .model import OVERRIDE_KEYS, derive_constants, load_instance, policy_params
from .policies import POLICY_NAMES

log = logging.getLogger("inspectsim")

OUT_ENV = "INSPECTSIM_OUT"
BUILTIN = {"animals": "animals.json"}
STOCHASTIC = {"simulate", "capacity", "sweep", "fluid", "prep-error"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_instance(name: str):
    """Load an instance file, or a bundled instance by short name."""
    if name in BUILTIN and not Path(name).exists():
        ref = resources.files("inspectsim").joinpath("data", BUILTIN[name])
        with resources.as_file(ref) as path:
            return load_instance(path)
    return load_instance(name)


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} must look like name=value")
        if key not in OVERRIDE_KEYS:
            raise UsageError(f"unknown override {key!r}; choose from {', '.join(OVERRIDE_KEYS)}")
        out[key] = float(value)
    return out


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False, default=_jsonable)


def _jsonable(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "inspectsim_out")


def effective_config(args) -> dict:
    """Merged settings: config-file values overridden by explicit flags."""
    skip = {"func", "config", "plot", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _plot(path: Path, series: dict[str, tuple], xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "inspectsim"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, (x, y) in series.items():
        ax.plot(x, y, label=name, linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the SVG byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_validate(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    conditions = {
        "simplex": True,
        "normalization": True,
        "support": True,
        "distinguishability": True,
    }
    return {
        "valid": True,
        "labels": list(inst.labels),
        "expert_types": list(inst.expert_types),
        "outcomes": list(inst.outcomes),
        "conditions": conditions,
        "constants": {
            "kl_tensor": c.kl_tensor.tolist(),
            "d_bar": c.d_bar,
            "d_under": c.d_under,
            "d_a": c.d_a,
            "z_bar": c.z_bar,
            "zeta0": c.zeta0,
            "r": c.r.tolist(),
        },
    }


def cmd_flp(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    res = solve_flp(inst, c, args.delta)
    out = res.to_dict()
    out["b_delta"] = b_delta(args.delta)
    out["lower_bound"] = lower_bound(args.delta, res.m_star_f)
    out["invariants_ok"] = not flp_violations(res, c)
    return out


def _params(inst, c, args, strict):
    return policy_params(inst, c, args.delta, args.m, parse_overrides(args.override), strict=strict)


def cmd_simulate(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    params = _params(inst, c, args, strict=args.policy == "three-stage")
    rep = run(inst, c, params, args.policy, args.horizon, args.seed, grid_step=args.grid_step)
    out = rep.summary()
    out["error_rates"] = rep.error_rates()
    if args.warmup:
        kept = [q for t, q in zip(rep.grid, rep.queue) if t >= args.warmup]
        out["warmup"] = args.warmup
        out["mean_queue_after_warmup"] = sum(kept) / len(kept) if kept else 0.0
    d = out_dir(args)
    ts = d / "timeseries.csv"
    write_csv(ts, rep.timeseries_header(), rep.timeseries_rows())
    out["artifacts"] = [str(ts)]
    if args.plot:
        svg = d / "timeseries.svg"
        series = {"Q": (rep.grid, rep.queue)}
        for k in range(inst.n_types + 1):
            series[f"W_{k}"] = (rep.grid, [w[k] for w in rep.work])
        _plot(svg, series, "time", "jobs / inspections", f"{args.policy}, m = {args.m}")
        out["artifacts"].append(str(svg))
    return out


def cmd_capacity(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    res = min_stable_m(
        inst, c, args.delta, args.policy, parse_overrides(args.override),
        m_lo=args.m_lo, m_hi=args.m_hi, replicas=args.replicas, horizon=args.horizon,
        seed=args.seed, warmup_fraction=args.warmup, slope_tol=args.slope_tol,
        workers=args.workers,
    )
    return res.to_dict()


def cmd_sweep(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    deltas = parse_floats(args.deltas)
    if not deltas or any(not (0 < d < math.exp(-1)) for d in deltas):
        raise UsageError("--deltas must be a comma list of values in (0, 1/e)")
    rows = sweep(inst, c, args.policy, deltas, c0=args.c0, overrides=parse_overrides(args.override),
                 replicas=args.replicas, horizon=args.horizon, seed=args.seed,
                 warmup_fraction=args.warmup, slope_tol=args.slope_tol, workers=args.workers)
    d = out_dir(args)
    path = d / "sweep.csv"
    write_csv(path, SWEEP_COLUMNS, [[r[k] if r[k] is not None else "" for k in SWEEP_COLUMNS] for r in rows])
    out = {"rows": rows, "artifacts": [str(path)]}
    if args.plot:
        svg = d / "sweep.svg"
        ok = [r for r in rows if r["ratio"] is not None]
        x = [math.log(1 / r["delta"]) for r in ok]
        _plot(svg, {"ratio": (x, [r["ratio"] for r in ok]),
                    "envelope": (x, [r["envelope"] for r in ok])},
              "ln(1/delta)", "m_psi / (b_delta m*_F)", f"{args.policy} sweep")
        out["artifacts"].append(str(svg))
    return out


def cmd_fluid(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    params = _params(inst, c, args, strict=False)
    pi_p = parse_floats(args.pi_p) if args.pi_p else None
    m_qa = args.m_qa
    if args.mqa_factor is not None:
        m_qa = args.mqa_factor * adaptive_threshold(inst, c, params)
    report = check_contraction(inst, c, params, pi_p, args.samples, args.T, args.dt, args.seed,
                               m_qa=m_qa, strict=not args.report_only)
    out = report.to_dict()
    # trajectory from the supplied start, else from the slowest sample
    if args.w0:
        w0 = parse_floats(args.w0)
    else:
        from .fluid import sphere_samples

        starts = sphere_samples(args.samples, inst.n_types + 1, args.seed)
        w0 = starts[max(range(args.samples), key=lambda i: report.lyapunov_at_tau[i])]
    traj = fluid_integrate(inst, c, params, pi_p, w0, args.T, args.dt, m_qa=report.adaptive_capacity)
    d = out_dir(args)
    path = d / "fluid.csv"
    write_csv(path, traj.header(), traj.rows())
    out["w0"] = [float(x) for x in w0]
    out["final_lyapunov"] = float(traj.lyapunov[-1])
    out["artifacts"] = [str(path)]
    if args.plot:
        svg = d / "fluid.svg"
        _plot(svg, {"L": (traj.times, traj.lyapunov)}, "time", "L(w(t))", "fluid trajectory")
        out["artifacts"].append(str(svg))
    return out


def cmd_prep_error(args) -> dict:
    inst = resolve_instance(args.instance)
    c = derive_constants(inst)
    res = estimate_prep_error(inst, c, args.delta, args.samples, args.seed, parse_overrides(args.override))
    return res.to_dict()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inspectsim", description="Capacity analysis of noisy-inspection classification systems.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("instance", help="instance JSON path, or 'animals' for the bundled example")
        sp.add_argument("--config", help="JSON file of default flag values")
        sp.set_defaults(func=func)
        return sp

    def stochastic(sp, delta=True):
        if delta:
            sp.add_argument("--delta", type=float, required=True)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--override", action="append", metavar="NAME=VALUE",
                        help="replace a policy constant; repeatable")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./inspectsim_out)")
        sp.add_argument("--plot", action="store_true", help="also write SVG plots")

    add("validate", cmd_validate, "check an instance and print derived constants")

    sp = add("flp", cmd_flp, "solve the fundamental linear program")
    sp.add_argument("--delta", type=float, required=True)

    sp = add("simulate", cmd_simulate, "run one simulation")
    stochastic(sp)
    sp.add_argument("--policy", choices=POLICY_NAMES, required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--horizon", type=float, required=True)
    sp.add_argument("--grid-step", type=float, default=None)
    sp.add_argument("--warmup", type=float, default=0.0, help="burn-in time for the queue statistics")

    for name, func, help_ in (("capacity", cmd_capacity, "bisect for the minimum stable m"),
                              ("sweep", cmd_sweep, "minimum stable m over a grid of delta values")):
        sp = add(name, func, help_)
        stochastic(sp, delta=name == "capacity")
        sp.add_argument("--policy", choices=POLICY_NAMES, required=True)
        sp.add_argument("--replicas", type=int, default=5)
        sp.add_argument("--horizon", type=float, default=2e4)
        sp.add_argument("--warmup", type=float, default=0.1, help="warmup as a fraction of the horizon")
        sp.add_argument("--slope-tol", type=float, default=1e-3)
        sp.add_argument("--workers", type=int, default=None)
        if name == "capacity":
            sp.add_argument("--m-lo", type=int, default=None)
            sp.add_argument("--m-hi", type=int, default=None)
        else:
            sp.add_argument("--deltas", required=True, help="comma-separated delta values")
            sp.add_argument("--c0", type=float, default=1.0, help="envelope constant")

    sp = add("fluid", cmd_fluid, "integrate the fluid model and check contraction")
    stochastic(sp)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--T", type=float, default=4.0)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--m-qa", type=float, default=None, help="Adaptive capacity m q^A to use")
    sp.add_argument("--mqa-factor", type=float, default=None,
                    help="set m q^A to this multiple of the contraction threshold")
    sp.add_argument("--pi-p", default=None, help="coarse-estimate distribution, comma-separated")
    sp.add_argument("--w0", default=None, help="initial state for the emitted trajectory")
    sp.add_argument("--report-only", action="store_true",
                    help="run even when the capacity condition fails")

    sp = add("prep-error", cmd_prep_error, "Monte Carlo error of the Preparation estimate")
    stochastic(sp)
    sp.add_argument("--samples", type=int, default=10_000)
    return p


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(parser: argparse.ArgumentParser, argv):
    """Parse ``argv``; values from ``--config`` become defaults that flags override."""
    path = _config_path(argv)
    if path is not None:
        command = next((tok for tok in argv if tok in _subparsers(parser)), None)
        if command is None:
            raise UsageError("inspectsim: a subcommand is required")
        try:
            with open(path, encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path!r}: {exc}") from exc
        if not isinstance(defaults, dict):
            raise UsageError("config file must hold a JSON object")
        sp = _subparsers(parser)[command]
        dests = {a.dest: a for a in sp._actions}
        clean = {}
        for key, value in defaults.items():
            key = key.replace("-", "_")
            if key == "overrides" and isinstance(value, dict):
                key, value = "override", [f"{k}={v}" for k, v in value.items()]
            if key not in dests or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {command}")
            dests[key].required = False
            clean[key] = value
        sp.set_defaults(**clean)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("inspectsim: a subcommand is required")
    return args


def _subparsers(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(_dump({"ok": False, "error": "UsageError", "message": str(exc)}))
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    config = effective_config(args)
    try:
        result = args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(_dump({"ok": False, "error": "UsageError", "message": str(exc)}))
        return 2
    except json.JSONDecodeError as exc:
        msg = f"malformed JSON: {exc.msg} at line {exc.lineno} column {exc.colno}"
        print(msg, file=sys.stderr)
        print(_dump({"ok": False, "error": "JSONDecodeError", "message": msg, "line": exc.lineno}))
        return 1
    except (InspectionError, ValueError, OSError) as exc:
        name = type(exc).__name__
        print(f"{name}: {exc}", file=sys.stderr)
        print(_dump({"ok": False, "error": name, "message": str(exc), "config": config}))
        return 1
    doc = {"ok": True, "command": args.command, "config": config, "config_digest": digest(config)}
    doc.update(result)
    print(_dump(doc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
