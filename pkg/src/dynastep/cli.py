"""Command-line front end: run scenarios, plot telemetry, verify the build.

    dynastep run --scenario example1 --outdir out
    dynastep run --config my_run.cfg --set Kv1=3 --set K2=2
    dynastep plot out/trajectory.csv --channels x1,x2 --out states.svg
    dynastep verify [--filter example2]

``run`` writes ``trajectory.csv`` and ``summary.txt`` into the output
directory (flag, else $DYNASTEP_OUTDIR, else ./dynastep-out) and exits
0 on a completed run, 2 on an aborted one, 1 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .controller import check_gain_conditions
from .lyapunov import monitor_decrease
from .model import LevelKind
from .scenarios import SCENARIOS, ScenarioConfigError, build_scenario
from .sim import Trajectory
from .svgplot import render_line_chart
from . import acceptance

__all__ = ["main", "entry", "ConfigError", "parse_config"]


class ConfigError(ValueError):
    pass


def _parse_value(text):
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        return text


def parse_config(path):
    """Read a sectioned key = value file into (scenario, overrides).

    Sections group keys for the reader only; all keys land in one flat
    override namespace validated by the scenario builder.  The
    ``[scenario]`` section must carry ``name``.
    """
    scenario = None
    overrides = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    section = ""
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if section == "scenario" and key == "name":
            scenario = value
            continue
        if key in overrides:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        overrides[key] = (_parse_value(value), lineno)
    if scenario is None:
        raise ConfigError(f"{path}: missing [scenario] section with name = ...")
    return scenario, overrides


def _apply_sets(pairs):
    overrides = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = (_parse_value(value), None)
    return overrides


def _build(args):
    overrides = {}
    if args.config:
        scenario, overrides = parse_config(args.config)
        if args.scenario and args.scenario != scenario:
            raise ConfigError(
                f"--scenario {args.scenario} conflicts with config name {scenario}")
    elif args.scenario:
        scenario = args.scenario
    else:
        raise ConfigError("run needs --scenario or --config")
    overrides.update(_apply_sets(args.set))
    plain = {}
    for key, (value, lineno) in overrides.items():
        plain[key] = (value, lineno)
    try:
        return build_scenario(scenario, {k: v for k, (v, _) in plain.items()})
    except (ScenarioConfigError, ValueError) as exc:
        # Attach the config line when the offending key is known.
        msg = str(exc)
        for key, (_, lineno) in plain.items():
            if lineno is not None and f"'{key}'" in msg:
                raise ConfigError(f"{args.config}:{lineno}: {msg}") from exc
        raise ConfigError(msg) from exc


def _write_summary(path, scenario, traj):
    lines = [
        f"scenario: {scenario.name}",
        f"termination: {traj.termination.status}"
        + (f" ({traj.termination.cause})" if traj.termination.cause else ""),
        f"reached t = {traj.times[-1]:.6g} s over {traj.n_samples} samples",
        f"final plant inf-norm: {traj.plant_inf_norms()[-1]:.6e}",
        f"final state inf-norm: {traj.state_inf_norms()[-1]:.6e}",
    ]
    if traj.termination.message:
        lines.append(f"detail: {traj.termination.message}")
    try:
        rep = monitor_decrease(traj, exclude_norm_below=1e-3)
        lines.append(
            f"Lyapunov decrease: {rep.n_violations} violations in "
            f"{rep.n_checked} checked samples "
            f"(fraction {rep.violation_fraction:.4f}, max dV/dt {rep.max_vdot:.3e})")
    except ValueError as exc:
        lines.append(f"Lyapunov decrease: not evaluated ({exc})")
    if scenario.model.levels[0].kind is LevelKind.PURE:
        st = scenario.initial
        probe = st if st.x2d is not None else type(st)(
            x1=st.x1, x2=st.x2, x2d=st.u, u=st.u, x3=st.x3)
        try:
            rep = check_gain_conditions(scenario.model, scenario.spec, probe)
            lines.append(
                "gain conditions at the initial state: "
                f"rate condition {'holds' if rep.rate_ok else 'fails'} "
                f"(margin {rep.rate_margin:.4g}); K2 bound {rep.k2_bound:.4g} "
                f"({'holds' if rep.k2_ok else 'fails'}, "
                f"min eig K2 = {rep.k2_min_eig:.4g}, L = {rep.lipschitz:.4g})")
        except Exception as exc:  # diagnostics must never block the run
            lines.append(f"gain conditions: not evaluated ({exc})")
    else:
        lines.append("gain conditions: not applicable (strict first level)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_run(args):
    scenario = _build(args)
    outdir = args.outdir or os.environ.get("DYNASTEP_OUTDIR", "dynastep-out")
    os.makedirs(outdir, exist_ok=True)
    traj = scenario.run()
    csv_path = os.path.join(outdir, "trajectory.csv")
    traj.write_csv(csv_path)
    _write_summary(os.path.join(outdir, "summary.txt"), scenario, traj)
    if args.plot:
        channels = [c.strip() for c in args.plot.split(",") if c.strip()]
        _render(traj, channels, os.path.join(outdir, "plot.svg"),
                title=scenario.name)
    print(f"{scenario.name}: {traj.termination.status}"
          + (f" ({traj.termination.cause})" if traj.termination.cause else "")
          + f"; telemetry in {csv_path}")
    return 0 if traj.termination.ok else 2


def _render(traj, channels, out_path, title=""):
    missing = [c for c in channels if c not in traj.columns]
    if missing or not channels:
        available = ", ".join(traj.columns.keys())
        raise ConfigError(
            f"unknown channel(s) {', '.join(missing) or '(none requested)'}; "
            f"available: {available}")
    series = {c: traj.columns[c] for c in channels}
    render_line_chart(traj.times, series, out_path, title=title)


def _cmd_plot(args):
    try:
        traj = Trajectory.from_csv(args.csv)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    out = args.out or os.path.join(os.path.dirname(args.csv) or ".", "plot.svg")
    _render(traj, channels, out)
    print(f"wrote {out}")
    return 0


def _cmd_verify(args):
    results = acceptance.run_all(name_filter=args.filter, echo=print)
    if not results:
        print(f"no acceptance checks match filter {args.filter!r}",
              file=sys.stderr)
        return 1
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} checks passed")
    return 0 if n_pass == len(results) else 1


def main(argv=None):
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING)
    parser = argparse.ArgumentParser(
        prog="dynastep",
        description="dynamic backstepping controller workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario or config file")
    p_run.add_argument("--scenario", choices=sorted(SCENARIOS))
    p_run.add_argument("--config", help="path to a key = value config file")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key (repeatable)")
    p_run.add_argument("--outdir", help="output directory "
                       "(default $DYNASTEP_OUTDIR or ./dynastep-out)")
    p_run.add_argument("--plot", metavar="CHANNELS",
                       help="also render plot.svg with these channels")
    p_run.set_defaults(fn=_cmd_run)

    p_plot = sub.add_parser("plot", help="render channels of a trajectory CSV")
    p_plot.add_argument("csv")
    p_plot.add_argument("--channels", required=True,
                        help="comma-separated channel names")
    p_plot.add_argument("--out", help="output SVG path")
    p_plot.set_defaults(fn=_cmd_plot)

    p_ver = sub.add_parser("verify", help="run the acceptance checks")
    p_ver.add_argument("--filter", help="run only checks whose name "
                       "contains this substring")
    p_ver.set_defaults(fn=_cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
