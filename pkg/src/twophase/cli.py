"""Command line front end: presets, configuration, runs and plots."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import assembly as asm
from . import spaces as sp
from . import timeloop as tl
from .errors import ConfigError, TwoPhaseError
from .solver import SolverConfig

PRESETS = ("hysing1", "hysing2")


def _gravity(pts, t):
    out = np.zeros((len(pts), 2))
    out[:, 1] = -0.98
    return out


def preset(name: str) -> tl.Preset:
    """Benchmark presets for the two rising-bubble test cases."""
    if name == "hysing1":
        params = asm.PhysParams(rho_plus=1000.0, rho_minus=100.0,
                                mu_plus=10.0, mu_minus=1.0, gamma=24.5,
                                f1=_gravity)
    elif name == "hysing2":
        params = asm.PhysParams(rho_plus=1000.0, rho_minus=1.0,
                                mu_plus=10.0, mu_minus=0.1, gamma=1.96,
                                f1=_gravity)
    else:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return tl.Preset(name=name, params=params, domain=(0.0, 1.0, 0.0, 2.0),
                     center=(0.5, 0.5), radius=0.25, t_end=3.0)


_BOOL_KEYS = {"xfem", "strict", "fixed_mesh", "force"}
_KNOWN_KEYS = {"preset", "level", "timestep_divisor", "element", "xfem",
               "density_strategy", "strict", "outdir", "snapshot_every",
               "fixed_mesh", "force", "t_end", "outer_tol", "n_interface"}


def read_config_file(path):
    """Flat ``key = value`` file, one setting per line, '#' comments."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = val
    return out


def _parse_bool(key, val):
    s = str(val).strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be on/off, got {val!r}")


def parse_config(file_values=None, **flags) -> tl.RunConfig:
    """Merge config-file values and CLI flags into a run configuration.

    Flags override file values.  The ``level`` shorthand ``k,l`` sets the
    fine/coarse targets to ``2**k`` and ``2**l``.
    """
    merged = dict(file_values or {})
    for key, val in flags.items():
        if val is not None:
            merged[key] = val
    unknown = set(merged) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    if "preset" not in merged:
        raise ConfigError("a preset is required (hysing1 or hysing2)")
    pre = preset(str(merged["preset"]))

    level = str(merged.get("level", "5,2"))
    try:
        k, l = (int(s) for s in level.split(","))
    except ValueError as exc:
        raise ConfigError(f"level must be 'k,l', got {level!r}") from exc
    divisor = int(merged.get("timestep_divisor", 1))
    if divisor < 1:
        raise ConfigError("timestep_divisor must be a positive integer")
    element = str(merged.get("element", sp.P2P1))
    if element not in sp.VARIANTS:
        raise ConfigError(f"element must be one of {sp.VARIANTS}")
    strategy = str(merged.get("density_strategy", asm.MIDPOINT))

    kwargs = {}
    if "t_end" in merged:
        kwargs["t_end"] = float(merged["t_end"])
    if "n_interface" in merged:
        kwargs["n_interface"] = int(merged["n_interface"])
    solver = SolverConfig()
    if "outer_tol" in merged:
        solver = SolverConfig(outer_tol=float(merged["outer_tol"]))
    return tl.RunConfig(
        preset=pre, n_fine=2**k, n_coarse=2**l, timestep_divisor=divisor,
        element=element,
        xfem=_parse_bool("xfem", merged.get("xfem", "on")),
        density_strategy=strategy,
        strict=_parse_bool("strict", merged.get("strict", "off")),
        fixed_mesh=_parse_bool("fixed_mesh", merged.get("fixed_mesh", "off")),
        outdir=merged.get("outdir"),
        snapshot_every=int(merged.get("snapshot_every", 100)),
        force=_parse_bool("force", merged.get("force", "off")),
        solver=solver, **kwargs)


def write_config(config: tl.RunConfig, path):
    """Write the flat key = value form of a configuration."""
    k = int(np.log2(config.n_fine))
    l = int(np.log2(config.n_coarse))
    lines = {
        "preset": config.preset.name,
        "level": f"{k},{l}",
        "timestep_divisor": config.timestep_divisor,
        "element": config.element,
        "xfem": "on" if config.xfem else "off",
        "density_strategy": config.density_strategy,
        "strict": "on" if config.strict else "off",
        "fixed_mesh": "on" if config.fixed_mesh else "off",
        "snapshot_every": config.snapshot_every,
        "t_end": config.t_end,
        "n_interface": config.n_interface,
    }
    if config.outdir:
        lines["outdir"] = config.outdir
    with open(path, "w") as fh:
        for key, val in lines.items():
            fh.write(f"{key} = {val}\n")


def emit_plots(series: tl.BenchmarkSeries, outdir):
    """Self-contained SVG line charts of the benchmark quantities."""
    if len(series) < 2:
        raise ConfigError(
            f"need at least 2 series rows to plot, have {len(series)}")
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    os.makedirs(outdir, exist_ok=True)
    panels = [
        ("circularity", series.circularity, "circularity"),
        ("centre_of_mass", series.y_c, "y_c"),
        ("rise_velocity", series.v_c, "V_c"),
        ("energy", series.energy, "discrete energy"),
        ("mesh_ratio", series.ratio, "segment length ratio"),
    ]
    paths = []
    for name, values, label in panels:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(series.t, values, lw=1.2)
        ax.set_xlabel("t")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(outdir, f"{name}.svg")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def _build_arg_parser():
    parser = argparse.ArgumentParser(
        prog="twophase",
        description="Two-phase rising-bubble benchmark solver")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a benchmark simulation")
    run_p.add_argument("--config", help="flat key = value configuration file")
    run_p.add_argument("--preset", choices=PRESETS)
    run_p.add_argument("--level", help="fine,coarse exponents, e.g. 5,2")
    run_p.add_argument("--timestep-divisor", type=int, dest="timestep_divisor")
    run_p.add_argument("--element", choices=sp.VARIANTS)
    run_p.add_argument("--xfem", choices=("on", "off"))
    run_p.add_argument("--density-strategy", dest="density_strategy",
                       choices=(asm.MIDPOINT, asm.VOLUME_FRACTION))
    run_p.add_argument("--strict", choices=("on", "off"))
    run_p.add_argument("--fixed-mesh", dest="fixed_mesh", choices=("on", "off"))
    run_p.add_argument("--t-end", dest="t_end", type=float)
    run_p.add_argument("--outdir")
    run_p.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    run_p.add_argument("--force", action="store_const", const="on")
    run_p.add_argument("--progress", type=int, default=0,
                       help="print a status line every N steps")

    plot_p = sub.add_parser("plot", help="render SVG charts from a series")
    plot_p.add_argument("--series", required=True)
    plot_p.add_argument("--outdir", required=True)
    return parser


def main(argv=None):
    parser = _build_arg_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "plot":
            series = tl.BenchmarkSeries.from_csv(args.series)
            emit_plots(series, args.outdir)
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TwoPhaseError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    return 0


def _cmd_run(args):
    file_values = read_config_file(args.config) if args.config else None
    flags = {k: getattr(args, k) for k in
             ("preset", "level", "timestep_divisor", "element", "xfem",
              "density_strategy", "strict", "fixed_mesh", "t_end", "outdir",
              "snapshot_every", "force")}
    config = parse_config(file_values, **flags)
    if config.outdir is None:
        k = int(np.log2(config.n_fine))
        l = int(np.log2(config.n_coarse))
        config.outdir = os.path.join("out", f"{config.preset.name}_{k}_{l}")
    if os.path.exists(config.outdir) and os.listdir(config.outdir) \
            and not config.force:
        raise ConfigError(
            f"output directory {config.outdir!r} is not empty; "
            "pass --force to overwrite")
    series, sim = tl.run(config, progress=args.progress or None)
    emit_plots(series, config.outdir)
    summary = sim.summary()
    print(json.dumps(summary, indent=2))
    return 0
