"""Command-line entry point: ``rigidflow <subcommand> [--config] CFG [--out DIR]``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure or non-finite
output, 3 run stopped by collision (outputs are still written), 64 usage.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_COLLISION = 3
EXIT_USAGE = 64

SIMULATE_COLUMNS = ("t", "h_x", "h_y", "theta", "l_x", "l_y", "r", "E_fluid", "E_solid")

log = logging.getLogger("rigidflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class _Context:
    def __init__(self, args):
        from .config import load_config

        path = args.config or args.config_pos
        if path is None:
            raise UsageError("a configuration file is required (--config PATH)")
        self.cfg = load_config(path)
        if args.dump_stride is not None:
            self.cfg = self.cfg.with_(dump_stride=args.dump_stride)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.quiet = args.quiet

    def say(self, msg):
        if not self.quiet:
            print(msg)


# subcommands ---------------------------------------------------------------------

def _energies(traj):
    from .diagnostics import kinetic_energies

    return np.array([kinetic_energies(traj, k) for k in range(len(traj))]).reshape(-1, 2)


def _simulate(ctx: _Context) -> int:
    from .io import dump_field, write_timeseries
    from .solver import COLLISION, run

    cfg = ctx.cfg
    traj = run(cfg)
    E = _energies(traj)
    rows = np.array([[f.t, *s.h, s.theta, *f.l, f.r] for s, f in zip(traj.states, traj.fields)]).reshape(-1, 7)
    csv = ctx.out / cfg.csv
    write_timeseries(csv, SIMULATE_COLUMNS, np.column_stack([rows, E]))
    if cfg.dump_stride > 0:
        nn = traj.solver.n_nodes
        for k in range(0, len(traj), cfg.dump_stride):
            dump_field(ctx.out / f"field_{k:06d}.fsifld", traj.fields[k], traj.disc.mesh, traj.states[k],
                       nodes=traj.flowmap.samples[k].X[:nn])
    ctx.say(f"{traj.status} t={traj.fields[-1].t:.6g} steps={len(traj) - 1} csv={csv}")
    return EXIT_COLLISION if traj.status == COLLISION else EXIT_OK


def _energy_audit(ctx: _Context) -> int:
    from .diagnostics import energy_audit
    from .io import write_timeseries
    from .solver import run

    traj = run(ctx.cfg)
    led = energy_audit(traj)
    write_timeseries(ctx.out / "energy.csv", led.COLUMNS, led.rows())
    ctx.say(f"relative energy residual {led.relative_residual():.6e} ({traj.status})")
    return EXIT_OK


def _compare(ctx: _Context) -> int:
    from .diagnostics import compare_runs
    from .io import write_timeseries
    from .solver import run

    cfg = ctx.cfg
    t1 = run(cfg)
    t2 = run(cfg.with_(dt=0.5 * cfg.dt))
    rep = compare_runs(t1, t2)
    write_timeseries(ctx.out / "compare.csv", rep.COLUMNS, rep.rows())
    late = rep.t >= 0.05
    total = float(rep.B_integral[-1] - (rep.B_integral[late][0] if late.any() else 0.0)) if len(rep.t) else 0.0
    ctx.say(f"E_hat(T) {rep.E_hat[-1]:.6e}  integral of B over t>=0.05 {total:.6e}")
    return EXIT_OK


def _geometry(cfg):
    from .assembly import Discretization
    from .mesh import build_annular_mesh

    mesh = build_annular_mesh(cfg.outer_radius, cfg.body_radius, cfg.nr, cfg.ntheta, cfg.body_center,
                              delta_safe=cfg.delta_safe_value)
    return Discretization(mesh)


def _kirchhoff(ctx: _Context) -> int:
    from .io import write_timeseries
    from .stokes_robin import kirchhoff_oracle, kirchhoff_potentials

    disc = _geometry(ctx.cfg)
    phi = kirchhoff_potentials(disc)
    y = disc.mesh.vnodes
    write_timeseries(ctx.out / "kirchhoff.csv", ("x", "y", "phi1", "phi2", "phi3"), np.column_stack([y, phi.T]))
    if not np.any(ctx.cfg.body_center):
        err = float(np.max(np.abs(phi[0] - kirchhoff_oracle(ctx.cfg.body_radius, ctx.cfg.outer_radius, y))))
        ctx.say(f"phi1 nodal max error vs concentric solution {err:.3e}")
    ctx.say(f"max |phi3| {float(np.max(np.abs(phi[2]))):.3e}")
    return EXIT_OK


def _added_mass(ctx: _Context) -> int:
    from .io import write_timeseries
    from .kinematics import MaterialParams
    from .stokes_robin import added_mass, added_mass_oracle, kirchhoff_potentials

    cfg = ctx.cfg
    disc = _geometry(cfg)
    A, K = added_mass(disc, kirchhoff_potentials(disc), MaterialParams.for_disk(cfg.body_radius, cfg.rho_s, cfg.alpha))
    rows = np.column_stack([np.arange(3), A, K])
    write_timeseries(ctx.out / "added_mass.csv", ("row", "A1", "A2", "A3", "K1", "K2", "K3"), rows)
    ctx.say(f"A11 {A[0, 0]:.10g}  eigenvalues of K {np.array2string(np.linalg.eigvalsh(K), precision=6)}")
    if not np.any(cfg.body_center):
        ref = added_mass_oracle(cfg.body_radius, cfg.outer_radius)
        ctx.say(f"A11 relative error vs concentric formula {abs(A[0, 0] - ref) / ref:.3e}")
    return EXIT_OK


def _verify_geomap(ctx: _Context) -> int:
    from .geomap import build_cutoff, prescribed_flowmap, verify_invariants
    from .io import write_timeseries

    cfg = ctx.cfg
    disc = _geometry(cfg)
    mesh = disc.mesh
    cut = build_cutoff(mesh.center, cfg.outer_radius, cfg.body_radius, cfg.delta_safe_value)
    l = np.asarray(cfg.l0, float)
    speed = float(np.linalg.norm(l))
    # stop the prescribed motion before the body reaches the collision threshold
    room = cfg.gap - 0.5 * cfg.delta_safe_value
    nsteps = int(round(cfg.t_final / cfg.dt))
    if speed > 0:
        nsteps = min(nsteps, int(0.9 * room / (speed * cfg.dt)))
    pts = np.vstack([mesh.vnodes, mesh.qp_points.reshape(-1, 2)])
    fm = prescribed_flowmap(pts, cut, l, cfg.r0, cfg.dt, max(nsteps, 1), cfg.ode_substeps)
    ang = np.linspace(0.0, 2 * np.pi, 33)[:-1]
    ring = np.stack([np.cos(ang), np.sin(ang)], -1)
    body = np.concatenate([cfg.body_radius * ring, 0.5 * cfg.body_radius * ring, np.zeros((1, 2))])
    checks = verify_invariants(fm, mesh.qp_weights, np.random.default_rng(0), body_points=body)
    ok = True
    for name, value, tol in checks:
        passed = value <= tol
        ok &= passed
        ctx.say(f"{'PASS' if passed else 'FAIL'} {name} {value:.3e} (tol {tol:.0e})")
    write_timeseries(ctx.out / "geomap.csv", ("check", "value", "tolerance"),
                     [[i, v, t] for i, (_, v, t) in enumerate(checks)])
    return EXIT_OK if ok else EXIT_NUMERICAL


def _manufactured(ctx: _Context) -> int:
    from .io import write_timeseries
    from .stokes_robin import manufactured_study

    cfg = ctx.cfg
    levels = tuple((cfg.nr * k, cfg.ntheta * k) for k in (1, 2, 4))
    h, ev, ep, orders = manufactured_study(cfg.outer_radius, cfg.body_radius, levels, cfg.alpha, cfg.body_center)
    rows = np.column_stack([[lv[0] for lv in levels], [lv[1] for lv in levels], h, ev, ep])
    write_timeseries(ctx.out / "manufactured.csv", ("nr", "ntheta", "h", "velocity_error", "pressure_error"), rows)
    ctx.say("observed velocity orders " + " ".join(f"{o:.3f}" for o in orders))
    return EXIT_OK


COMMANDS = {
    "simulate": (_simulate, "integrate the coupled system and write the trajectory CSV"),
    "energy-audit": (_energy_audit, "run and write the energy balance"),
    "compare": (_compare, "compare runs at dt and dt/2 through the change of variables"),
    "kirchhoff": (_kirchhoff, "compute the Kirchhoff potentials"),
    "added-mass": (_added_mass, "compute the added-mass matrix"),
    "verify-geomap": (_verify_geomap, "check the change-of-variables invariants"),
    "manufactured": (_manufactured, "convergence study of the steady slip solver"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rigidflow", description="Rigid body in a viscous fluid with Navier slip.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config_pos", nargs="?", metavar="CONFIG")
        p.add_argument("--config", help="configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--dump-stride", type=int, default=None, help="write a field dump every K steps")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def _thread_limit():
    n = os.environ.get("RIGIDFLOW_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    from .config import ConfigError
    from .geomap import FlowMapError
    from .io import FieldDumpError, NonFiniteOutputError
    from .solver import NumericalError
    from .stokes_robin import SolverError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "rigidflow: error: a subcommand is required")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        ctx = _Context(args)
        with _thread_limit():
            return COMMANDS[args.command][0](ctx)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FlowMapError, SolverError, NonFiniteOutputError, np.linalg.LinAlgError) as exc:
        print(f"rigidflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FieldDumpError, ValueError, OSError) as exc:
        print(f"rigidflow: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
