"""Command line entry point: ``hydroneuro <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.stats import poisson

from . import __version__
from .auxcouple import coupling_report, run_aux, run_coupled
from .config import PARTITION_KEYS, ConfigError, ExperimentConfig, config_from_dict, load_raw
from .limit import ledger_init, ledger_step, ledger_vs_aux, solve_pde
from .metrics import (
    THREADS_ENV,
    BoundViolation,
    bound_audit,
    convergence_study,
    replica_generator,
    weak_residual_table,
    worker_count,
)
from .microsim import simulate
from .model import integer_ratio, sample_initial_state

SCHEMA_VERSION = 1
VERSION_STRING = f"v{__version__}"


# ------------------------------------------------------------------ output


def _plain(obj: Any) -> Any:
    """JSON-ready copy: numpy scalars and arrays become Python values, NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _cell(v: Any) -> Any:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


class ArtifactWriter:
    """Writes every artifact as ``<name>.partial`` and renames them all on commit.

    A run that dies half way leaves only ``.partial`` files behind, so a
    reader can never mistake an interrupted run for a finished one.
    """

    def __init__(self, directory: Path, figures: bool = True):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.figures = figures
        self.names: list[str] = []

    def _partial(self, name: str) -> Path:
        self.names.append(name)
        return self.directory / (name + ".partial")

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
        with self._partial(name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])

    def json(self, name: str, obj: Any) -> None:
        with self._partial(name).open("w") as fh:
            json.dump(_plain(obj), fh, indent=2, allow_nan=False)
            fh.write("\n")

    def figure(self, name: str, fig) -> None:
        from .plotting import close

        if not self.figures:
            close(fig)
            return
        path = self._partial(name)
        fig.savefig(path, dpi=120, format=Path(name).suffix.lstrip("."))
        close(fig)

    def commit(self) -> None:
        for name in self.names:
            os.replace(self.directory / (name + ".partial"), self.directory / name)


# ------------------------------------------------------------------ arguments


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from exc


def _common(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="TOML experiment file (built-in defaults if omitted)")
    p.add_argument("--out", default=default, help="output directory (overrides output.directory)")
    p.add_argument("--seed", type=int, default=default, help="root seed (overrides run.seed)")
    p.add_argument("--threads", type=int, default=default, help=f"worker processes (default ${THREADS_ENV} or 1)")
    p.add_argument("--no-figures", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="skip PNG figures")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydroneuro",
        description="Spiking network simulator and mean-field limit toolkit.",
        parents=[_common(False)],
    )
    parser.add_argument("--version", action="version", version=f"hydroneuro {VERSION_STRING}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<subcommand>")
    common = _common(True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common])

    s = add("simulate", "run the network once and write the spike log and snapshots")
    s.add_argument("--horizon", type=float)
    s.add_argument("--snapshot-times", type=_floats, help="comma separated times, e.g. 0.5,1")
    s.add_argument("--substep", type=float)

    for name, text in (
        ("aux", "run the discretized auxiliary process and compare it with the level/mass recursion"),
        ("couple", "run the network and auxiliary process jointly and record the coupling statistics"),
    ):
        s = add(name, text)
        s.add_argument("--horizon", type=float)
        s.add_argument("--delta", type=_floats, help="macro time step (comma list sweeps)")
        s.add_argument("--ell", type=_floats, help="square side (comma list sweeps)")
        s.add_argument("--ebin", type=_floats, help="potential bin width (comma list sweeps)")
        s.add_argument("--tau", type=_floats, help="spike-time bin width (comma list sweeps)")
        s.add_argument("--replicas", type=int)

    s = add("pde", "solve the limit equation by the delta-scheme with extrapolation")
    s.add_argument("--horizon", type=float)
    s.add_argument("--delta", type=float, help="coarsest delta")
    s.add_argument("--delta-levels", type=int, help="number of halvings of delta")
    s.add_argument("--ugrid", type=int)
    s.add_argument("--rgrid", type=int)

    s = add("converge", "measure the network-to-limit distance over a sweep of epsilon")
    s.add_argument("--horizon", type=float)
    s.add_argument("--epsilons", type=_floats)
    s.add_argument("--replicas", type=int)

    s = add("audit", "check the pathwise sup-norm bound and spike count statistics")
    s.add_argument("--horizon", type=float)
    s.add_argument("--replicas", type=int)
    s.add_argument("--window", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = load_raw(args.config)
    sections = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            sections.setdefault(section, {})[key] = value

    get = lambda name: getattr(args, name, None)  # noqa: E731
    put("run", "seed", get("seed"))
    put("run", "horizon", get("horizon"))
    put("run", "replicas", get("replicas"))
    put("run", "substep", get("substep"))
    put("run", "snapshot_times", get("snapshot_times"))
    put("output", "directory", get("out"))
    if get("no_figures"):
        put("output", "figures", False)
    if args.command in ("aux", "couple"):
        for key, flag in zip(PARTITION_KEYS, ("delta", "ell", "ebin", "tau")):
            v = get(flag)
            put("partition", key, None if v is None else (v[0] if len(v) == 1 else v))
    if args.command == "pde":
        put("pde", "delta", get("delta"))
        put("pde", "levels", get("delta_levels"))
        put("pde", "ugrid", get("ugrid"))
        put("pde", "rgrid", get("rgrid"))
    put("converge", "epsilons", get("epsilons"))
    put("audit", "window", get("window"))
    return config_from_dict(sections, args.config)


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    spec = cfg.model_spec()
    run = cfg.run
    horizon = float(run["horizon"])
    rng = replica_generator(run["seed"], spec.mesh.n_side, 0)
    state = sample_initial_state(spec, rng)
    snaps = sorted(float(t) for t in run["snapshot_times"])
    bad = [t for t in snaps if not 0 <= t <= horizon]
    if bad:
        raise ConfigError([f"run.snapshot_times: {bad} lie outside [0, run.horizon={horizon!r}]"])
    u0 = state.potentials.copy()
    start = time.perf_counter()
    res = simulate(spec, state, horizon, rng, substep=run.get("substep"), snapshot_times=[t for t in snaps if t > 0])
    sites = spec.mesh.sites
    times, idx, pre = res.events.arrays()
    out.csv("events.csv", ("time", "site", "pre_potential"), zip(times, idx, pre))
    for t in snaps:
        pot = u0 if t == 0 else res.snapshots[t]
        out.csv(f"snapshot_{t!r}.csv", ("site_x", "site_y", "potential"), zip(sites[:, 0], sites[:, 1], pot))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "sites": spec.mesh.count,
        "epsilon": spec.mesh.epsilon,
        "horizon": horizon,
        "spikes": len(res.events),
        "proposals": res.proposals,
        "acceptance_fraction": len(res.events) / res.proposals if res.proposals else None,
        "initial_sup": res.initial_sup,
        "sup_norm": res.sup_norm,
        "max_potential": res.sup_norm,
        "final_mean_potential": float(res.state.potentials.mean()),
        "snapshot_times": snaps,
        "wall_time": time.perf_counter() - start,
    }
    out.json("summary.json", summary)
    if out.figures:
        from .plotting import raster_figure

        out.figure("raster.png", raster_figure(times, idx, spec.mesh.count, horizon))
    return {"spikes": summary["spikes"]}


def _steps(cfg: ExperimentConfig, delta: float) -> int:
    try:
        return integer_ratio(cfg.run["horizon"], delta)
    except ValueError:
        raise ConfigError([f"run.horizon={cfg.run['horizon']!r} is not a multiple of partition.delta={delta!r}"])


def cmd_aux(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    spec = cfg.model_spec()
    rows, cells = [], []
    for c, part in enumerate(cfg.partition_cells()):
        steps = _steps(cfg, part.delta)
        kern = spec.cell_kernels(part.n_side)
        states = run_aux(spec, part, cfg.run["horizon"], replica_generator(cfg.run["seed"], spec.mesh.n_side, c))
        ledger = ledger_init(spec.psi0, part, kern)
        mass0 = ledger.masses.sum(axis=1)
        gaps = []
        for n in range(steps + 1):
            if n:
                ledger = ledger_step(ledger, part, kern, spec.phi)
            cmp = ledger_vs_aux(ledger, states[n], spec.mesh.epsilon)
            gaps.append((n, cmp["level_gap"], cmp["mass_gap"]))
            eta = spec.mesh.epsilon**2 * states[n].occupation()
            for m, k in itertools.product(range(part.n_squares), range(ledger.levels.shape[1])):
                rows.append((c, n, m, k, states[n].levels[m, k], ledger.levels[m, k], eta[m, k], ledger.masses[m, k]))
        g = np.array(gaps)
        cells.append({
            "cell": c,
            **{k: getattr(part, k) for k in PARTITION_KEYS},
            "steps": steps,
            "level_gap": g[:, 1].tolist(),
            "mass_gap": g[:, 2].tolist(),
            "final_level_gap": float(g[-1, 1]),
            "ledger_mass_drift": float(np.abs(ledger.masses.sum(axis=1) - mass0).max()),
        })
        if out.figures and c == 0:
            from .plotting import aux_figure

            out.figure("aux.png", aux_figure(g[:, 0], g[:, 1], g[:, 2]))
    out.csv("aux_levels.csv", ("cell", "n", "square", "level", "aux_level", "ledger_level", "aux_mass", "ledger_mass"),
            rows)
    out.json("aux_summary.json", {"schema_version": SCHEMA_VERSION, "epsilon": spec.mesh.epsilon, "cells": cells})
    return {"cells": len(cells)}


def _coupled_replica(task: tuple) -> Any:
    spec, part, horizon, seed, key, substep = task
    return run_coupled(spec, part, horizon, replica_generator(seed, *key), substep).ledger


def cmd_couple(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    from .metrics import map_replicas

    spec = cfg.model_spec()
    reps = cfg.run["replicas"]
    phistar = spec.phi.sup_bound
    groups: dict[tuple, dict[float, list]] = {}
    for c, part in enumerate(cfg.partition_cells()):
        _steps(cfg, part.delta)
        tasks = [(spec, part, cfg.run["horizon"], cfg.run["seed"], (spec.mesh.n_side, c, k), cfg.run.get("substep"))
                 for k in range(reps)]
        groups.setdefault((part.ell, part.E, part.tau), {})[part.delta] = map_replicas(_coupled_replica, tasks, workers)
    rows, reports = [], []
    for (ell, E, tau), ledgers in groups.items():
        rep = coupling_report(ledgers, spec.mesh.epsilon)
        rep.update(ell=ell, E=E, tau=tau)
        for block in rep["per_delta"]:
            block["bad_fraction_bound"] = 4 * phistar**2 * block["delta"]
            block["bad_fraction_within_bound"] = bool(
                block["bad_fraction_max_mean"]
                <= block["bad_fraction_bound"] + 3 * np.nan_to_num(block["bad_fraction_max_stderr"])
            )
            for s in block["steps"]:
                rows.append((block["delta"], ell, E, tau, s["n"], s["theta_n"], s["bad_fraction"]))
        reports.append(rep)
    out.csv("coupling.csv", ("delta", "ell", "E", "tau", "n", "theta_n", "bad_fraction"), rows)
    out.json("coupling_summary.json", {"schema_version": SCHEMA_VERSION, "replicas": reps, "phi_star": phistar,
                                       "groups": reports})
    if out.figures and reports:
        from .plotting import coupling_figure

        out.figure("coupling.png", coupling_figure(reports[0]))
    return {"groups": len(reports)}


def cmd_pde(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    spec = cfg.model_spec()
    p = cfg.pde
    horizon = float(cfg.run["horizon"])
    sol = solve_pde(spec, horizon, p["delta"], p["levels"], p["rgrid"], p["ugrid"], p["born_nodes"], p["obs_level"])
    kern = sol.kern
    for t in sol.obs_times:
        fld = sol.fields[t]
        rows = []
        for i in range(fld.size):
            x, y = kern.centers[i]
            rows += [(u, x, y, r, "born") for u, r in zip(fld.born_u[i], fld.born_rho[i])]
            rows += [(u, x, y, r, "init") for u, r in zip(fld.init_u[i], fld.init_rho[i])]
        out.csv(f"rho_{t!r}.csv", ("u", "r_x", "r_y", "rho", "branch"), rows)
    rows = []
    for j, t in enumerate(sol.times):
        for i in range(kern.size):
            rows.append((t, kern.centers[i, 0], kern.centers[i, 1], sol.ubar[j, i], sol.p[j, i], sol.q[j, i],
                         sol.ustar[j, i]))
    out.csv("scalars.csv", ("t", "r_x", "r_y", "ubar", "p", "q", "ustar"), rows)
    per_time = []
    for t in sol.obs_times:
        fld = sol.fields[t]
        per_time.append({
            "t": t,
            "mass_defect": float(np.abs(fld.mass() - 1.0).max()),
            "boundary_defect": float(sol.boundary_defect(t).max()) if t > 0 else None,
            "front_jump": float(np.nanmax(np.abs(fld.front_jump()))) if t > 0 else None,
            "error_estimate": sol.error_estimate(t),
        })
    half = sol.obs_times[len(sol.obs_times) // 2]
    residuals = weak_residual_table(spec.psi0, kern, spec.phi, half, p["delta"], p["ugrid"], p["born_nodes"]) \
        if half > 0 else {}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "deltas": sol.deltas,
        "obs_times": sol.obs_times,
        "converged": sol.converged,
        "level_gaps": sol.level_gaps,
        "times": per_time,
        "weak_residuals": {"t": half, "delta": p["delta"], "max_abs": residuals},
    }
    if not sol.converged:
        summary["warning"] = "level gaps do not shrink monotonically as delta is halved; the extrapolated field is unreliable"
        print("warning: " + summary["warning"], file=sys.stderr)
    out.json("pde_summary.json", summary)
    if out.figures:
        from .plotting import density_figure

        top = max(float(f.top.max()) for f in sol.fields.values())
        shown = {t: sol.fields[t] for t in sol.obs_times[:: max(1, len(sol.obs_times) // 4)]}
        out.figure("rho.png", density_figure(shown, sorted({0, kern.size - 1}), np.linspace(0, top * 1.02, 600)))
    return {"converged": sol.converged}


def cmd_converge(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    spec = cfg.model_spec()
    p = cfg.pde
    horizon = float(cfg.run["horizon"])
    sol = solve_pde(spec, horizon, p["delta"], p["levels"], p["rgrid"], p["ugrid"], p["born_nodes"], p["obs_level"])
    times = sorted({0.0, horizon / 2, horizon})
    report = convergence_study(spec, cfg.converge["epsilons"], sol, cfg.run["replicas"], cfg.run["seed"], times,
                               substep=cfg.run.get("substep"), workers=workers)
    rows = []
    for c in report.cells:
        if c["skipped"]:
            continue
        for j, t in enumerate(c["times"]):
            rows.append((c["epsilon"], c["sites"], t, c["replicas"], c["mean"][j], c["stderr"][j]))
    out.csv("convergence.csv", ("epsilon", "sites", "t", "replicas", "mean", "stderr"), rows)
    d = report.to_dict()
    d["pde_converged"] = sol.converged
    out.json("report.json", d)
    if out.figures:
        from .plotting import convergence_figure

        out.figure("convergence.png", convergence_figure(d))
    return {"cells": len(report.cells)}


def _audit_replica(task: tuple):
    spec, horizon, seed, key, substep = task
    rng = replica_generator(seed, *key)
    return simulate(spec, sample_initial_state(spec, rng), horizon, rng, substep=substep)


def cmd_audit(cfg: ExperimentConfig, out: ArtifactWriter, workers: int) -> dict:
    from .metrics import map_replicas

    spec = cfg.model_spec()
    horizon = float(cfg.run["horizon"])
    window = float(cfg.audit["window"])
    integer_ratio(horizon, window)
    tasks = [(spec, horizon, cfg.run["seed"], (spec.mesh.n_side, k), cfg.run.get("substep"))
             for k in range(cfg.run["replicas"])]
    results = map_replicas(_audit_replica, tasks, workers)
    try:
        audit = bound_audit(results, spec, horizon, window)
    except BoundViolation as exc:
        out.json("audit.json", {"schema_version": SCHEMA_VERSION, "path_bound_holds": False, "error": str(exc)})
        raise
    counts = np.array([r["spikes"] for r in audit["rows"]])
    mean_rate = spec.phi.sup_bound * horizon / spec.mesh.epsilon**2
    audit["poisson_mean"] = mean_rate
    audit["count_p99"] = float(np.percentile(counts, 99))
    audit["poisson_p999"] = float(poisson.ppf(0.999, mean_rate))
    audit["poisson_domination_holds"] = bool(audit["count_p99"] <= audit["poisson_p999"])
    header = ("replica", "spikes", "initial_sup", "sup_norm", "path_bound", "max_window_spikes")
    out.csv("audit.csv", header, ([r[k] for k in header] for r in audit["rows"]))
    audit.pop("rows")
    out.json("audit.json", audit)
    return {"poisson_domination_holds": audit["poisson_domination_holds"]}


COMMANDS = {
    "simulate": cmd_simulate,
    "aux": cmd_aux,
    "couple": cmd_couple,
    "pde": cmd_pde,
    "converge": cmd_converge,
    "audit": cmd_audit,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"hydroneuro: {exc}", file=sys.stderr)
        return 2
    workers = worker_count(args.threads)
    out = ArtifactWriter(Path(cfg.output["directory"]), bool(cfg.output["figures"]))
    start = time.perf_counter()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": "hydroneuro",
        "version": VERSION_STRING,
        "command": args.command,
        "argv": argv,
        "seed": cfg.run["seed"],
        "threads": workers,
        "config_source": cfg.source,
        "config": cfg.resolved(),
    }
    try:
        result = COMMANDS[args.command](cfg, out, workers)
    except ConfigError as exc:
        print(f"hydroneuro: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # leave the .partial files in place
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                        wall_time=time.perf_counter() - start, outputs=out.names)
        out.json("run_manifest.json", manifest)
        print(f"hydroneuro {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest.update(status="ok", result=result, wall_time=time.perf_counter() - start, outputs=list(out.names))
    out.json("run_manifest.json", manifest)
    out.commit()
    print(f"hydroneuro {args.command}: wrote {len(out.names)} files to {out.directory}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
