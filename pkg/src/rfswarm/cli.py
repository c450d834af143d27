"""Command-line entry point: run scenarios, benchmark controllers, export logs.

Three subcommands:

* ``run`` executes one scenario and writes trajectory.csv,
  diagnostics.json, and snapshots.svg into the output directory;
* ``bench`` runs scenarios under both controllers with equal seeds and
  reports wall-clock, final cost, and final per-intensity error;
* ``validate`` checks a scenario file (schema and dimensional
  consistency) without running it.

Exports are deterministic: floats are serialized with nine significant
digits, rendering is a pure function of the log, and wall-clock figures
are confined to diagnostics.json.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .swarmsim import (
    Scenario,
    ScenarioError,
    SimLog,
    bundled_scenario,
    bundled_scenario_names,
    nearest_target_distances,
    run_scenario,
    validate_scenario_dict,
)

__all__ = ["RunManifest", "cmd_bench", "cmd_run", "cmd_validate", "main"]

_FORMATS = ("csv", "json", "svg")


@dataclass(frozen=True)
class RunManifest:
    """What to run and where the artifacts go."""

    scenario_path: str
    out_dir: str
    formats: tuple = _FORMATS
    seed_override: int | None = None

    def __post_init__(self):
        if not self.formats:
            raise ValueError("at least one export format is required")
        bad = [f for f in self.formats if f not in _FORMATS]
        if bad:
            raise ValueError(f"unknown export formats: {bad}")


def _load_scenario(path_or_name: str) -> Scenario:
    path = Path(path_or_name)
    if path.exists():
        return Scenario.from_path(path)
    return bundled_scenario(path_or_name)


def _fmt(value: float) -> str:
    """Nine-significant-digit float serialization (export contract)."""
    return f"{value:.9g}"


# ---------------------------------------------------------------------------
# CSV / JSON exports.
# ---------------------------------------------------------------------------


def trajectory_csv(log: SimLog) -> str:
    """Flat per-entity trajectory table.

    One row per (step, entity); entity kinds are intensity, agent,
    target, estimate, and measurement.  Velocity and weight cells are
    left empty where the entity does not carry them.
    """
    n_pos = log.agent_states.shape[2] // 2 if log.agent_states.size else 2
    pos_cols = ["x", "y", "z"][:n_pos]
    vel_cols = ["vx", "vy", "vz"][:n_pos]
    header = ["step", "t", "entity_kind", "entity_id", *pos_cols, *vel_cols, "weight"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)

    def state_cells(state):
        return [_fmt(v) for v in state[:n_pos]] + [_fmt(v) for v in state[n_pos:2 * n_pos]]

    n_steps = log.n_steps
    for k in range(n_steps + 1):
        t_cell = _fmt(log.times[k])
        for i, mean in enumerate(np.atleast_2d(log.intensity_means[k])):
            if mean.size == 0:
                continue
            writer.writerow([k, t_cell, "intensity", i, *state_cells(mean),
                             _fmt(log.intensity_weights[k][i])])
        for i, mean in enumerate(np.atleast_2d(log.target_means[k])):
            writer.writerow([k, t_cell, "target", i, *state_cells(mean), _fmt(1.0)])
        for i in range(log.agent_states.shape[1]):
            if log.agent_alive[k, i]:
                writer.writerow([k, t_cell, "agent", i,
                                 *state_cells(log.agent_states[k, i]), ""])
        if k < n_steps:
            for i, z in enumerate(np.atleast_2d(log.measurements[k])):
                if z.size == 0:
                    continue
                cells = [_fmt(v) for v in z] + [""] * (2 * n_pos - len(z))
                writer.writerow([k, t_cell, "measurement", i, *cells, ""])
            for i, est in enumerate(log.estimates[k]):
                writer.writerow([k, t_cell, "estimate", i, *state_cells(est), ""])
    return buf.getvalue()


def diagnostics_json(log: SimLog, scenario: Scenario) -> str:
    """Run metadata, controller records, timings, final errors."""
    n_pos = scenario.n_pos
    final_means = np.atleast_2d(log.intensity_means[-1])
    if final_means.size:
        errors = nearest_target_distances(final_means, log.target_means[-1], n_pos)
        final_sse = [round(float(e), 9) for e in errors]
    else:
        final_sse = []
    payload = {
        "scenario": scenario.to_dict(),
        "controller_records": list(log.controller_records),
        "wallclock_ms": log.wallclock_ms,
        "final_cost": float(log.step_costs[-1]) if log.n_steps else None,
        "total_cost": float(log.step_costs.sum()),
        "final_nearest_target_errors": final_sse,
        "cardinality_true": log.cardinality_true.tolist(),
        "cardinality_est": None if log.cardinality_est is None else log.cardinality_est.tolist(),
    }
    return json.dumps(payload, indent=2, default=float)


# ---------------------------------------------------------------------------
# SVG snapshots.
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf")


def _ellipse_svg(mean, cov, color):
    """2-sigma covariance ellipse of the position block."""
    vals, vecs = np.linalg.eigh(cov[:2, :2])
    vals = np.maximum(vals, 0.0)
    angle = np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1]))
    rx, ry = 2.0 * np.sqrt(vals[1]), 2.0 * np.sqrt(vals[0])
    return (
        f'<ellipse cx="{mean[0]:.4f}" cy="{mean[1]:.4f}" rx="{rx:.4f}" ry="{ry:.4f}" '
        f'transform="rotate({angle:.2f} {mean[0]:.4f} {mean[1]:.4f})" '
        f'fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="0.5"/>'
    )


def snapshot_svg(log: SimLog, times=None, panel_px=260) -> str:
    """Multi-panel snapshot figure: intensity ellipses, agents, targets.

    A pure function of the log and the requested times, so identical
    logs render to byte-identical files.
    """
    if times is None or not len(times):
        times = [log.times[0], log.times[-1]]
    steps = [int(np.argmin(np.abs(log.times - t))) for t in times]

    all_pts = [np.atleast_2d(m)[:, :2] for m in log.target_means if np.size(m)]
    all_pts += [np.atleast_2d(m)[:, :2] for m in log.intensity_means if np.size(m)]
    pts = np.vstack(all_pts) if all_pts else np.zeros((1, 2))
    lo = pts.min(axis=0) - 1.0
    hi = pts.max(axis=0) + 1.0
    span = float(max(hi - lo))
    scale = (panel_px - 20) / span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{panel_px * len(steps)}" height="{panel_px + 24}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for panel, k in enumerate(steps):
        ox = panel * panel_px + 10
        parts.append(
            f'<text x="{ox}" y="14" font-size="11" font-family="monospace">'
            f"t = {_fmt(log.times[k])} s</text>"
        )
        parts.append(
            f'<g transform="translate({ox},{panel_px + 10}) scale({scale:.5f},-{scale:.5f}) '
            f'translate({-lo[0]:.4f},{-lo[1]:.4f})">'
        )
        for i, tgt in enumerate(np.atleast_2d(log.target_means[k])):
            s = 3.0 / scale
            parts.append(
                f'<path d="M {tgt[0]-s:.4f} {tgt[1]-s:.4f} L {tgt[0]+s:.4f} {tgt[1]+s:.4f} '
                f'M {tgt[0]-s:.4f} {tgt[1]+s:.4f} L {tgt[0]+s:.4f} {tgt[1]-s:.4f}" '
                f'stroke="black" stroke-width="{1.2/scale:.5f}"/>'
            )
        means = np.atleast_2d(log.intensity_means[k])
        covs = log.intensity_covs[k]
        for i in range(means.shape[0] if means.size else 0):
            parts.append(_ellipse_svg(means[i], np.asarray(covs[i]), _COLORS[i % len(_COLORS)]))
        for i in range(log.agent_states.shape[1]):
            if log.agent_alive[k, i]:
                p = log.agent_states[k, i]
                parts.append(
                    f'<circle cx="{p[0]:.4f}" cy="{p[1]:.4f}" r="{2.0/scale:.5f}" fill="#c00000"/>'
                )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def cmd_run(manifest: RunManifest) -> int:
    """Execute one scenario and write the requested artifacts.

    Exit codes: 0 on success, 1 on a scenario schema error (the message
    names the offending field), 2 on a runtime failure (partial logs are
    flushed if available).
    """
    try:
        scenario = _load_scenario(manifest.scenario_path)
    except (ScenarioError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    if manifest.seed_override is not None:
        scenario = scenario.with_seed(manifest.seed_override)
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        log = run_scenario(scenario)
    except Exception as exc:  # noqa: BLE001 - report and flag via exit code
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        (out / "diagnostics.json").write_text(
            json.dumps({"scenario": scenario.to_dict(), "error": repr(exc)}, indent=2),
            encoding="utf-8",
        )
        return 2
    if "csv" in manifest.formats:
        (out / "trajectory.csv").write_text(trajectory_csv(log), encoding="utf-8")
    if "json" in manifest.formats:
        (out / "diagnostics.json").write_text(diagnostics_json(log, scenario), encoding="utf-8")
    if "svg" in manifest.formats:
        (out / "snapshots.svg").write_text(
            snapshot_svg(log, scenario.snapshot_times), encoding="utf-8")
    return 0


def _bench_one(scenario: Scenario, kind: str):
    runnable = scenario.with_controller_kind(kind)
    start = time.perf_counter()
    try:
        log = run_scenario(runnable)
    except Exception as exc:  # noqa: BLE001 - flagged per row
        return {"scenario": scenario.name, "controller": kind, "error": repr(exc)}
    wall_s = time.perf_counter() - start
    final_means = np.atleast_2d(log.intensity_means[-1])
    errors = nearest_target_distances(final_means, log.target_means[-1], scenario.n_pos)
    return {
        "scenario": scenario.name,
        "controller": kind,
        "wall_s": wall_s,
        "total_cost": float(log.step_costs.sum()),
        "final_cost": float(log.step_costs[-1]),
        "sse_max": float(errors.max()),
        "sse_mean": float(errors.mean()),
    }


def cmd_bench(scenario_paths, out_csv: str | None = None) -> int:
    """Run each scenario under both controllers with equal seeds.

    RFS_SWARM_THREADS > 1 runs rows concurrently.  A per-row failure is
    flagged in the table without aborting the rest.
    """
    try:
        scenarios = [_load_scenario(p) for p in scenario_paths]
    except (ScenarioError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    jobs = [(scn, kind) for scn in scenarios for kind in ("ilqr", "mpc")]
    threads = int(os.environ.get("RFS_SWARM_THREADS", "1") or "1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda job: _bench_one(*job), jobs))
    else:
        rows = [_bench_one(*job) for job in jobs]

    header = ["scenario", "controller", "wall_s", "total_cost", "final_cost",
              "sse_max", "sse_mean", "error"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([
            row.get("scenario", ""), row.get("controller", ""),
            _fmt(row["wall_s"]) if "wall_s" in row else "",
            _fmt(row["total_cost"]) if "total_cost" in row else "",
            _fmt(row["final_cost"]) if "final_cost" in row else "",
            _fmt(row["sse_max"]) if "sse_max" in row else "",
            _fmt(row["sse_mean"]) if "sse_mean" in row else "",
            row.get("error", ""),
        ])
    table = buf.getvalue()
    print(table, end="")
    if out_csv:
        Path(out_csv).write_text(table, encoding="utf-8")
    return 0


def cmd_validate(scenario_path: str) -> int:
    """Schema and dimensional-consistency check without running."""
    path = Path(scenario_path)
    try:
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            data = bundled_scenario(scenario_path).to_dict()
    except FileNotFoundError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"scenario error: invalid JSON: {exc}", file=sys.stderr)
        return 1
    errors = validate_scenario_dict(data)
    if errors:
        field_name, message = errors[0]
        print(f"invalid scenario: {field_name}: {message}", file=sys.stderr)
        return 1
    print("scenario ok")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rfswarm",
        description="Swarm-intensity control scenarios: run, benchmark, validate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and export artifacts")
    p_run.add_argument("scenario", help="scenario file or bundled name")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="seed override")
    p_run.add_argument("--format", default="csv,json,svg",
                       help="comma-separated subset of csv,json,svg")

    p_bench = sub.add_parser("bench", help="compare controllers on scenarios")
    p_bench.add_argument("scenarios", nargs="+", help="scenario files or bundled names")
    p_bench.add_argument("--out", default=None, help="also write the table to this CSV")

    p_val = sub.add_parser("validate", help="validate a scenario file")
    p_val.add_argument("scenario", help="scenario file or bundled name")

    sub.add_parser("list", help="list bundled scenarios")

    args = parser.parse_args(argv)
    if args.command == "run":
        formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
        try:
            manifest = RunManifest(scenario_path=args.scenario, out_dir=args.out,
                                   formats=formats, seed_override=args.seed)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return cmd_run(manifest)
    if args.command == "bench":
        return cmd_bench(args.scenarios, args.out)
    if args.command == "validate":
        return cmd_validate(args.scenario)
    if args.command == "list":
        for name in bundled_scenario_names():
            print(name)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
