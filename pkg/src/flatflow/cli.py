"""Batch front end: scenario configs in, traces / reports / rasters out.

Commands
    flow <config>                  run a scenario, write artifacts
    diagnose <input> [--lambda X]  ball-union certificate for one set
    verify <dir>                   re-audit a finished run from its files
    oracle balls --radii .. --n .. closed-form ball-system trajectory

Exit codes: 0 ok, 1 usage or config error, 2 scheme abort
(inadmissible step), 3 verification failure.

Config files are flat ``key = value`` lines with dotted section
prefixes; ``#`` starts a comment.  Lists use commas, lists of points use
semicolons between points (``shape.centers = -0.8,0; 0.8,0``).  Keys:

    grid.dim, grid.shape, grid.spacing, grid.origin (optional; default
        centers the grid on 0)
    shape.kind = ball | ball_union | cube | dumbbell | noisy_ball,
        plus that kind's parameters (shape.radius, shape.centers,
        shape.side, shape.ball_radius, shape.neck_width, ...), or
        shape.raster = <path> to load a dumped set (its embedded
        geometry then replaces the grid block)
    h, horizon, out; optional store_stride (default 1), seed
        (default 0), diag.times (when to run the certificate),
        diag.r_fracs / diag.rho_fracs (erosion/dilation probes as
        fractions of R), tolerances.* (echoed into metadata)

The admissibility bound h < (ω/P)² is checked against the initial
shape before any step; violating it aborts with exit 2.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

from .alexandrov import (
    analyze,
    curvature_deviation,
    cluster_and_fit,
    estimate_lambda,
    montiel_ros_residuals,
    report_as_dict,
    write_montiel_ros_csv,
    write_report_json,
)
from .errors import FlatFlowError, BadParamsError, StepTooLargeError
from .flow import (
    FlowTrace,
    StepRecord,
    continuity_stats,
    encode_rle,
    multiplier_stats,
    read_trace_csv,
    run_flow,
    verify_dissipation,
    write_metadata_json,
    write_trace_csv,
)
from .grid import GridSet, GridSpec, dump_set, load_set, perimeter
from .oracle import BallSystem, ball_ode_integrate, make_shape, write_trajectory_csv

_RASTER_EXT = (".pgm", ".raw", ".raster")
_DEFAULT_R_FRACS = (0.3, 0.5, 0.7)
_DEFAULT_RHO_FRACS = (0.15, 0.3)


class _UsageError(Exception):
    pass


def parse_config(path) -> dict[str, str]:
    """Flat key=value file -> ordered dict of raw strings."""
    if not os.path.isfile(path):
        raise _UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise _UsageError(f"{path}:{lineno}: expected key = value")
            key, val = body.split("=", 1)
            key = key.strip()
            if not key:
                raise _UsageError(f"{path}:{lineno}: empty key")
            out[key] = val.strip()
    return out


def _require(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise _UsageError(f"missing config key {key!r}")
    return cfg[key]


def _as_float(cfg, key, default=None):
    raw = cfg.get(key)
    if raw is None:
        if default is None:
            raise _UsageError(f"missing config key {key!r}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise _UsageError(f"config key {key!r}: not a number: {raw!r}") from None


def _as_int(cfg, key, default=None):
    raw = cfg.get(key)
    if raw is None:
        if default is None:
            raise _UsageError(f"missing config key {key!r}")
        return default
    try:
        return int(raw)
    except ValueError:
        raise _UsageError(f"config key {key!r}: not an integer: {raw!r}") from None


def _as_floats(raw: str, key: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise _UsageError(f"config key {key!r}: not a number list: {raw!r}") from None


def _as_points(raw: str, key: str) -> list[list[float]]:
    return [_as_floats(part, key) for part in raw.split(";") if part.strip()]


def _grid_from_config(cfg: dict) -> GridSpec:
    dim = _as_int(cfg, "grid.dim")
    shape = [int(x) for x in _as_floats(_require(cfg, "grid.shape"), "grid.shape")]
    spacing = _as_float(cfg, "grid.spacing")
    if "grid.origin" in cfg:
        origin = _as_floats(cfg["grid.origin"], "grid.origin")
    else:
        origin = [-(s / 2 - 0.5) * spacing for s in shape]
    try:
        return GridSpec(dim, tuple(shape), spacing, tuple(origin))
    except FlatFlowError as err:
        raise _UsageError(f"grid block: {err}") from err


def _shape_params(cfg: dict) -> dict:
    """shape.* keys minus kind/raster, with point lists decoded."""
    params = {}
    for key, raw in cfg.items():
        if not key.startswith("shape.") or key in ("shape.kind", "shape.raster"):
            continue
        name = key[len("shape."):]
        pts = _as_points(raw, key)
        if len(pts) == 1 and len(pts[0]) == 1:
            params[name] = pts[0][0]
        elif len(pts) == 1:
            params[name] = pts[0]
        else:
            params[name] = pts
    return params


def _initial_set(cfg: dict) -> GridSet:
    if "shape.raster" in cfg:
        path = cfg["shape.raster"]
        if not os.path.isfile(path):
            raise _UsageError(f"raster file not found: {path}")
        return load_set(path)
    spec = _grid_from_config(cfg)
    kind = _require(cfg, "shape.kind")
    seed = _as_int(cfg, "seed", 0)
    try:
        return make_shape(kind, _shape_params(cfg), spec, seed=seed)
    except FlatFlowError as err:
        raise _UsageError(f"shape block: {err}") from err


def _raster_name(k: int, dim: int) -> str:
    return f"step_{k:06d}." + ("pgm" if dim == 2 else "raw")


def _write_diagnostics(trace: FlowTrace, cfg: dict, outdir: str) -> None:
    times = _as_floats(cfg.get("diag.times", ""), "diag.times")
    if not times:
        return
    r_fracs = _as_floats(cfg.get("diag.r_fracs", ""), "diag.r_fracs") or list(_DEFAULT_R_FRACS)
    rho_fracs = _as_floats(cfg.get("diag.rho_fracs", ""), "diag.rho_fracs") or list(_DEFAULT_RHO_FRACS)
    for t in times:
        k = min(max(int(round(t / trace.h)), 0), len(trace.records) - 1)
        gs = trace.set_at(k)
        base = os.path.join(outdir, f"diag_{k:06d}")
        if gs is None:
            with open(base + ".json", "w") as f:
                json.dump({"step": k, "error": "occupancy not stored"}, f, indent=2)
            continue
        try:
            report = analyze(gs)
            write_report_json(report, base + ".json")
            table = montiel_ros_residuals(
                gs,
                report.lambda_hat,
                [f * report.R for f in r_fracs],
                [f * report.R for f in rho_fracs],
            )
            write_montiel_ros_csv(table, base + ".csv")
        except FlatFlowError as err:
            # a failed certificate is a finding, not a crashed run
            with open(base + ".json", "w") as f:
                json.dump({"step": k, "error": f"{type(err).__name__}: {err}"}, f, indent=2)


def cmd_flow(config_path) -> int:
    cfg = parse_config(config_path)
    initial = _initial_set(cfg)
    h = _as_float(cfg, "h")
    horizon = _as_float(cfg, "horizon")
    outdir = _require(cfg, "out")
    stride = _as_int(cfg, "store_stride", 1)

    bound = (initial.spec.target_volume / perimeter(initial)) ** 2
    if not (0.0 < h < bound):
        print(
            f"time step h={h!r} violates the admissibility bound h < (ω/P)² "
            f"= {bound!r} for the initial shape",
            file=sys.stderr,
        )
        return 2

    try:
        trace = run_flow(initial, h, horizon, {"store_stride": stride})
    except StepTooLargeError as err:
        print(f"scheme aborted: {err}", file=sys.stderr)
        return 2
    except FlatFlowError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1

    os.makedirs(outdir, exist_ok=True)
    write_trace_csv(trace, os.path.join(outdir, "trace.csv"))
    write_metadata_json(trace, cfg, os.path.join(outdir, "metadata.json"))
    for rec in trace.records:
        gs = trace.set_at(rec.index)
        if gs is not None:
            dump_set(gs, os.path.join(outdir, _raster_name(rec.index, trace.spec.dim)))
    _write_diagnostics(trace, cfg, outdir)
    print(f"flow finished: {len(trace.records) - 1} steps, artifacts in {outdir}")
    return 0


def cmd_diagnose(input_path, lam: float | None = None, outdir: str = ".") -> int:
    if input_path.endswith(_RASTER_EXT):
        if not os.path.isfile(input_path):
            raise _UsageError(f"raster file not found: {input_path}")
        gs = load_set(input_path)
    else:
        gs = _initial_set(parse_config(input_path))
    lam_hat = estimate_lambda(gs) if lam is None else float(lam)
    if not (lam_hat > 0 and math.isfinite(lam_hat)):
        raise _UsageError(f"multiplier must be positive, got {lam_hat!r}")
    eps = curvature_deviation(gs, lam_hat)
    _, report = cluster_and_fit(gs, eps, lam_hat)
    os.makedirs(outdir, exist_ok=True)
    write_report_json(report, os.path.join(outdir, "report.json"))
    table = montiel_ros_residuals(
        gs,
        lam_hat,
        [f * report.R for f in _DEFAULT_R_FRACS],
        [f * report.R for f in _DEFAULT_RHO_FRACS],
    )
    write_montiel_ros_csv(table, os.path.join(outdir, "montiel_ros.csv"))
    flag = " (outside theorem hypothesis)" if report.outside_hypothesis else ""
    print(
        f"N={report.N} R={report.R:.6g} eps={report.epsilon:.6g} "
        f"hausdorff={report.hausdorff_one_sided:.6g}{flag}"
    )
    return 0


def _trace_from_artifacts(dirpath) -> tuple[FlowTrace, dict]:
    meta_path = os.path.join(dirpath, "metadata.json")
    csv_path = os.path.join(dirpath, "trace.csv")
    if not (os.path.isfile(meta_path) and os.path.isfile(csv_path)):
        raise _UsageError(f"{dirpath}: missing metadata.json or trace.csv")
    with open(meta_path) as f:
        meta = json.load(f)
    g = meta["grid"]
    spec = GridSpec(g["dim"], tuple(g["shape"]), g["spacing"], tuple(g["origin"]))
    h = meta["h"]
    rows = read_trace_csv(csv_path)
    records = []
    initial = None
    for row in rows:
        k = row["k"]
        raster = os.path.join(dirpath, _raster_name(k, spec.dim))
        ref = None
        if os.path.isfile(raster):
            gs = load_set(raster)
            if gs.spec != spec:
                raise BadParamsError(f"raster {raster} geometry differs from metadata")
            ref = encode_rle(gs.occupancy)
            if k == 0:
                initial = gs
        records.append(
            StepRecord(
                index=k,
                time=row["t"],
                volume=row["volume"],
                perimeter=row["perimeter"],
                multiplier=row["lambda"],
                dissipation_term=row["dissipation_term"],
                sym_diff_volume=row["sym_diff_volume"],
                set_ref=ref,
            )
        )
    if initial is None:
        raise _UsageError(f"{dirpath}: initial raster missing")
    return FlowTrace(h=h, spec=spec, records=tuple(records), initial_set=initial), meta


def cmd_verify(dirpath) -> int:
    if not os.path.isdir(dirpath):
        raise _UsageError(f"not a directory: {dirpath}")
    try:
        trace, meta = _trace_from_artifacts(dirpath)
        report = verify_dissipation(trace)
    except _UsageError:
        raise
    except FlatFlowError as err:
        raise _UsageError(f"{dirpath}: {err}") from err

    audit = {
        "ok": report.ok,
        "min_slack": report.min_slack,
        "min_iterated_slack": report.min_iterated_slack,
        "record_mismatches": [list(m) for m in report.record_mismatches],
        "perimeter_increases_at_target": list(report.perimeter_increases_at_target),
    }
    if len(trace.records) >= 2:
        audit["continuity_max_ratio"] = continuity_stats(trace).max_ratio
        if trace.horizon > trace.h:
            audit["multiplier_stats"] = asdict(
                multiplier_stats(trace, trace.h, trace.horizon)
            )
    with open(os.path.join(dirpath, "audit.json"), "w") as f:
        json.dump(audit, f, indent=2)
        f.write("\n")
    if report.ok:
        print(f"verify ok: min slack {report.min_slack!r}")
        return 0
    for k, field in report.record_mismatches:
        print(f"violation: record {k} field {field} differs from recomputation",
              file=sys.stderr)
    if report.min_slack < 0:
        print(f"violation: negative step slack {report.min_slack!r}", file=sys.stderr)
    if report.min_iterated_slack < 0:
        print(
            f"violation: negative iterated slack {report.min_iterated_slack!r}",
            file=sys.stderr,
        )
    return 3


def cmd_oracle_balls(radii_raw: str, n: int, horizon: float, dt: float, out: str | None) -> int:
    radii = tuple(_as_floats(radii_raw, "--radii"))
    if not radii:
        raise _UsageError("--radii needs at least one value")
    try:
        traj = ball_ode_integrate(BallSystem(radii, n), horizon, dt=dt)
    except FlatFlowError as err:
        raise _UsageError(str(err)) from err
    if out:
        write_trajectory_csv(traj, out)
        print(f"trajectory written to {out}")
    else:
        w = sys.stdout
        w.write("t," + ",".join(f"r{i+1}" for i in range(len(radii))) + ",lambda\n")
        for j in range(len(traj.times)):
            vals = [traj.times[j], *traj.radii[j], traj.lambdas[j]]
            w.write(",".join(repr(float(v)) for v in vals) + "\n")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="flatflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flow", help="run a scenario config")
    f.add_argument("config")

    d = sub.add_parser("diagnose", help="certificate for a raster or shape config")
    d.add_argument("input")
    d.add_argument("--lambda", dest="lam", type=float, default=None)
    d.add_argument("--out", default=".")

    v = sub.add_parser("verify", help="re-audit a run directory")
    v.add_argument("dir")

    o = sub.add_parser("oracle", help="closed-form references")
    osub = o.add_subparsers(dest="what", required=True)
    b = osub.add_parser("balls", help="ball-system ODE trajectory")
    b.add_argument("--radii", required=True)
    b.add_argument("--n", type=int, required=True, help="boundary dimension, 1 or 2")
    b.add_argument("--horizon", type=float, default=1.0)
    b.add_argument("--dt", type=float, default=1e-4)
    b.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "flow":
            return cmd_flow(args.config)
        if args.command == "diagnose":
            return cmd_diagnose(args.input, args.lam, args.out)
        if args.command == "verify":
            return cmd_verify(args.dir)
        return cmd_oracle_balls(args.radii, args.n, args.horizon, args.dt, args.out)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FlatFlowError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
