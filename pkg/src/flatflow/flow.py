"""Iterate minimizing-movements steps into a discrete flow and audit it.

A trace records, for every step, the volumetric statistics of the
minimizer plus the dissipation atoms needed to re-check the per-step and
iterated energy inequalities with zero tolerance.  Occupancies are stored
run-length encoded per record (configurable thinning keeps long runs
small; statistics are always per-step).

The audits recompute everything from the stored sets through the same
canonical atom vocabulary the solver uses (exactly rounded sums of
perimeter, penalty, and per-cell linear terms), so equality and sign
checks are meaningful at the last bit.  The time loop is sequential by
nature; the audit operations only read a finished trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    BadParamsError,
    EmptyMinimizerError,
    EmptySetError,
    HorizonTooShortError,
    RangeError,
    StepTooLargeError,
)
from .grid import (
    GridSet,
    GridSpec,
    _curvature_arrays,
    _interp_field,
    center_signed_distance,
    perimeter,
    volume,
)
from .step import assemble_step, minimize_step


def encode_rle(occ: np.ndarray) -> np.ndarray:
    """Run lengths of the flattened occupancy, alternating from False."""
    flat = occ.ravel()
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).astype(np.int64)
    if flat.size and flat[0]:
        runs = np.concatenate(([0], runs))
    return runs


def decode_rle(runs: np.ndarray, shape) -> np.ndarray:
    pattern = np.arange(len(runs)) % 2 == 1
    return np.repeat(pattern, runs).reshape(shape)


@dataclass(frozen=True)
class StepRecord:
    """One row of the flow trace; index 0 is the initial set."""

    index: int
    time: float
    volume: float
    perimeter: float
    multiplier: float  # nan on the initial row
    dissipation_term: float  # (1/h) * sum_{sym diff} dist * cellvol
    sym_diff_volume: float
    set_ref: np.ndarray | None = field(repr=False, default=None)


class FlowEvent(tuple):
    """(step index, kind, components before, components after)."""

    __slots__ = ()

    def __new__(cls, k, kind, before, after):
        return super().__new__(cls, (k, kind, before, after))


@dataclass(frozen=True)
class FlowTrace:
    h: float
    spec: GridSpec
    records: tuple
    initial_set: GridSet
    events: tuple = ()

    def __post_init__(self):
        if not self.records:
            raise BadParamsError("a trace needs at least the initial record")
        for k, r in enumerate(self.records):
            if r.index != k:
                raise BadParamsError("record indices must run 0,1,2,...")
            if r.time != k * self.h:
                raise BadParamsError("record time must equal index*h")
            if not (r.volume > 0.0 and r.perimeter > 0.0):
                raise BadParamsError("records need positive volume and perimeter")

    @property
    def horizon(self) -> float:
        return self.records[-1].time

    def set_at(self, k: int) -> GridSet | None:
        """Decode the stored occupancy of record k; None if thinned away."""
        ref = self.records[k].set_ref
        if ref is None:
            return None
        return GridSet(self.spec, decode_rle(ref, self.spec.shape))


def step_multiplier(prev: GridSet, cur: GridSet, h: float) -> float:
    """Reported multiplier of the step prev -> cur.

    Off-target volume pins the value to sgn(target - volume)/sqrt(h).  At
    target volume the value is the area-weighted interface average of
    d_prev/h + H_cur, the constant that the stationarity relation of the
    step pairs with the curvature; the solver's own search shift is not
    reported because its value sticks to single-cell toggle thresholds
    (perimeter quantization), not to the curvature scale.  Clipped to the
    +-1/sqrt(h) box.
    """
    spec = cur.spec
    scale = 1.0 / math.sqrt(h)
    v = volume(cur)
    if abs(v - spec.target_volume) > 0.5 * spec.cell_volume:
        return math.copysign(scale, spec.target_volume - v)
    pos, w, curv, _ = _curvature_arrays(cur, 3.0 * spec.spacing)
    dbar = _interp_field(center_signed_distance(prev), pos)
    lam = float(np.sum(w * (dbar / h + curv)) / np.sum(w))
    return float(min(max(lam, -scale), scale))


def run_flow(initial: GridSet, h: float, horizon: float, config: dict | None = None) -> FlowTrace:
    """Advance ceil(horizon/h) minimizing-movements steps from ``initial``.

    ``config`` accepts ``store_stride`` (keep every m-th occupancy; the
    initial and final ones are always kept; default 1).  An empty
    minimizer aborts the run as StepTooLarge, mirroring the admissibility
    hypothesis.  Identical inputs give bit-identical traces.
    """
    if initial.is_empty:
        raise EmptySetError("cannot start a flow from the empty set")
    if not (h > 0.0):
        raise BadParamsError("time step must be positive")
    if horizon < h:
        raise HorizonTooShortError(f"horizon {horizon} is shorter than one step {h}")
    stride = int((config or {}).get("store_stride", 1))
    if stride < 1:
        raise BadParamsError("store_stride must be >= 1")

    n_steps = math.ceil(horizon / h - 1e-9)
    spec = initial.spec
    records = [
        StepRecord(
            index=0,
            time=0.0,
            volume=volume(initial),
            perimeter=perimeter(initial),
            multiplier=math.nan,
            dissipation_term=0.0,
            sym_diff_volume=0.0,
            set_ref=encode_rle(initial.occupancy),
        )
    ]
    events = []
    struct = ndimage.generate_binary_structure(spec.dim, 1)
    n_comp_prev = int(ndimage.label(initial.occupancy, structure=struct)[1])
    prev = initial
    for k in range(1, n_steps + 1):
        e = assemble_step(prev, h)
        try:
            sol = minimize_step(e)
        except EmptyMinimizerError as err:
            raise StepTooLargeError(
                f"step {k}: {err}; the admissibility bound no longer holds"
            ) from err
        cur = sol.set
        changed = cur.occupancy ^ prev.occupancy
        diss = math.fsum(np.abs(e.linear_term[changed]).tolist())
        keep = (k % stride == 0) or (k == n_steps)
        records.append(
            StepRecord(
                index=k,
                time=k * h,
                volume=volume(cur),
                perimeter=perimeter(cur),
                multiplier=step_multiplier(prev, cur, h),
                dissipation_term=diss,
                sym_diff_volume=int(np.count_nonzero(changed)) * spec.cell_volume,
                set_ref=encode_rle(cur.occupancy) if keep else None,
            )
        )
        n_comp = int(ndimage.label(cur.occupancy, structure=struct)[1])
        if n_comp < n_comp_prev:
            events.append(FlowEvent(k, "extinction", n_comp_prev, n_comp))
        elif n_comp > n_comp_prev:
            events.append(FlowEvent(k, "split", n_comp_prev, n_comp))
        n_comp_prev = n_comp
        prev = cur
    return FlowTrace(
        h=h,
        spec=spec,
        records=tuple(records),
        initial_set=initial,
        events=tuple(events),
    )


@dataclass(frozen=True)
class DissipationReport:
    """Zero-tolerance audit of the per-step and iterated inequalities."""

    slacks: tuple
    iterated_slacks: tuple
    min_slack: float
    min_iterated_slack: float
    record_mismatches: tuple  # (index, field) pairs where stored != recomputed
    perimeter_increases_at_target: tuple  # steps at target volume then P up

    @property
    def ok(self) -> bool:
        return (
            self.min_slack >= 0.0
            and self.min_iterated_slack >= 0.0
            and not self.record_mismatches
        )


def _stored_sets(trace: FlowTrace) -> list[GridSet]:
    sets = []
    for r in trace.records:
        gs = trace.set_at(r.index)
        if gs is None:
            raise BadParamsError(
                "trace was thinned; audits need every occupancy (store_stride=1)"
            )
        sets.append(gs)
    return sets


def verify_dissipation(trace: FlowTrace) -> DissipationReport:
    """Recompute every energy atom from the stored sets and check signs.

    Also cross-checks each record's volume, perimeter, dissipation term,
    symmetric-difference volume and multiplier convention against the
    recomputation; any discrepancy is reported as a mismatch (this is what
    catches a tampered trace file).
    """
    sets = _stored_sets(trace)
    h = trace.h
    spec = trace.spec
    scale = 1.0 / math.sqrt(h)
    target = spec.target_volume
    mismatches = []

    def check(k, fieldname, stored, recomputed):
        if not (stored == recomputed or (math.isnan(stored) and math.isnan(recomputed))):
            mismatches.append((k, fieldname))

    P = [perimeter(gs) for gs in sets]
    V = [volume(gs) for gs in sets]
    pen = [scale * abs(v - target) for v in V]
    for k, r in enumerate(trace.records):
        check(k, "volume", r.volume, V[k])
        check(k, "perimeter", r.perimeter, P[k])

    slacks = []
    iterated = []
    running_atoms = [P[0], pen[0]]
    for k in range(1, len(sets)):
        t = center_signed_distance(sets[k - 1]).values * (spec.cell_volume / h)
        changed = sets[k].occupancy ^ sets[k - 1].occupancy
        diss_atoms = (-np.abs(t[changed])).tolist()
        slack = math.fsum(
            [P[k - 1], pen[k - 1], -P[k], -pen[k]] + diss_atoms
        )
        slacks.append(slack)
        running_atoms.extend(diss_atoms)
        iterated.append(math.fsum(running_atoms + [-P[k], -pen[k]]))

        r = trace.records[k]
        check(k, "dissipation_term", r.dissipation_term, math.fsum(np.abs(t[changed]).tolist()))
        check(k, "sym_diff_volume", r.sym_diff_volume, int(np.count_nonzero(changed)) * spec.cell_volume)
        check(k, "multiplier", r.multiplier, step_multiplier(sets[k - 1], sets[k], h))

    flags = tuple(
        k
        for k in range(1, len(sets) - 1)
        if abs(V[k] - target) <= 0.5 * spec.cell_volume and P[k + 1] > P[k]
    )
    return DissipationReport(
        slacks=tuple(slacks),
        iterated_slacks=tuple(iterated),
        min_slack=min(slacks) if slacks else 0.0,
        min_iterated_slack=min(iterated) if iterated else 0.0,
        record_mismatches=tuple(mismatches),
        perimeter_increases_at_target=flags,
    )


@dataclass(frozen=True)
class ContinuityStats:
    """Worst-pair interpolation ratio sup |E_s Δ E_t| / sqrt(t-s)."""

    max_ratio: float
    argmax_pair: tuple


def continuity_stats(trace: FlowTrace) -> ContinuityStats:
    if len(trace.records) < 2:
        raise BadParamsError("continuity needs at least one step")
    sets = _stored_sets(trace)
    packed = [np.packbits(gs.occupancy.ravel()) for gs in sets]
    cellvol = trace.spec.cell_volume
    best = (-math.inf, (0, 0))
    for s in range(len(sets) - 1):
        for t in range(s + 1, len(sets)):
            dt = (t - s) * trace.h
            sym = int(np.bitwise_count(packed[s] ^ packed[t]).sum()) * cellvol
            ratio = sym / math.sqrt(dt)
            if ratio > best[0]:
                best = (ratio, (s, t))
    return ContinuityStats(max_ratio=best[0], argmax_pair=best[1])


@dataclass(frozen=True)
class MultiplierStats:
    """Squared-multiplier integral and volume-violation measure on a window."""

    integral_sq: float
    violation_measure: float
    n_steps: int
    window: tuple


def multiplier_stats(trace: FlowTrace, T1: float, T2: float) -> MultiplierStats:
    h = trace.h
    eps = 1e-9 * h
    if not (h <= T1 + eps and T1 < T2 and T2 <= trace.horizon + eps):
        raise RangeError(
            f"need h <= T1 < T2 <= horizon, got T1={T1} T2={T2} "
            f"h={h} horizon={trace.horizon}"
        )
    target = trace.spec.target_volume
    half_cell = 0.5 * trace.spec.cell_volume
    sq_atoms = []
    violations = 0
    n = 0
    for r in trace.records[1:]:
        if T1 + eps < r.time <= T2 + eps:
            n += 1
            sq_atoms.append(r.multiplier * r.multiplier * h)
            if abs(r.volume - target) > half_cell:
                violations += 1
    return MultiplierStats(
        integral_sq=math.fsum(sq_atoms),
        violation_measure=violations * h,
        n_steps=n,
        window=(T1, T2),
    )


def component_radii(gs: GridSet) -> list[tuple[np.ndarray, float]]:
    """(centroid, volume-equivalent radius) per face-connected component.

    The radius is (|component| / unit-ball-volume)^(1/dim): for a ball
    component this estimates the inradius with O(spacing^2) relative
    accuracy, an order better than any cell-center depth reading, which
    matters when tracking radii down to a few cells.
    """
    struct = ndimage.generate_binary_structure(gs.spec.dim, 1)
    labels, n = ndimage.label(gs.occupancy, structure=struct)
    out = []
    target_unit = gs.spec.target_volume  # unit-ball volume for this dim
    for i in range(1, n + 1):
        mask = labels == i
        cells = int(np.count_nonzero(mask))
        vol = cells * gs.spec.cell_volume
        centroid = gs.spec.cell_centers(mask).mean(axis=0)
        out.append((centroid, (vol / target_unit) ** (1.0 / gs.spec.dim)))
    return out


def radius_history(trace: FlowTrace) -> list[list[tuple[np.ndarray, float]]]:
    """component_radii per stored record, in record order."""
    return [component_radii(gs) for gs in _stored_sets(trace)]


def comparison_bound_constant(trace: FlowTrace) -> float:
    """Fitted C in r_{k+1}^2 - r_k^2 >= -C (1+|lambda_{k+1}|) h per component.

    Components are matched across consecutive steps by nearest centroid;
    a vanished component contributes nothing at its extinction step.
    """
    history = radius_history(trace)
    worst = 0.0
    for k in range(1, len(history)):
        lam = trace.records[k].multiplier
        denom = (1.0 + abs(lam)) * trace.h
        prev_comps = history[k - 1]
        for centroid, r_new in history[k]:
            if not prev_comps:
                continue
            dists = [float(np.linalg.norm(centroid - c)) for c, _ in prev_comps]
            r_old = prev_comps[int(np.argmin(dists))][1]
            deficit = (r_old * r_old - r_new * r_new) / denom
            worst = max(worst, deficit)
    return worst


# ---------------------------------------------------------------------------
# Trace export: CSV of the per-step statistics plus a JSON metadata echo.

TRACE_COLUMNS = ("k", "t", "volume", "perimeter", "lambda", "dissipation_term", "sym_diff_volume")


def write_trace_csv(trace: FlowTrace, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(",".join(TRACE_COLUMNS) + "\n")
        for r in trace.records:
            f.write(
                f"{r.index},{r.time!r},{r.volume!r},{r.perimeter!r},"
                f"{r.multiplier!r},{r.dissipation_term!r},{r.sym_diff_volume!r}\n"
            )


def read_trace_csv(path) -> list[dict]:
    with open(path, encoding="ascii") as f:
        header = f.readline().strip().split(",")
        if tuple(header) != TRACE_COLUMNS:
            raise BadParamsError(f"unexpected trace columns {header}")
        rows = []
        for line in f:
            parts = line.strip().split(",")
            if len(parts) != len(TRACE_COLUMNS):
                raise BadParamsError("malformed trace row")
            rows.append(
                {
                    "k": int(parts[0]),
                    "t": float(parts[1]),
                    "volume": float(parts[2]),
                    "perimeter": float(parts[3]),
                    "lambda": float(parts[4]),
                    "dissipation_term": float(parts[5]),
                    "sym_diff_volume": float(parts[6]),
                }
            )
    return rows


def write_metadata_json(trace: FlowTrace, config: dict, path, versions: dict | None = None) -> None:
    import flatflow

    meta = {
        "h": trace.h,
        "horizon": trace.horizon,
        "n_records": len(trace.records),
        "grid": {
            "dim": trace.spec.dim,
            "shape": list(trace.spec.shape),
            "spacing": trace.spec.spacing,
            "origin": list(trace.spec.origin),
        },
        "events": [list(ev) for ev in trace.events],
        "config": {str(k): str(v) for k, v in (config or {}).items()},
        "versions": versions
        or {
            "flatflow": flatflow.__version__,
            "numpy": np.__version__,
        },
    }
    with open(path, "w", encoding="ascii") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
