import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flatflow.errors import (
    BadParamsError,
    EmptySetError,
    HorizonTooShortError,
    RangeError,
    StepTooLargeError,
)
from flatflow.flow import (
    FlowTrace,
    StepRecord,
    component_radii,
    comparison_bound_constant,
    continuity_stats,
    decode_rle,
    encode_rle,
    multiplier_stats,
    radius_history,
    read_trace_csv,
    run_flow,
    step_multiplier,
    verify_dissipation,
    write_metadata_json,
    write_trace_csv,
)
from flatflow.grid import GridSet, volume

from conftest import centered_spec, raster_balls


# ---------------------------------------------------------------------------
# rle storage


@settings(deadline=None, max_examples=60)
@given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=9)))
def test_rle_roundtrip(occ):
    runs = encode_rle(occ)
    np.testing.assert_array_equal(decode_rle(runs, occ.shape), occ)


def test_rle_compresses_solid_regions():
    occ = np.zeros((64, 64), dtype=bool)
    occ[8:56, 8:56] = True
    assert len(encode_rle(occ)) <= 2 * 64 + 2


# ---------------------------------------------------------------------------
# trace construction and the flow driver


def test_run_flow_validates_inputs(small_dumbbell):
    empty = small_dumbbell.with_occupancy(np.zeros_like(small_dumbbell.occupancy))
    with pytest.raises(EmptySetError):
        run_flow(empty, 0.01, 0.1)
    with pytest.raises(HorizonTooShortError):
        run_flow(small_dumbbell, 0.2, 0.1)
    with pytest.raises(BadParamsError):
        run_flow(small_dumbbell, 0.01, 0.1, {"store_stride": 0})


def test_trace_shape_and_times(short_trace):
    tr = short_trace
    assert len(tr.records) == 6
    for k, r in enumerate(tr.records):
        assert r.index == k
        assert r.time == k * tr.h
        assert r.volume > 0 and r.perimeter > 0
    assert math.isnan(tr.records[0].multiplier)
    assert tr.records[0].dissipation_term == 0.0
    assert tr.horizon == pytest.approx(0.05)
    first = tr.set_at(0)
    np.testing.assert_array_equal(first.occupancy, tr.initial_set.occupancy)


def test_trace_validation_rejects_bad_rows(short_trace):
    recs = list(short_trace.records)
    recs[2] = dataclasses.replace(recs[2], index=5)
    with pytest.raises(BadParamsError):
        FlowTrace(short_trace.h, short_trace.spec, tuple(recs), short_trace.initial_set)
    recs = list(short_trace.records)
    recs[1] = dataclasses.replace(recs[1], time=0.5)
    with pytest.raises(BadParamsError):
        FlowTrace(short_trace.h, short_trace.spec, tuple(recs), short_trace.initial_set)


def test_thinned_trace_keeps_endpoints(small_dumbbell):
    tr = run_flow(small_dumbbell, 0.01, 0.05, {"store_stride": 3})
    kept = [r.index for r in tr.records if r.set_ref is not None]
    assert kept == [0, 3, 5]
    assert tr.set_at(1) is None


def test_flow_is_deterministic(small_dumbbell):
    a = run_flow(small_dumbbell, 0.01, 0.03)
    b = run_flow(small_dumbbell, 0.01, 0.03)
    for ra, rb in zip(a.records, b.records):
        assert ra.volume == rb.volume and ra.perimeter == rb.perimeter
        np.testing.assert_array_equal(ra.set_ref, rb.set_ref)


# ---------------------------------------------------------------------------
# the dissipation audit


def test_dissipation_holds_exactly(short_trace):
    rep = verify_dissipation(short_trace)
    assert rep.ok
    assert len(rep.slacks) == 5 and len(rep.iterated_slacks) == 5
    assert rep.min_slack >= 0.0
    assert rep.min_iterated_slack >= 0.0
    assert rep.record_mismatches == ()


@pytest.mark.parametrize(
    "fieldname,delta",
    [
        ("volume", 1e-9),
        ("perimeter", -1e-9),
        ("dissipation_term", 1e-9),
        ("sym_diff_volume", 1e-9),
        ("multiplier", 1e-9),
    ],
)
def test_audit_catches_tampering(short_trace, fieldname, delta):
    recs = list(short_trace.records)
    r = recs[3]
    recs[3] = dataclasses.replace(r, **{fieldname: getattr(r, fieldname) + delta})
    tampered = FlowTrace(
        short_trace.h, short_trace.spec, tuple(recs),
        short_trace.initial_set, short_trace.events,
    )
    rep = verify_dissipation(tampered)
    assert not rep.ok
    assert (3, fieldname) in rep.record_mismatches


def test_audit_requires_full_storage(small_dumbbell):
    tr = run_flow(small_dumbbell, 0.01, 0.05, {"store_stride": 2})
    with pytest.raises(BadParamsError):
        verify_dissipation(tr)


def test_iterated_slack_is_cumulative(short_trace):
    # sum of per-step slacks telescopes into the iterated slack
    rep = verify_dissipation(short_trace)
    for k in range(5):
        partial = math.fsum(rep.slacks[: k + 1])
        assert rep.iterated_slacks[k] == pytest.approx(partial, abs=1e-12)


# ---------------------------------------------------------------------------
# statistics


def test_continuity_stats_matches_direct_computation(short_trace):
    stats = continuity_stats(short_trace)
    sets = [short_trace.set_at(k).occupancy for k in range(6)]
    cv = short_trace.spec.cell_volume
    best = max(
        (int((sets[s] ^ sets[t]).sum()) * cv / math.sqrt((t - s) * short_trace.h), (s, t))
        for s in range(5)
        for t in range(s + 1, 6)
    )
    assert stats.max_ratio == best[0]
    assert stats.argmax_pair == best[1]


def test_multiplier_stats_window_math(short_trace):
    h = short_trace.h
    stats = multiplier_stats(short_trace, h, 0.05)
    lams = [r.multiplier for r in short_trace.records[2:]]
    assert stats.n_steps == 4
    assert stats.integral_sq == pytest.approx(sum(l * l * h for l in lams))
    assert 0.0 <= stats.violation_measure <= 4 * h
    with pytest.raises(RangeError):
        multiplier_stats(short_trace, 0.0, 0.05)
    with pytest.raises(RangeError):
        multiplier_stats(short_trace, 0.02, 0.2)


def test_multiplier_box(short_trace):
    scale = 1.0 / math.sqrt(short_trace.h)
    for r in short_trace.records[1:]:
        assert abs(r.multiplier) <= scale


def test_component_radii_on_exact_balls():
    spec = centered_spec(2, (192, 128), 1 / 64.0)
    gs = raster_balls(spec, [(-0.8, 0.1), (0.7, -0.2)], [0.5, 0.35])
    comps = sorted(component_radii(gs), key=lambda cr: cr[0][0])
    np.testing.assert_allclose(comps[0][0], [-0.8, 0.1], atol=1e-2)
    np.testing.assert_allclose(comps[1][0], [0.7, -0.2], atol=1e-2)
    assert comps[0][1] == pytest.approx(0.5, rel=5e-3)
    assert comps[1][1] == pytest.approx(0.35, rel=5e-3)


def test_comparison_bound_constant_positive(short_trace):
    c = comparison_bound_constant(short_trace)
    assert math.isfinite(c) and c >= 0.0
    assert len(radius_history(short_trace)) == 6


def test_step_multiplier_pins_off_target(small_dumbbell):
    # shrink the set well below target volume: positive pin, exactly
    h = 0.01
    from flatflow.grid import erode

    small = erode(small_dumbbell, 0.3)
    assert abs(volume(small) - math.pi) > 0.5 * small.spec.cell_volume
    lam = step_multiplier(small_dumbbell, small, h)
    assert lam == 1.0 / math.sqrt(h)


# ---------------------------------------------------------------------------
# exports


def test_trace_csv_roundtrip(tmp_path, short_trace):
    p = tmp_path / "trace.csv"
    write_trace_csv(short_trace, p)
    rows = read_trace_csv(p)
    assert len(rows) == 6
    for r, rec in zip(rows, short_trace.records):
        assert r["k"] == rec.index
        assert r["volume"] == rec.volume
        assert r["perimeter"] == rec.perimeter
        lam = r["lambda"]
        assert lam == rec.multiplier or (math.isnan(lam) and math.isnan(rec.multiplier))


def test_metadata_json(tmp_path, short_trace):
    p = tmp_path / "metadata.json"
    write_metadata_json(short_trace, {"shape.kind": "dumbbell", "h": "0.01"}, p)
    meta = json.loads(p.read_text())
    assert meta["h"] == short_trace.h
    assert meta["n_records"] == 6
    assert meta["grid"]["dim"] == 2
    assert meta["grid"]["spacing"] == short_trace.spec.spacing
    assert meta["config"]["shape.kind"] == "dumbbell"
