import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatflow.errors import (
    BadParamsError,
    EmptyMinimizerError,
    EnumerationTooLargeError,
    StepTooLargeError,
)
from flatflow.grid import BallUnion, GridSet, GridSpec, volume
from flatflow.oracle import (
    BallSystem,
    ball_ode_integrate,
    ball_union_shape,
    exhaustive_step_minimizer,
    make_shape,
    write_trajectory_csv,
)
from flatflow.step import assemble_step, energy_of, minimize_step

from conftest import centered_spec


# ---------------------------------------------------------------------------
# ball ODE system


def test_system_validation():
    with pytest.raises(BadParamsError):
        BallSystem((0.5,), 3)
    with pytest.raises(BadParamsError):
        BallSystem((0.5, -0.1), 1)
    with pytest.raises(BadParamsError):
        BallSystem((), 1)


def test_initial_rates_closed_form():
    # lambda = n * sum(r^(n-1)) / sum(r^n); rates follow directly
    tr = ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.01, dt=1e-3)
    lam0 = 2.0 / 1.4
    assert tr.lambdas[0] == lam0
    tr3 = ball_ode_integrate(BallSystem((0.8, 0.6), 2), 0.01, dt=1e-3)
    assert tr3.lambdas[0] == 2.0 * 1.4 / (0.64 + 0.36)


def test_single_ball_is_stationary():
    tr = ball_ode_integrate(BallSystem((0.7,), 1), 1.0, dt=1e-3)
    assert np.all(tr.radii == 0.7)
    assert np.all(tr.lambdas == 1.0 / 0.7)
    tr3 = ball_ode_integrate(BallSystem((0.7,), 2), 1.0, dt=1e-3)
    assert np.all(tr3.radii == 0.7)
    assert np.all(tr3.lambdas == 2.0 / 0.7)


def test_two_ball_trajectory_frozen():
    tr = ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.3, dt=1e-4)
    assert tr.times[-1] == pytest.approx(0.3, abs=1e-12)
    np.testing.assert_allclose(
        tr.radii[-1], [0.8727679272118983, 0.4881353759258292], rtol=1e-9
    )
    assert tr.lambdas[-1] == pytest.approx(1.4696121284949177, rel=1e-9)


def test_volume_conservation_along_flow():
    tr = ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.4, dt=1e-4)
    q = tr.radii[:, 0] ** 2 + tr.radii[:, 1] ** 2
    assert np.abs(q - 1.0).max() < 1e-12
    tr3 = ball_ode_integrate(BallSystem((0.8, 0.6, 0.5), 2), 0.05, dt=1e-4)
    q3 = (tr3.radii**3).sum(axis=1)
    assert np.abs(q3 - q3[0]).max() < 1e-12


def test_rk4_order():
    # halving dt must cut the endpoint error by roughly 2^4
    ref = ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.32, dt=1e-5).radii[-1]
    e1 = np.abs(ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.32, dt=4e-3).radii[-1] - ref).max()
    e2 = np.abs(ball_ode_integrate(BallSystem((0.8, 0.6), 1), 0.32, dt=2e-3).radii[-1] - ref).max()
    assert e1 / e2 > 8.0


def test_extinction_recorded_and_survivor_stationary():
    tr = ball_ode_integrate(BallSystem((0.5, 0.3), 1), 2.0, dt=1e-4)
    assert len(tr.extinctions) == 1
    t_ext, idx = tr.extinctions[0]
    assert idx == 1 and 0.09 < t_ext < 0.13
    after = tr.times > t_ext
    assert np.all(np.isnan(tr.radii[after, 1]))
    # a lone ball is a fixed point, so the survivor freezes
    surv = tr.radii[after, 0]
    assert np.abs(surv - surv[0]).max() < 1e-12
    assert surv[0] == pytest.approx(math.sqrt(0.34), abs=2e-3)


def test_trajectory_csv(tmp_path):
    tr = ball_ode_integrate(BallSystem((0.5, 0.3), 1), 0.2, dt=1e-3)
    p = tmp_path / "traj.csv"
    write_trajectory_csv(tr, p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "t,r1,r2,lambda"
    assert len(lines) == len(tr.times) + 1
    first = lines[1].split(",")
    assert float(first[1]) == 0.5 and float(first[3]) == tr.lambdas[0]


# ---------------------------------------------------------------------------
# shape rasterization


def test_shape_counts_frozen():
    spec = centered_spec(2, (64, 64), 1 / 32.0)
    assert make_shape("ball", {"radius": 0.8}, spec).cell_count() == 2056
    assert make_shape("cube", {"side": 1.2}, spec).cell_count() == 1444
    db = make_shape(
        "dumbbell",
        {"ball_radius": 0.45, "neck_width": 0.12, "centers": [[-0.5, 0], [0.5, 0]]},
        spec,
    )
    assert db.cell_count() == 1312
    nb = make_shape("noisy_ball", {"radius": 0.8, "amplitude": 0.08}, spec, seed=7)
    assert nb.cell_count() == 2053


def test_shape_volumes_near_analytic():
    spec = centered_spec(2, (64, 64), 1 / 32.0)
    ball = make_shape("ball", {"radius": 0.8}, spec)
    assert abs(volume(ball) - math.pi * 0.64) < 0.01 * math.pi * 0.64
    cube = make_shape("cube", {"side": 1.2}, spec)
    assert abs(volume(cube) - 1.44) < 0.03 * 1.44


def test_noisy_ball_deterministic_in_seed():
    spec = centered_spec(2, (64, 64), 1 / 32.0)
    params = {"radius": 0.8, "amplitude": 0.08}
    a = make_shape("noisy_ball", params, spec, seed=7)
    b = make_shape("noisy_ball", params, spec, seed=7)
    c = make_shape("noisy_ball", params, spec, seed=8)
    np.testing.assert_array_equal(a.occupancy, b.occupancy)
    assert (a.occupancy != c.occupancy).any()


def test_shape_errors():
    spec = centered_spec(2, (64, 64), 1 / 32.0)
    with pytest.raises(BadParamsError):
        make_shape("torus", {}, spec)
    with pytest.raises(BadParamsError):
        make_shape("ball", {"radius": 0.001}, spec)  # rasterizes empty
    with pytest.raises(BadParamsError):
        # dumbbell balls must be separated enough to leave a neck
        make_shape(
            "dumbbell",
            {"ball_radius": 0.6, "neck_width": 0.1, "centers": [[-0.5, 0], [0.5, 0]]},
            spec,
        )


def test_ball_union_shape_matches_make_shape():
    spec = centered_spec(2, (96, 96), 1 / 32.0)
    union = BallUnion(np.array([[-0.7, 0.0], [0.7, 0.0]]), 0.5)
    a = ball_union_shape(union, spec)
    b = make_shape(
        "ball_union", {"radius": 0.5, "centers": [[-0.7, 0.0], [0.7, 0.0]]}, spec
    )
    np.testing.assert_array_equal(a.occupancy, b.occupancy)


def test_dumbbell_has_single_component_and_neck():
    from flatflow.grid import connected_components

    spec = centered_spec(2, (128, 96), 1 / 32.0)
    db = make_shape(
        "dumbbell",
        {"ball_radius": 0.6, "neck_width": 0.15, "centers": [[-0.7, 0], [0.7, 0]]},
        spec,
    )
    assert len(connected_components(db)) == 1
    # the neck column at x ~ 0 is about neck_width tall
    X, _ = spec.meshgrid()
    col = np.abs(X[:, 0]) < spec.spacing
    height = db.occupancy[col, :].sum(axis=1).max() * spec.spacing
    assert height == pytest.approx(0.15, abs=2 * spec.spacing)


# ---------------------------------------------------------------------------
# exhaustive step minimizer


def test_enumeration_cap():
    spec = centered_spec(2, (8, 8), 0.5)  # 36 free cells
    occ = np.zeros((8, 8), dtype=bool)
    occ[3:5, 3:5] = True
    with pytest.raises(EnumerationTooLargeError):
        exhaustive_step_minimizer(GridSet(spec, occ), 0.05)


def test_exhaustive_agrees_with_solver_small():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(200):
        shape = (5, 5) if rng.random() < 0.7 else (4, 4, 4)
        spec = GridSpec(len(shape), shape, float(rng.uniform(0.3, 1.0)),
                        tuple(float(x) for x in rng.uniform(-1, 1, len(shape))))
        occ = np.zeros(shape, dtype=bool)
        inner = tuple(slice(1, -1) for _ in shape)
        occ[inner] = rng.random(occ[inner].shape) < 0.5
        if not occ.any():
            continue
        prev = GridSet(spec, occ)
        h = float(rng.uniform(0.05, 0.3))
        try:
            e = assemble_step(prev, h)
        except StepTooLargeError:
            continue
        best = exhaustive_step_minimizer(prev, h)
        try:
            sol = minimize_step(e)
        except EmptyMinimizerError:
            assert best.is_empty
            continue
        assert sol.energy == energy_of(best, prev, h)
        checked += 1
    assert checked >= 100
