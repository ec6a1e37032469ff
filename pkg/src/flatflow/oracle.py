"""Reference generators and independent minimizers used to cross-check the scheme.

Everything here is deliberately simple: shapes are rasterized from closed-form
indicator functions, the ball-system dynamics is a fixed-step Runge-Kutta
integration of the exact ODE, and the small-instance minimizer enumerates
every subset.  These are the oracles the fast implementations are tested
against, so they must stay independent of the modules they check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadParamsError, EnumerationTooLargeError
from .grid import BallUnion, GridSet, GridSpec

EXTINCTION_THRESHOLD = 1e-3


@dataclass(frozen=True)
class BallSystem:
    """Disjoint equal-dimension balls evolving by volume-preserving curvature flow.

    ``n`` is the boundary dimension (1 for circles in the plane, 2 for
    spheres in space).  The multiplier that conserves total volume is
    ``lambda = n * sum(r**(n-1)) / sum(r**n)`` and each radius follows
    ``dr/dt = lambda - n / r``.
    """

    radii: tuple[float, ...]
    n: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise BadParamsError("boundary dimension n must be 1 or 2")
        if len(self.radii) < 1 or any(not (r > 0) for r in self.radii):
            raise BadParamsError("radii must be positive")
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))

    def lambda_value(self, radii=None) -> float:
        r = np.asarray(self.radii if radii is None else radii, dtype=float)
        r = r[r > 0]
        return self.n * float((r ** (self.n - 1)).sum() / (r**self.n).sum())


@dataclass(frozen=True)
class BallTrajectory:
    """Sampled radii and multiplier along the integrated ball system."""

    times: np.ndarray
    radii: np.ndarray  # (T, N), NaN after a ball goes extinct
    lambdas: np.ndarray
    extinctions: tuple[tuple[float, int], ...]
    n: int
    dt: float

    def radius_at(self, t: float, i: int) -> float:
        j = min(int(round(t / self.dt)), len(self.times) - 1)
        return float(self.radii[j, i])

    def total_volume(self) -> np.ndarray:
        """sum r**(n+1) up to the dimensional constant; conserved by the flow."""
        r = np.where(np.isnan(self.radii), 0.0, self.radii)
        return (r ** (self.n + 1)).sum(axis=1)


def ball_ode_integrate(
    system: BallSystem,
    horizon: float,
    dt: float = 1e-4,
    extinction_threshold: float = EXTINCTION_THRESHOLD,
) -> BallTrajectory:
    """Fixed-step RK4 integration of the ball system up to ``horizon``.

    A ball whose radius drops below ``extinction_threshold`` is removed from
    the system at the end of the step; the event is recorded and the
    multiplier is recomputed from the survivors.
    """
    if not (horizon > 0 and dt > 0):
        raise BadParamsError("horizon and dt must be positive")
    n = system.n
    steps = int(round(horizon / dt))
    alive = np.ones(len(system.radii), dtype=bool)
    r = np.asarray(system.radii, dtype=float).copy()
    times = np.empty(steps + 1)
    radii = np.full((steps + 1, len(r)), np.nan)
    lambdas = np.empty(steps + 1)
    events: list[tuple[float, int]] = []

    def lam(rv, mask):
        ra = rv[mask]
        return n * float((ra ** (n - 1)).sum() / (ra**n).sum())

    def rhs(rv, mask):
        out = np.zeros_like(rv)
        lv = lam(rv, mask)
        out[mask] = lv - n / rv[mask]
        return out

    times[0] = 0.0
    radii[0, alive] = r[alive]
    lambdas[0] = lam(r, alive)
    for k in range(1, steps + 1):
        k1 = rhs(r, alive)
        k2 = rhs(r + 0.5 * dt * k1, alive)
        k3 = rhs(r + 0.5 * dt * k2, alive)
        k4 = rhs(r + dt * k3, alive)
        r = r + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = k * dt
        died = alive & (r < extinction_threshold)
        for i in np.flatnonzero(died):
            events.append((t, int(i)))
        alive &= ~died
        if not alive.any():
            times = times[: k + 1]
            radii = radii[: k + 1]
            lambdas = lambdas[: k + 1]
            times[k] = t
            lambdas[k] = lambdas[k - 1]
            break
        times[k] = t
        radii[k, alive] = r[alive]
        lambdas[k] = lam(r, alive)
    return BallTrajectory(
        times=times,
        radii=radii,
        lambdas=lambdas,
        extinctions=tuple(events),
        n=n,
        dt=dt,
    )


def write_trajectory_csv(traj: BallTrajectory, path) -> None:
    """Columns: t, r1..rN, lambda.  Extinct balls show as nan."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        ncols = traj.radii.shape[1]
        w.writerow(["t"] + [f"r{i+1}" for i in range(ncols)] + ["lambda"])
        for j in range(len(traj.times)):
            row = [repr(float(traj.times[j]))]
            row += [repr(float(x)) for x in traj.radii[j]]
            row.append(repr(float(traj.lambdas[j])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# Shape rasterization


def make_shape(kind: str, params: dict, spec: GridSpec, seed: int = 0) -> GridSet:
    """Rasterize a named shape: occupancy is the indicator at cell centers.

    Kinds: ``ball``, ``ball_union``, ``cube``, ``dumbbell``, ``noisy_ball``.
    """
    builders = {
        "ball": _shape_ball,
        "ball_union": _shape_ball_union,
        "cube": _shape_cube,
        "dumbbell": _shape_dumbbell,
        "noisy_ball": _shape_noisy_ball,
    }
    if kind not in builders:
        raise BadParamsError(f"unknown shape kind {kind!r}")
    occ = builders[kind](params, spec, seed)
    if not occ.any():
        raise BadParamsError(f"shape {kind!r} rasterized to the empty set")
    return GridSet(spec, occ)


def _center(params, spec, key="center"):
    c = params.get(key)
    if c is None:
        lo = np.asarray(spec.origin)
        c = lo + (np.asarray(spec.shape) - 1) * spec.spacing / 2.0
    c = np.asarray(c, dtype=float)
    if c.shape != (spec.dim,):
        raise BadParamsError(f"{key} must have {spec.dim} coordinates")
    return c


def _radial(spec, c):
    mesh = spec.meshgrid()
    return np.sqrt(sum((g - c[k]) ** 2 for k, g in enumerate(mesh)))


def _shape_ball(params, spec, seed):
    r = float(params["radius"])
    if r <= 0:
        raise BadParamsError("ball radius must be positive")
    return _radial(spec, _center(params, spec)) < r


def _shape_ball_union(params, spec, seed):
    r = float(params["radius"])
    centers = np.atleast_2d(np.asarray(params["centers"], dtype=float))
    # BallUnion validates positivity and strict disjointness.
    BallUnion(centers, r, separation_tolerance=float(params.get("tolerance", 0.0)))
    occ = np.zeros(spec.shape, dtype=bool)
    for c in centers:
        occ |= _radial(spec, c) < r
    return occ


def _shape_cube(params, spec, seed):
    side = float(params["side"])
    if side <= 0:
        raise BadParamsError("cube side must be positive")
    c = _center(params, spec)
    mesh = spec.meshgrid()
    return np.all(
        [np.abs(g - c[k]) < side / 2.0 for k, g in enumerate(mesh)], axis=0
    )


def _shape_dumbbell(params, spec, seed):
    r = float(params["ball_radius"])
    width = float(params["neck_width"])
    if r <= 0 or width <= 0:
        raise BadParamsError("dumbbell needs positive ball_radius and neck_width")
    centers = np.asarray(params["centers"], dtype=float)
    if centers.shape != (2, spec.dim):
        raise BadParamsError("dumbbell needs exactly two centers")
    a, b = centers
    axis = b - a
    length = np.linalg.norm(axis)
    if length <= 2 * r:
        raise BadParamsError("dumbbell centers too close for a neck")
    axis = axis / length
    mesh = spec.meshgrid()
    rel = [g - a[k] for k, g in enumerate(mesh)]
    along = sum(rel[k] * axis[k] for k in range(spec.dim))
    perp_sq = sum(rel[k] ** 2 for k in range(spec.dim)) - along**2
    occ = _radial(spec, a) < r
    occ |= _radial(spec, b) < r
    occ |= (along > 0) & (along < length) & (perp_sq < (width / 2.0) ** 2)
    return occ


def _shape_noisy_ball(params, spec, seed):
    r = float(params["radius"])
    amp = float(params.get("amplitude", 0.1))
    nmodes = int(params.get("modes", 4))
    if r <= 0 or amp < 0 or not 1 <= nmodes <= 16:
        raise BadParamsError("noisy_ball needs radius > 0, amplitude >= 0, 1..16 modes")
    c = _center(params, spec)
    rng = np.random.default_rng(seed)
    mesh = spec.meshgrid()
    rel = [g - c[k] for k, g in enumerate(mesh)]
    rho = np.sqrt(sum(x**2 for x in rel))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = [np.where(rho > 0, x / np.maximum(rho, 1e-300), 0.0) for x in rel]
    bump = np.zeros(spec.shape)
    if spec.dim == 2:
        theta = np.arctan2(unit[1], unit[0])
        for m in range(2, 2 + nmodes):
            a = rng.normal() / nmodes
            phi = rng.uniform(0, 2 * np.pi)
            bump += a * np.cos(m * theta + phi)
    else:
        for _ in range(nmodes):
            k = rng.integers(1, 4, size=3).astype(float)
            phi = rng.uniform(0, 2 * np.pi)
            a = rng.normal() / nmodes
            bump += a * np.cos(sum(k[j] * unit[j] for j in range(3)) * np.pi + phi)
    return rho < r * (1.0 + amp * bump)


def ball_union_shape(union: BallUnion, spec: GridSpec) -> GridSet:
    """Rasterize an existing BallUnion on the given grid."""
    occ = np.zeros(spec.shape, dtype=bool)
    for c in union.centers:
        occ |= _radial(spec, np.asarray(c)) < union.radius
    return GridSet(spec, occ)


def exhaustive_step_minimizer(prev: GridSet, h: float) -> GridSet:
    """True minimizer of the step functional over all subsets, by enumeration.

    The free region is every cell off the one-cell boundary margin; it must
    hold at most 16 cells.  Subset energies are screened with a vectorized
    float evaluation, then every subset within a generous margin of the
    screen minimum is re-evaluated with ``energy_of`` (the exactly rounded
    sum), so the returned set attains the exact minimum double.  Ties go to
    the lowest subset index.  The minimizer may legitimately be empty.
    """
    from .step import energy_of

    spec = prev.spec
    free = np.ones(spec.shape, dtype=bool)
    for ax in range(spec.dim):
        sl = [slice(None)] * spec.dim
        for edge in (0, -1):
            sl[ax] = edge
            free[tuple(sl)] = False
    free_flat = np.flatnonzero(free.ravel())
    m = free_flat.size
    if m > 16:
        raise EnumerationTooLargeError(f"{m} free cells exceed the 16-cell cap")

    from .grid import center_signed_distance, crofton_weights

    t = (center_signed_distance(prev).values * (spec.cell_volume / h)).ravel()
    scale = 1.0 / math.sqrt(h)
    subs = np.arange(1 << m, dtype=np.int64)
    occupied = [(subs >> i) & 1 for i in range(m)]

    # screen: perimeter from pairwise disagreements, then linear and penalty
    E = np.zeros(subs.size)
    shape = spec.shape
    grid_pos = np.full(int(np.prod(shape)), -1, dtype=np.int64)
    grid_pos[free_flat] = np.arange(m)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    for off, w in crofton_weights(spec):
        sa = tuple(slice(max(0, -o), shape[k] - max(0, o)) for k, o in enumerate(off))
        sb = tuple(slice(max(0, o), shape[k] + min(0, o)) for k, o in enumerate(off))
        pa = grid_pos[idx[sa].ravel()]
        pb = grid_pos[idx[sb].ravel()]
        for i, j in zip(pa, pb):
            if i >= 0 and j >= 0:
                E += w * (occupied[i] ^ occupied[j])
            elif i >= 0:
                E += w * occupied[i]
            elif j >= 0:
                E += w * occupied[j]
    count = np.zeros(subs.size, dtype=np.int64)
    for i in range(m):
        E += t[free_flat[i]] * occupied[i]
        count += occupied[i]
    E += scale * np.abs(count * spec.cell_volume - spec.target_volume)

    tol = 1e-7 * (1.0 + abs(float(E.min())))
    survivors = np.flatnonzero(E <= E.min() + tol)
    best = None
    for s in survivors:
        occ = np.zeros(int(np.prod(shape)), dtype=bool)
        sel = [free_flat[i] for i in range(m) if (int(s) >> i) & 1]
        occ[sel] = True
        cand = GridSet(spec, occ.reshape(shape))
        energy = energy_of(cand, prev, h)
        if best is None or energy < best[0]:
            best = (energy, cand)
    return best[1]
