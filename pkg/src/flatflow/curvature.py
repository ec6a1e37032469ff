"""Subcell boundary sampling and mean curvature from the smoothed distance field.

Curvature is the divergence of the normalized gradient of a Gaussian-smoothed
signed distance field, evaluated at the subcell interface positions of the
marching reconstruction.  Sample area weights are rescaled so that kept
samples sum exactly to the Crofton perimeter, keeping surface integrals
consistent with the discrete energy.

The smoothing input is the cell-center distance field: it matches the exact
interface field to within the sandwich bracket, and measured curvature
statistics agree to well below the sampling noise floor, at O(cells) cost.
The grid is padded with empty cells past the filter support before smoothing
so that the finite window never contaminates interface values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BadParamsError, DegenerateNormalError, EmptySetError
from .grid import (
    GridSet,
    GridSpec,
    ScalarField,
    _seed_distance,
    interface_mesh,
    perimeter,
)

# Samples where the smoothed gradient magnitude falls below this fraction of
# one are dropped as degenerate; a healthy interface stays near 1.
DEGENERATE_GRADIENT = 0.5

DEFAULT_SMOOTHING_CELLS = 3.0


@dataclass(frozen=True)
class BoundarySamples:
    """Array-backed interface samples: position, weight, curvature, normal.

    ``weights`` sum to the Crofton perimeter of the sampled set.
    ``dropped_fraction`` is the share of raw surface measure discarded for
    degenerate normals; ``smoothing`` is the physical Gaussian width used.
    """

    positions: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    curvatures: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)
    dropped_fraction: float
    smoothing: float

    def __post_init__(self):
        m, d = self.positions.shape
        if d not in (2, 3):
            raise BadParamsError("positions must be (m, 2) or (m, 3)")
        for name in ("weights", "curvatures"):
            if getattr(self, name).shape != (m,):
                raise BadParamsError(f"{name} must have shape ({m},)")
        if self.normals.shape != (m, d):
            raise BadParamsError("normals must match positions")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights.tolist())


def _padded_phi(gs: GridSet, smoothing: float) -> ScalarField:
    """Smoothed distance on a grid padded past the filter support.

    Padding with empty cells extends the cell-center distance field exactly,
    so values on the original window equal the infinite-domain filter of the
    extended field regardless of the filter's boundary mode.
    """
    spec = gs.spec
    k = smoothing / spec.spacing
    pad = int(math.ceil(4.0 * k)) + 2
    occ = np.pad(gs.occupancy, pad)
    pspec = GridSpec(
        spec.dim,
        tuple(s + 2 * pad for s in spec.shape),
        spec.spacing,
        tuple(o - pad * spec.spacing for o in spec.origin),
    )
    seed = _seed_distance(GridSet(pspec, occ))
    phi = ndimage.gaussian_filter(seed, sigma=k)
    return ScalarField(pspec, phi)


def smoothed_distance(gs: GridSet, smoothing: float | None = None) -> tuple[ScalarField, float]:
    """Gaussian-smoothed signed distance and the physical width used."""
    spec = gs.spec
    if smoothing is None:
        smoothing = DEFAULT_SMOOTHING_CELLS * spec.spacing
    if smoothing < spec.spacing:
        raise BadParamsError("smoothing below one cell is not meaningful")
    phi = _padded_phi(gs, smoothing)
    pad = (phi.spec.shape[0] - spec.shape[0]) // 2
    window = tuple(slice(pad, pad + s) for s in spec.shape)
    return ScalarField(spec, phi.values[window].copy()), smoothing


def curvature_field(phi: ScalarField) -> tuple[ScalarField, ScalarField, list[np.ndarray]]:
    """Mean curvature of the level sets of ``phi``: div(grad phi / |grad phi|).

    Returns the curvature field, the gradient magnitude field, and the
    normalized gradient components.  Positive curvature for a ball's outward
    normal (n/r on a sphere of radius r).
    """
    spec = phi.spec
    grads = np.gradient(phi.values, spec.spacing)
    norm = np.sqrt(sum(g * g for g in grads))
    safe = np.maximum(norm, 1e-12)
    unit = [g / safe for g in grads]
    H = sum(np.gradient(unit[k], spec.spacing)[k] for k in range(spec.dim))
    return ScalarField(spec, H), ScalarField(spec, norm), unit


def _sample_at(valuesfield: ScalarField, points: np.ndarray) -> np.ndarray:
    spec = valuesfield.spec
    rel = (points - np.asarray(spec.origin)) / spec.spacing
    coords = [np.clip(rel[:, k], 0, spec.shape[k] - 1) for k in range(spec.dim)]
    return ndimage.map_coordinates(valuesfield.values, coords, order=1, mode="nearest")


def mean_curvature_samples(gs: GridSet, smoothing: float | None = None) -> BoundarySamples:
    """Interface samples with mean curvature from the smoothed distance field.

    Positions and raw weights are the marching reconstruction's facet
    midpoints and measures.  Samples with a degenerate smoothed gradient
    (magnitude below 0.5) are dropped and accounted for in
    ``dropped_fraction``; weights of the kept samples are rescaled to sum to
    the Crofton perimeter.
    """
    if gs.is_empty:
        raise EmptySetError("cannot sample the boundary of the empty set")
    spec = gs.spec
    if smoothing is None:
        smoothing = DEFAULT_SMOOTHING_CELLS * spec.spacing
    if smoothing < spec.spacing:
        raise BadParamsError("smoothing below one cell is not meaningful")
    P = perimeter(gs)
    mesh = interface_mesh(gs)
    positions = mesh.centroids
    raw_w = mesh.measures

    phi = _padded_phi(gs, smoothing)
    Hf, normf, unit = curvature_field(phi)

    gnorm = _sample_at(normf, positions)
    keep = gnorm >= DEGENERATE_GRADIENT
    total_raw = float(raw_w.sum())
    dropped = float(raw_w[~keep].sum()) / total_raw if total_raw > 0 else 0.0
    if not keep.any():
        raise DegenerateNormalError("all interface samples degenerate")

    positions = positions[keep]
    raw_w = raw_w[keep]
    H = _sample_at(Hf, positions)
    pspec = Hf.spec
    normals = np.stack(
        [_sample_at(ScalarField(pspec, unit[k]), positions) for k in range(spec.dim)],
        axis=1,
    )
    nn = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(nn, 1e-12)
    weights = raw_w * (P / math.fsum(raw_w.tolist()))
    return BoundarySamples(
        positions=positions,
        weights=weights,
        curvatures=H,
        normals=normals,
        dropped_fraction=dropped,
        smoothing=float(smoothing),
    )


def write_boundary_csv(samples: BoundarySamples, path) -> None:
    """Columns: x, y[, z], area_weight, curvature."""
    d = samples.positions.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list("xyz"[:d]) + ["area_weight", "curvature"])
        for i in range(len(samples)):
            row = [repr(float(v)) for v in samples.positions[i]]
            row.append(repr(float(samples.weights[i])))
            row.append(repr(float(samples.curvatures[i])))
            w.writerow(row)


def read_boundary_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, weights, curvatures from a boundary CSV."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    d = 3 if "z" in header else 2
    arr = np.asarray([[float(x) for x in r] for r in data])
    return arr[:, :d], arr[:, d], arr[:, d + 1]
