"""Lattice deformations, discrete gradients and cell interpolation.

A deformation stores one position vector per lattice site.  The discrete
gradient of a cell collects the stencil-site positions minus the mean of
the 2^d corner positions; its corner block always has zero row sums, which
is exactly the admissible set for cell energies.

The continuous piecewise-affine interpolant of the corner values (built by
recursive face-barycenter subdivision, 8 triangles per 2D cell) is used
for diagnostics only: its cell-averaged gradient p-norm is equivalent to
the discrete gradient norm with constants that depend only on the lattice
basis, and this module computes those constants once per basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .lattice import CellGrid, LatticeSpec

__all__ = [
    "Deformation",
    "InternalField",
    "InterpolationPiece",
    "affine_deformation",
    "apply_boundary",
    "discrete_gradient",
    "interpolate_cell",
    "gradient_equivalence_ratio",
    "certified_ratio_bounds",
    "deformation_to_csv",
]


@dataclass
class Deformation:
    """Per-site positions on a grid; the pinned mask comes from the grid."""

    grid: CellGrid
    y: np.ndarray  # (n_sites, d)

    def copy(self) -> "Deformation":
        return Deformation(self.grid, self.y.copy())


@dataclass
class InternalField:
    """Per-interior-cell internal shifts s (d x m each)."""

    grid: CellGrid
    s: np.ndarray  # (n_interior, d, m)
    mean_target: np.ndarray | None = None

    def copy(self) -> "InternalField":
        return InternalField(self.grid, self.s.copy(), self.mean_target)


@dataclass(frozen=True)
class InterpolationPiece:
    """One affine piece of the cell interpolant: simplex + its gradient."""

    vertices: np.ndarray  # (d+1, d), cell-local coordinates
    values: np.ndarray    # (d+1, d)
    gradient: np.ndarray  # (d, d)
    volume: float


def affine_deformation(grid: CellGrid, M) -> Deformation:
    """y(x) = M x at every site."""
    M = np.asarray(M, dtype=float)
    return Deformation(grid, grid.site_coords @ M.T)


def apply_boundary(deformation: Deformation, g) -> Deformation:
    """Pin the sites of boundary cells to the datum g.

    g maps an (n, d) array of site coordinates to (n, d) positions; free
    sites keep their values.  The datum is evaluated at the site position
    itself, which for affine data differs from evaluation at cell centers
    only by a fixed shift of every pinned site and leaves all cell-problem
    values unchanged.
    """
    out = deformation.copy()
    pinned = ~deformation.grid.free_mask
    vals = np.asarray(g(deformation.grid.site_coords[pinned]), dtype=float)
    if vals.shape != (int(pinned.sum()), deformation.grid.spec.d):
        raise ValueError("boundary datum returned a wrong shape")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite boundary values")
    out.y[pinned] = vals
    return out


def discrete_gradient(deformation: Deformation, cell: int, internal=None) -> np.ndarray:
    """The d x n_cols discrete gradient of one interior cell.

    Column j is (stencil site j) minus the mean of the 2^d corner values.
    ``internal`` is accepted for signature symmetry with multilattice
    callers but does not enter the gradient.
    """
    grid = deformation.grid
    interior = np.nonzero(grid.interior_mask)[0]
    pos = np.searchsorted(interior, cell)
    if pos >= len(interior) or interior[pos] != cell:
        raise ValueError("gradient undefined on boundary layer")
    sites = grid.interior_cell_sites[pos]
    Y = deformation.y[sites].T  # (d, n_cols)
    nc = grid.spec.n_corners
    return Y - Y[:, :nc].mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# recursive barycentric interpolation
# ---------------------------------------------------------------------------


def _face_decomposition(axes, fixed, d):
    """Simplices of a k-face as lists of corner-weight vectors.

    A vertex of the decomposition is a convex combination of cell corners;
    it is represented by its weight vector over the 2^d corners.  ``axes``
    are the free axes of the face, ``fixed`` maps the other axes to 0/1.
    """
    corners_of_face = []
    for bits in range(2 ** len(axes)):
        idx = 0
        for pos, axis in enumerate(axes):
            if (bits >> pos) & 1:
                idx |= 1 << axis
        for axis, bit in fixed.items():
            if bit:
                idx |= 1 << axis
        corners_of_face.append(idx)

    if len(axes) == 0:
        w = np.zeros(2**d)
        w[corners_of_face[0]] = 1.0
        return [[w]]

    center = np.zeros(2**d)
    for c in corners_of_face:
        center[c] = 1.0 / len(corners_of_face)

    simplices = []
    for drop_pos, drop_axis in enumerate(axes):
        sub_axes = tuple(a for a in axes if a != drop_axis)
        for bit in (0, 1):
            sub_fixed = dict(fixed)
            sub_fixed[drop_axis] = bit
            for sub in _face_decomposition(sub_axes, sub_fixed, d):
                simplices.append(sub + [center])
    return simplices


_FACE_CACHE: dict = {}


def _cell_simplices(d):
    if d not in _FACE_CACHE:
        _FACE_CACHE[d] = [
            np.stack(s) for s in _face_decomposition(tuple(range(d)), {}, d)
        ]
    return _FACE_CACHE[d]


def interpolate_cell(deformation: Deformation, cell: int) -> list[InterpolationPiece]:
    """Piecewise-affine interpolant of one cell's corner values.

    Face barycenters take the mean of their corner values; the affine
    pieces tile the cell and agree across shared faces, so the interpolant
    is continuous.  In 2D each cell splits into 8 triangles.
    """
    grid = deformation.grid
    if cell < 0 or cell >= grid.n_cells:
        raise ValueError(f"cell index out of range: {cell}")
    spec = grid.spec
    d = spec.d
    k = grid.cell_multi[cell]
    idx = k[None, :] + spec.offsets_int[: spec.n_corners]
    sites = np.ravel_multi_index(
        tuple(idx[:, axis] for axis in range(d)), (grid.N + 1,) * d
    )
    corner_vals = deformation.y[sites]          # (2^d, d)
    corner_pos = spec.corners.T                  # (2^d, d), cell-local

    pieces = []
    for weights in _cell_simplices(d):           # (d+1, 2^d)
        verts = weights @ corner_pos
        vals = weights @ corner_vals
        X = (verts[1:] - verts[0]).T
        G = (vals[1:] - vals[0]).T @ np.linalg.inv(X)
        vol = abs(np.linalg.det(X)) / math.factorial(d)
        pieces.append(InterpolationPiece(verts, vals, G, vol))
    return pieces


def gradient_equivalence_ratio(deformation: Deformation, cell: int, p: float):
    """(average |interpolant gradient|^p over the cell) / |discrete gradient|^p.

    The average is exact because the interpolant gradient is constant per
    piece.  Returned as a (lower, upper) pair: both entries carry the same
    sample value, to be compared against the certified interval.
    """
    F = discrete_gradient(deformation, cell)
    nF = np.linalg.norm(F)
    if nF <= 1e-14:
        raise ValueError("ratio undefined: zero discrete gradient")
    pieces = interpolate_cell(deformation, cell)
    cellvol = deformation.grid.spec.det_abs
    avg = sum(pc.volume * np.linalg.norm(pc.gradient) ** p for pc in pieces) / cellvol
    ratio = avg / nF**p
    return ratio, ratio


# ---------------------------------------------------------------------------
# certified equivalence constants
# ---------------------------------------------------------------------------


def _zero_rowsum_basis(d, n):
    """Orthonormal basis of the d x n matrices with zero row sums."""
    D = np.zeros((n, n - 1))
    for i in range(n - 1):
        D[i, i] = 1.0
        D[i + 1, i] = -1.0
    q, _ = np.linalg.qr(D)
    cols = []
    for row in range(d):
        for j in range(n - 1):
            E = np.zeros((d, n))
            E[row] = q[:, j]
            cols.append(E)
    return cols


def _piece_maps(spec: LatticeSpec):
    """(weights, volume fractions) of the barycentric pieces: G = F @ B."""
    d = spec.d
    corner_pos = spec.corners.T
    mats, fracs = [], []
    for weights in _cell_simplices(d):
        verts = weights @ corner_pos
        X = (verts[1:] - verts[0]).T
        # vertex values are weights @ F^T, so the piece gradient is F @ W
        W = (weights[1:] - weights[0]).T @ np.linalg.inv(X)
        mats.append(W)
        fracs.append(abs(np.linalg.det(X)) / math.factorial(d) / spec.det_abs)
    return mats, np.array(fracs)


_BOUND_CACHE: dict = {}


def certified_ratio_bounds(spec: LatticeSpec, p: float):
    """Extreme values of the gradient-equivalence ratio over unit fields.

    The ratio is scale invariant and depends on the discrete gradient only,
    so its extremes over the zero-row-sum unit sphere are the equivalence
    constants.  For p = 2 they are exact singular values of the stacked
    piece maps; for other p a dense deterministic sample of the sphere is
    refined by local optimization from the most extreme starts.
    """
    key = (spec.d, spec.A.tobytes(), float(p))
    if key in _BOUND_CACHE:
        return _BOUND_CACHE[key]

    d, n = spec.d, spec.n_corners
    mats, fracs = _piece_maps(spec)
    basis = _zero_rowsum_basis(d, n)

    def ratio(F):
        val = 0.0
        for W, frac in zip(mats, fracs):
            val += frac * np.linalg.norm(F @ W) ** p
        return val / np.linalg.norm(F) ** p

    if p == 2:
        rows = []
        for E in basis:
            rows.append(
                np.concatenate(
                    [np.sqrt(frac) * (E @ W).ravel() for W, frac in zip(mats, fracs)]
                )
            )
        sv = np.linalg.svd(np.stack(rows, axis=1), compute_uv=False)
        lo, hi = float(sv.min() ** 2), float(sv.max() ** 2)
    else:
        from scipy.optimize import minimize

        dim = len(basis)
        rng = np.random.default_rng(20240513)
        samples = rng.standard_normal((4096, dim))
        samples /= np.linalg.norm(samples, axis=1, keepdims=True)

        def ratio_coords(c):
            F = sum(ci * E for ci, E in zip(c, basis))
            return ratio(F)

        vals = np.array([ratio_coords(c) for c in samples])

        def refine(c0, sign):
            res = minimize(
                lambda c: sign * ratio_coords(c / np.linalg.norm(c)),
                c0, method="L-BFGS-B",
                options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-12},
            )
            return sign * res.fun

        lo = min(refine(samples[i], +1.0) for i in np.argsort(vals)[:8])
        hi = max(refine(samples[i], -1.0) for i in np.argsort(vals)[-8:])
        lo, hi = float(lo), float(hi)

    margin = 1e-9 * max(1.0, hi)
    out = (lo - margin, hi + margin)
    _BOUND_CACHE[key] = out
    return out


def deformation_to_csv(deformation: Deformation, path):
    """Write sites and positions as site_x,site_y[,site_z],y_1,y_2[,y_3]."""
    d = deformation.grid.spec.d
    head = ",".join([f"site_{ax}" for ax in "xyz"[:d]] + [f"y_{i+1}" for i in range(d)])
    data = np.hstack([deformation.grid.site_coords, deformation.y])
    with open(path, "w") as fh:
        fh.write(head + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
