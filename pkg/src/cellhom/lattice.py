"""Bravais-lattice geometry and cell/site bookkeeping on box samples.

A lattice is generated by an invertible basis matrix A; its unit cells are
the half-open parallelepipeds A(k + [0,1)^d) indexed by integer vectors k.
A finite sample is the box of N^d cells.  The lattice spacing is
normalized to one throughout (rescaling the cell problems is lossless).
Energies are sums over the interior cells (those at least ``radius``
layers away from the box faces), so every site that touches a
non-interior cell carries Dirichlet data ("pinned") while the remaining
sites are free degrees of freedom.

Interaction stencils wider than one cell are described by the set of
neighbouring cell offsets whose corners participate; the stencil always
starts with the 2^d corners of the cell itself, listed in binary order
with the (-1/2, ..., -1/2) corner first (bit 0 of the column index toggles
the first axis).  That ordering is part of a model's identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LatticeSpec",
    "CellGrid",
    "build_lattice",
    "build_grid",
    "cell_sites",
    "square_lattice",
]


def _corner_fractions(d: int) -> np.ndarray:
    """The 2^d points of {-1/2, 1/2}^d in binary column order."""
    corners = np.empty((2**d, d))
    for j in range(2**d):
        for axis in range(d):
            corners[j, axis] = ((j >> axis) & 1) - 0.5
    return corners


@dataclass(frozen=True)
class LatticeSpec:
    """Immutable description of a Bravais lattice and its interaction stencil.

    Attributes:
        d: spatial dimension (2 or 3).
        A: d x d basis matrix, columns are the primitive vectors.
        det_abs: |det A| > 0.
        corners: d x 2^d matrix of unit-cell corner vectors A*{-1/2,1/2}^d,
            binary column order, first column A*(-1/2,...,-1/2).  Columns
            sum to zero.
        stencil: d x n_cols matrix of all stencil offsets (Cartesian,
            relative to the cell center); the first 2^d columns are
            ``corners``.
        offsets_int: (n_cols, d) integer site offsets of the stencil
            columns relative to the cell's base index k (corner j of cell
            k is site k + offsets_int[j]).
        radius: boundary-layer width in cells; 1 for unit-cell stencils.
        m: number of internal atoms per cell (0 for a plain Bravais model).
    """

    d: int
    A: np.ndarray
    det_abs: float
    corners: np.ndarray
    stencil: np.ndarray
    offsets_int: np.ndarray
    radius: int
    m: int = 0

    @property
    def n_corners(self) -> int:
        return 2**self.d

    @property
    def n_cols(self) -> int:
        return self.stencil.shape[1]

    def __post_init__(self):
        for arr in (self.A, self.corners, self.stencil, self.offsets_int):
            arr.setflags(write=False)


def build_lattice(d, A, stencil_offsets=None, m=0) -> LatticeSpec:
    """Build a lattice specification.

    Args:
        d: dimension, 2 or 3.
        A: d x d invertible basis matrix (any nested sequence).
        stencil_offsets: optional list of integer cell offsets whose
            corners join the interaction stencil.  Must contain the zero
            offset and no duplicates.  ``None`` means the unit cell only.
        m: internal atoms per cell.

    Raises:
        ValueError: on a singular basis ("degenerate lattice") or a
            malformed stencil ("bad stencil").
    """
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    A = np.asarray(A, dtype=float)
    if A.shape != (d, d):
        raise ValueError(f"basis must be {d}x{d}, got {A.shape}")
    det = np.linalg.det(A)
    scale = np.max(np.abs(A))
    if not np.isfinite(det) or abs(det) <= 1e-12 * max(scale, 1.0) ** d:
        raise ValueError("degenerate lattice: basis matrix is singular")
    if m < 0:
        raise ValueError(f"internal atom count must be >= 0, got {m}")

    if stencil_offsets is None:
        offsets = [(0,) * d]
    else:
        offsets = [tuple(int(c) for c in off) for off in stencil_offsets]
        for off, raw in zip(offsets, stencil_offsets):
            if not np.allclose(np.asarray(raw, dtype=float), off):
                raise ValueError("bad stencil: offsets must be integer cell offsets")
        if len(set(offsets)) != len(offsets):
            raise ValueError("bad stencil: duplicate cell offsets")
        if (0,) * d not in offsets:
            raise ValueError("bad stencil: zero offset missing")
        # Own cell comes first regardless of the caller's ordering.
        offsets = [(0,) * d] + [off for off in offsets if off != (0,) * d]

    fr = _corner_fractions(d)
    seen = set()
    frac_cols = []
    for cell_off in offsets:
        for v in fr:
            key = tuple((np.asarray(cell_off) + v + 0.5).astype(int))
            if key in seen:
                continue
            seen.add(key)
            frac_cols.append(np.asarray(cell_off) + v)
    frac = np.array(frac_cols)  # (n_cols, d), half-integer entries
    radius = 1 + max(int(np.max(np.abs(off))) for off in offsets)

    corners = (A @ fr.T).copy()
    stencil = (A @ frac.T).copy()
    offsets_int = np.round(frac + 0.5).astype(int)
    return LatticeSpec(
        d=d,
        A=A.copy(),
        det_abs=abs(det),
        corners=corners,
        stencil=stencil,
        offsets_int=offsets_int,
        radius=radius,
        m=int(m),
    )


def square_lattice(m=0) -> LatticeSpec:
    """The 2D unit square lattice (A = identity)."""
    return build_lattice(2, np.eye(2), m=m)


@dataclass(frozen=True)
class CellGrid:
    """A box of N^d unit cells with interior/boundary classification.

    Cells are indexed lexicographically over k in {0..N-1}^d (first axis
    slowest), sites over i in {0..N}^d.  Immutable after construction and
    safe to share between workers.
    """

    spec: LatticeSpec
    N: int
    cell_multi: np.ndarray = field(repr=False)       # (n_cells, d) int
    interior_mask: np.ndarray = field(repr=False)    # (n_cells,) bool
    site_multi: np.ndarray = field(repr=False)       # (n_sites, d) int
    site_coords: np.ndarray = field(repr=False)      # (n_sites, d) float
    free_mask: np.ndarray = field(repr=False)        # (n_sites,) bool
    interior_cell_sites: np.ndarray = field(repr=False)  # (n_interior, n_cols) int

    def __post_init__(self):
        for arr in (self.cell_multi, self.interior_mask, self.site_multi,
                    self.site_coords, self.free_mask, self.interior_cell_sites):
            arr.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return self.N ** self.spec.d

    @property
    def n_sites(self) -> int:
        return (self.N + 1) ** self.spec.d

    @property
    def n_interior(self) -> int:
        return self.interior_cell_sites.shape[0]

    @property
    def cells(self) -> np.ndarray:
        return np.arange(self.n_cells)

    @property
    def interior_cells(self) -> np.ndarray:
        return np.nonzero(self.interior_mask)[0]

    @property
    def boundary_cells(self) -> np.ndarray:
        return np.nonzero(~self.interior_mask)[0]

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.n_sites)

    @property
    def free_sites(self) -> np.ndarray:
        return np.nonzero(self.free_mask)[0]

    @property
    def pinned_sites(self) -> np.ndarray:
        return np.nonzero(~self.free_mask)[0]

    def cell_center(self, cell) -> np.ndarray:
        k = self.cell_multi[cell]
        return self.spec.A @ (k + 0.5)


def build_grid(spec: LatticeSpec, N: int) -> CellGrid:
    """Enumerate the cells and sites of the N^d box.

    The boundary layer has width ``spec.radius`` cells so that every
    stencil site of an interior cell exists on the grid; a site is free
    exactly when all cells it is a corner of are interior.

    Raises:
        ValueError: if N <= 2*radius ("no interior cells").
    """
    d, r = spec.d, spec.radius
    N = int(N)
    if N <= 2 * r:
        raise ValueError(f"no interior cells: need N > {2 * r}, got N = {N}")

    cell_multi = np.stack(
        np.meshgrid(*[np.arange(N)] * d, indexing="ij"), axis=-1
    ).reshape(-1, d)
    interior_mask = np.all((cell_multi >= r) & (cell_multi <= N - 1 - r), axis=1)

    site_multi = np.stack(
        np.meshgrid(*[np.arange(N + 1)] * d, indexing="ij"), axis=-1
    ).reshape(-1, d)
    site_coords = site_multi @ spec.A.T
    free_mask = np.all((site_multi >= r + 1) & (site_multi <= N - 1 - r), axis=1)

    interior_multi = cell_multi[interior_mask]                     # (n_int, d)
    idx = interior_multi[:, None, :] + spec.offsets_int[None, :, :]
    assert idx.min() >= 0 and idx.max() <= N
    interior_cell_sites = np.ravel_multi_index(
        tuple(idx[..., axis] for axis in range(d)), (N + 1,) * d
    )

    return CellGrid(
        spec=spec,
        N=N,
        cell_multi=cell_multi,
        interior_mask=interior_mask,
        site_multi=site_multi,
        site_coords=site_coords,
        free_mask=free_mask,
        interior_cell_sites=interior_cell_sites,
    )


def cell_sites(grid: CellGrid, cell: int) -> np.ndarray:
    """Site indices of one cell's stencil columns, corner block first.

    Corner k of the returned list sits at (cell center) + corners[:, k]
    exactly.  For boundary cells of wide-stencil models some stencil sites
    may fall outside the grid, in which case an error is raised; the
    energy never evaluates those cells.
    """
    cell = int(cell)
    if cell < 0 or cell >= grid.n_cells:
        raise ValueError(f"cell index out of range: {cell}")
    k = grid.cell_multi[cell]
    idx = k[None, :] + grid.spec.offsets_int
    if idx.min() < 0 or idx.max() > grid.N:
        raise ValueError(f"stencil site out of range for boundary cell {cell}")
    return np.ravel_multi_index(
        tuple(idx[:, axis] for axis in range(grid.spec.d)), (grid.N + 1,) * grid.spec.d
    )
