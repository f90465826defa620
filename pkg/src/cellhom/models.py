"""Cell-energy models with analytic gradients.

A model assigns a nonnegative energy to the discrete gradient of one
lattice cell (a d x n_cols matrix whose columns are stencil-site positions
minus the mean of the 2^d corner positions) and, for multilattice models,
to the per-cell internal shift s (d x m).  All built-ins are translation
invariant by construction: the corner-block mean is subtracted from every
column on entry, so adding the same vector to each column never changes
the energy.

Evaluation and differentiation are vectorized over batches of cells; the
single-cell API wraps batches of one.  Gradients are exact except at the
non-smooth points of bond lengths |b| = 0, where the zero element of the
subdifferential is returned for the offending term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lattice import LatticeSpec, build_lattice

__all__ = [
    "EnergyModel",
    "SimplicialDecomposition",
    "PairPotential",
    "MatrixDensity",
    "QuadraticForm",
    "harmonic_spring_model",
    "pair_potential_model",
    "quasiconvex_wrapper_model",
    "quadratic_form_model",
    "multilattice_harmonic_model",
    "eval_cell_energy",
    "grad_cell_energy",
    "kuhn_decomposition",
    "lennard_jones",
    "harmonic_pair",
    "frobenius_squared_density",
    "constant_density",
]

_ZERO_BOND = 1e-14


class EnergyModel:
    """Base class for cell energies.

    Attributes:
        name: identifier used in run outputs.
        spec: the LatticeSpec the model is defined on.
        n_cols: stencil width (2^d for unit-cell models).
        m: internal-atom count.
        p: bulk growth exponent (energy scales like |F|^p).
        q: internal growth exponent (multilattice only, else 0).
        params: model parameters as given at construction.
        growth: optional (c, c_prime, c_dblprime) with
            c*|F|^p - c_prime <= W(F, argmin s) <= c_dblprime*(|F|^p + |s|^q + 1);
            None when no such constants are claimed (e.g. attractive pair
            potentials, which are not coercive).
        nonnegative: True when W >= 0 everywhere.
        frame_indifferent: True when W(RF, Rs) = W(F, s) for rotations R.
        zero_at_rotations: True when W(RZ + const, R*s_rest) = 0 (so the
            cell problem vanishes on rotations of the reference cell).
    """

    def __init__(self, name, spec, m=0, p=2, q=0, params=None, growth=None,
                 nonnegative=False, frame_indifferent=False, zero_at_rotations=False):
        self.name = name
        self.spec = spec
        self.m = m
        self.p = p
        self.q = q
        self.params = dict(params or {})
        self.growth = growth
        self.nonnegative = nonnegative
        self.frame_indifferent = frame_indifferent
        self.zero_at_rotations = zero_at_rotations

    @property
    def n_cols(self) -> int:
        return self.spec.n_cols

    # -- batched interface ------------------------------------------------

    def _center(self, F):
        nc = self.spec.n_corners
        return F - F[:, :, :nc].mean(axis=2, keepdims=True)

    def energy_many(self, F, S=None) -> np.ndarray:
        """Energies of a batch of cells; F has shape (B, d, n_cols)."""
        return self._energy(self._center(np.asarray(F, dtype=float)), S)

    def gradient_many(self, F, S=None):
        """Batched (dE/dF, dE/dS); shapes match the inputs."""
        F = np.asarray(F, dtype=float)
        gF, gS = self._gradient(self._center(F), S)
        nc = self.spec.n_corners
        gF[:, :, :nc] -= gF.sum(axis=2, keepdims=True) / nc
        return gF, gS

    # -- single-cell convenience -------------------------------------------

    def energy(self, F, s=None) -> float:
        S = None if s is None else np.asarray(s, dtype=float)[None]
        return float(self.energy_many(np.asarray(F, dtype=float)[None], S)[0])

    def gradient(self, F, s=None):
        S = None if s is None else np.asarray(s, dtype=float)[None]
        gF, gS = self.gradient_many(np.asarray(F, dtype=float)[None], S)
        return (gF[0], None if gS is None else gS[0])

    # -- to be provided by subclasses ---------------------------------------

    def _energy(self, F, S):
        raise NotImplementedError

    def _gradient(self, F, S):
        raise NotImplementedError

    def _energy_gradient(self, F, S):
        """Fused path for hot loops; subclasses may share intermediates."""
        return self._energy(F, S), self._gradient(F, S)


# ---------------------------------------------------------------------------
# bond-based models (harmonic springs, pair potentials)
# ---------------------------------------------------------------------------


class _BondModel(EnergyModel):
    """Energy as a weighted sum of scalar functions of bond lengths.

    Bonds are pairs of stencil columns encoded in a column-difference
    matrix, so bond vectors and force scatter are two small matmuls.
    Subclasses fix the bond list, the per-bond weights and the scalar
    potential (value and derivative).
    """

    bonds: np.ndarray      # (n_bonds, 2) column indices
    weights: np.ndarray    # (n_bonds,)

    def _set_bonds(self, bonds, weights, n_cols):
        self.bonds = np.asarray(bonds)
        self.weights = np.asarray(weights, dtype=float)
        D = np.zeros((n_cols, len(self.bonds)))
        for e, (a, b) in enumerate(self.bonds):
            D[b, e] += 1.0
            D[a, e] -= 1.0
        self._D = D

    def _bond_vectors(self, F):
        return F @ self._D

    def _lengths(self, b):
        return np.sqrt(np.einsum("bde,bde->be", b, b))

    def _phi(self, L):
        raise NotImplementedError

    def _dphi(self, L):
        raise NotImplementedError

    def _energy(self, F, S):
        L = self._lengths(self._bond_vectors(F))
        return self._phi(L) @ self.weights

    def _grad_from(self, b, L):
        safe = np.where(L > _ZERO_BOND, L, 1.0)
        coef = np.where(L > _ZERO_BOND, self.weights * self._dphi(L) / safe, 0.0)
        return (coef[:, None, :] * b) @ self._D.T

    def _gradient(self, F, S):
        b = self._bond_vectors(F)
        return self._grad_from(b, self._lengths(b)), None

    def _energy_gradient(self, F, S):
        b = self._bond_vectors(F)
        L = self._lengths(b)
        return self._phi(L) @ self.weights, (self._grad_from(b, L), None)


def _cell_edges(d: int) -> np.ndarray:
    """Corner-index pairs of the d*2^(d-1) unit-cell edges."""
    edges = []
    for i in range(2**d):
        for axis in range(d):
            j = i | (1 << axis)
            if j != i:
                edges.append((i, j))
    return np.array(sorted(set(edges)))


class HarmonicSpringModel(_BondModel):
    def __init__(self, spec, k, r0):
        super().__init__(
            "harmonic", spec, p=2,
            params={"k": k, "r0": r0},
            growth=(0.5 * k, 2.0 * k * r0**2, 4.0 * k * max(1.0, r0**2)),
            nonnegative=True, frame_indifferent=True, zero_at_rotations=True,
        )
        self.k = k
        self.r0 = r0
        # Each edge counts once per cell; together with the factor k/2 the
        # bulk sum over cells reproduces one (|b|-r0)^2 per unordered bond
        # in 2D, where every edge is shared by two cells.
        edges = _cell_edges(spec.d)
        self._set_bonds(edges, np.full(len(edges), 2.0 ** (2 - spec.d)), spec.n_cols)

    def _phi(self, L):
        return 0.5 * self.k * (L - self.r0) ** 2

    def _dphi(self, L):
        return self.k * (L - self.r0)


def harmonic_spring_model(spec: LatticeSpec, k: float, r0: float) -> EnergyModel:
    """Nearest-neighbour harmonic springs on the 2D unit square lattice.

    The cell energy is (k/2) * sum over the four cell edges of
    (|deformed edge| - r0)^2, which over interior cells reproduces the
    bulk bond sum with one term per unordered nearest-neighbour pair.
    """
    if k <= 0 or r0 <= 0:
        raise ValueError("spring stiffness and rest length must be positive")
    if spec.d != 2 or not np.allclose(spec.A, np.eye(2)) or spec.n_cols != 4:
        raise ValueError("harmonic spring model requires the 2D unit square lattice")
    return HarmonicSpringModel(spec, float(k), float(r0))


@dataclass(frozen=True)
class PairPotential:
    """A family of radial potentials V_r(rho) indexed by the shell radius.

    ``value(r, rho)`` is the energy of a bond of rest length r stretched
    to length rho; ``deriv``/``deriv2`` differentiate in rho.  All
    callables must broadcast over numpy arrays.  ``nonnegative`` marks
    families with V >= 0 so downstream checks may rely on a nonnegative
    total energy.
    """

    value: Callable
    deriv: Callable
    deriv2: Callable
    name: str = "pair"
    nonnegative: bool = False

    def at_rest(self):
        """(V'_r(r), V''_r(r)) as callables of the radius alone."""
        return (lambda r: self.deriv(r, r)), (lambda r: self.deriv2(r, r))


def lennard_jones(epsilon=1.0, sigma=1.0) -> PairPotential:
    """4*eps*((sigma/rho)^12 - (sigma/rho)^6), minimum at 2^(1/6)*sigma."""

    def value(r, rho):
        x = (sigma / rho) ** 6
        return 4.0 * epsilon * (x * x - x)

    def deriv(r, rho):
        x = (sigma / rho) ** 6
        return 4.0 * epsilon * (-12.0 * x * x + 6.0 * x) / rho

    def deriv2(r, rho):
        x = (sigma / rho) ** 6
        return 4.0 * epsilon * (156.0 * x * x - 42.0 * x) / rho**2

    return PairPotential(value, deriv, deriv2, name="lennard-jones")


def harmonic_pair(k=1.0, r0=1.0, shell=None) -> PairPotential:
    """(k/2)(rho - r0)^2, optionally restricted to one shell radius."""

    def sel(r):
        if shell is None:
            return np.ones_like(np.asarray(r, dtype=float))
        return (np.abs(np.asarray(r, dtype=float) - shell) < 1e-9).astype(float)

    return PairPotential(
        value=lambda r, rho: sel(r) * 0.5 * k * (np.asarray(rho, dtype=float) - r0) ** 2,
        deriv=lambda r, rho: sel(r) * k * (np.asarray(rho, dtype=float) - r0),
        deriv2=lambda r, rho: sel(r) * k,
        name="harmonic-pair",
        nonnegative=True,
    )


class PairPotentialModel(_BondModel):
    def __init__(self, spec, potential, cutoff, bonds, weights, rest_lengths):
        super().__init__(
            "pair", spec, p=2,
            params={"potential": potential.name, "cutoff": cutoff},
            nonnegative=potential.nonnegative,
            frame_indifferent=True,
        )
        self.potential = potential
        self.cutoff = cutoff
        self.rest_lengths = rest_lengths
        self._set_bonds(bonds, weights, spec.n_cols)

    def _phi(self, L):
        return self.potential.value(self.rest_lengths[None, :], L)

    def _dphi(self, L):
        return self.potential.deriv(self.rest_lengths[None, :], L)


def _stencil_cells_for_cutoff(d, A, cutoff):
    """Smallest box of cell offsets whose corner set realizes every bond.

    A separation vector delta is in range when |A delta| <= cutoff; the
    corners of the cells {|c|_inf <= R} provide all site offsets in
    {-R..R+1}^d, whose differences cover |delta|_inf <= 2R+1.
    """
    reach = int(np.ceil(cutoff * np.linalg.norm(np.linalg.inv(A), 2))) + 1
    deltas = np.stack(np.meshgrid(*[np.arange(-reach, reach + 1)] * d, indexing="ij"),
                      axis=-1).reshape(-1, d)
    lengths = np.linalg.norm(deltas @ A.T, axis=1)
    in_range = deltas[(lengths > 1e-12) & (lengths <= cutoff + 1e-12)]
    if len(in_range) == 0:
        raise ValueError("empty stencil: cutoff below the nearest-neighbour distance")
    dmax = int(np.max(np.abs(in_range)))
    R = dmax // 2  # smallest R with 2R+1 >= dmax
    box = np.stack(np.meshgrid(*[np.arange(-R, R + 1)] * d, indexing="ij"),
                   axis=-1).reshape(-1, d)
    return [tuple(int(x) for x in c) for c in box]


def pair_potential_model(spec: LatticeSpec, potential: PairPotential,
                         cutoff: float) -> EnergyModel:
    """Finite-range pair interactions split over cells.

    Every unordered pair of stencil sites within ``cutoff`` becomes a bond
    whose energy is divided by the number of cells containing the pair in
    the bulk, so summing over interior cells counts each lattice bond once
    (boundary cells that are missing are not compensated).  The returned
    model carries a fresh spec whose stencil radius covers the cutoff.

    Note the bulk normalization: each unordered bond contributes one V, so
    the Cauchy-Born density of this model is half the ordered-pair lattice
    sum sum_{x != 0} V(|Mx|)/|det A|.
    """
    d, A = spec.d, spec.A
    if spec.m != 0:
        raise ValueError("pair potential model is defined on Bravais lattices")
    cells = _stencil_cells_for_cutoff(d, A, cutoff)
    model_spec = build_lattice(d, A, stencil_offsets=cells, m=0)

    off = model_spec.offsets_int  # (n_cols, d), site offsets
    pos = model_spec.stencil.T    # (n_cols, d), Cartesian
    offset_set = {tuple(o) for o in off}
    bonds, weights, rests = [], [], []
    n = len(off)
    for i in range(n):
        for j in range(i + 1, n):
            r = np.linalg.norm(pos[i] - pos[j])
            if r > cutoff + 1e-12:
                continue
            # cells c containing both sites: (off_i - c) and (off_j - c)
            # must both be stencil offsets.
            count = 0
            for o in offset_set:
                c = tuple(off[i] - np.asarray(o))
                if tuple(np.asarray(off[j]) - np.asarray(c)) in offset_set:
                    count += 1
            bonds.append((i, j))
            weights.append(1.0 / count)
            rests.append(r)
    if not bonds:
        raise ValueError("empty stencil: cutoff below the nearest-neighbour distance")
    return PairPotentialModel(
        model_spec, potential, float(cutoff),
        np.array(bonds), np.array(weights), np.array(rests),
    )


# ---------------------------------------------------------------------------
# simplicial decompositions and the quasiconvex wrapper
# ---------------------------------------------------------------------------


@dataclass
class SimplicialDecomposition:
    """A decomposition of the cell A[-1/2,1/2]^d into corner simplices.

    Each simplex is an ordered (d+1)-tuple of vertex coordinates, all of
    which must be cell corners.  ``corner_ids`` maps every vertex to its
    column in the corner matrix.
    """

    d: int
    simplices: list            # list of (d+1, d) arrays
    volumes: np.ndarray = field(default=None)
    corner_ids: list = field(default=None)

    def validate(self, spec: LatticeSpec, n_probe=2048, seed=7):
        vols = []
        ids = []
        corners = spec.corners.T  # (2^d, d)
        for verts in self.simplices:
            verts = np.asarray(verts, dtype=float)
            if verts.shape != (self.d + 1, self.d):
                raise ValueError("bad decomposition: simplex has wrong shape")
            edge = (verts[1:] - verts[0]).T
            vols.append(abs(np.linalg.det(edge)) / math.factorial(self.d))
            match = []
            for v in verts:
                hits = np.nonzero(np.linalg.norm(corners - v, axis=1) < 1e-9)[0]
                if len(hits) != 1:
                    raise ValueError("bad decomposition: vertex is not a cell corner")
                match.append(int(hits[0]))
            ids.append(match)
        vols = np.array(vols)
        if abs(vols.sum() - spec.det_abs) > 1e-9 * max(1.0, spec.det_abs):
            raise ValueError("bad decomposition: volumes do not sum to the cell volume")
        # overlap-on-null-sets check at random probe points
        rng = np.random.default_rng(seed)
        probes = (rng.random((n_probe, self.d)) - 0.5) @ spec.A.T
        inside = np.zeros(n_probe, dtype=int)
        for verts in self.simplices:
            verts = np.asarray(verts, dtype=float)
            T = np.linalg.inv((verts[1:] - verts[0]).T)
            lam = (probes - verts[0]) @ T.T
            ok = (lam > 1e-10).all(axis=1) & (lam.sum(axis=1) < 1 - 1e-10)
            inside += ok
        if inside.max() > 1:
            raise ValueError("bad decomposition: simplices overlap")
        self.volumes = vols
        self.corner_ids = ids
        return self


def kuhn_decomposition(spec: LatticeSpec) -> SimplicialDecomposition:
    """The Kuhn (Freudenthal) decomposition of the cell into d! simplices.

    For each permutation of the axes the simplex walks from the lowest
    corner to the highest one axis at a time; all corners lie in the
    corner set, so the decomposition is admissible for corner-interpolated
    densities.
    """
    from itertools import permutations

    d = spec.d
    lo = np.full(d, -0.5)
    simplices = []
    for perm in permutations(range(d)):
        verts = [lo.copy()]
        v = lo.copy()
        for axis in perm:
            v = v.copy()
            v[axis] += 1.0
            verts.append(v)
        simplices.append(np.array(verts) @ spec.A.T)
    return SimplicialDecomposition(d=d, simplices=simplices).validate(spec)


@dataclass(frozen=True)
class MatrixDensity:
    """A continuum density V on d x d matrices with optional gradient.

    ``value`` maps (..., d, d) arrays to (...); ``grad`` maps them to
    (..., d, d).  ``p`` is the declared growth exponent and ``growth`` the
    optional (c, c_prime, c_dblprime) constants.
    """

    value: Callable
    grad: Optional[Callable] = None
    p: float = 2.0
    growth: Optional[tuple] = None
    name: str = "density"
    nonnegative: bool = False
    objective: bool = False   # V(RM) = V(M) for rotations R


def frobenius_squared_density() -> MatrixDensity:
    return MatrixDensity(
        value=lambda M: np.sum(np.square(M), axis=(-2, -1)),
        grad=lambda M: 2.0 * M,
        p=2.0,
        growth=(1.0, 0.0, 1.0),
        name="frobenius-squared",
        nonnegative=True,
        objective=True,
    )


def constant_density(c: float) -> MatrixDensity:
    return MatrixDensity(
        value=lambda M: np.full(np.asarray(M).shape[:-2], float(c)),
        grad=lambda M: np.zeros_like(np.asarray(M, dtype=float)),
        p=2.0,
        name=f"constant({c})",
        nonnegative=c >= 0,
        objective=True,
    )


class QuasiconvexWrapperModel(EnergyModel):
    def __init__(self, spec, density, decomp):
        super().__init__(
            "quasiconvex-wrapper", spec, p=density.p,
            params={"density": density.name},
            nonnegative=density.nonnegative,
            frame_indifferent=density.objective,
        )
        self.density = density
        self.decomp = decomp
        # Per simplex: G_S(F) = F @ B_S with B_S = (E_sel) @ Xinv, a fixed
        # (n_cols, d) matrix; precomputed once.
        mats = []
        for verts, ids in zip(decomp.simplices, decomp.corner_ids):
            verts = np.asarray(verts, dtype=float)
            Xinv = np.linalg.inv((verts[1:] - verts[0]).T)
            B = np.zeros((spec.n_cols, spec.d))
            for col, cid in enumerate(ids[1:]):
                B[cid] += Xinv[col]
                B[ids[0]] -= Xinv[col]
            mats.append(B)
        self._B = np.stack(mats)          # (n_simplices, n_cols, d)
        self._w = decomp.volumes.copy()   # (n_simplices,)
        # Cell-level growth constants are exact for quadratic densities:
        # sum_S |S| |F B_S|^2 is a quadratic form whose extreme eigenvalues
        # on the zero-row-sum subspace bound the energy both ways.
        if density.growth is not None and density.p == 2:
            K = np.einsum("s,snk,smk->nm", self._w, self._B, self._B)
            P = np.eye(spec.n_cols) - np.full((spec.n_cols,) * 2, 1.0 / spec.n_cols)
            eig = np.linalg.eigvalsh(P @ K @ P)
            lam_min = float(eig[eig > 1e-12].min())
            lam_max = float(eig.max())
            cv, cvp, cvpp = density.growth
            self.growth = (
                cv * lam_min,
                cvp * spec.det_abs,
                cvpp * max(lam_max, spec.det_abs) + cvpp,
            )

    def _grads(self, F):
        # (B, n_simplices, d, d): per-simplex constant gradients
        return np.einsum("bdn,snk->bsdk", F, self._B)

    def _energy(self, F, S):
        G = self._grads(F)
        return np.einsum("s,bs->b", self._w, self.density.value(G))

    def _gradient(self, F, S):
        if self.density.grad is None:
            raise ValueError(f"density {self.density.name} has no gradient")
        G = self._grads(F)
        DV = self.density.grad(G)  # (B, n_simplices, d, d)
        gF = np.einsum("s,bsdk,snk->bdn", self._w, DV, self._B)
        return gF, None


def quasiconvex_wrapper_model(spec: LatticeSpec, density: MatrixDensity,
                              decomp: SimplicialDecomposition | None = None) -> EnergyModel:
    """Cell energy obtained by integrating a matrix density over the cell.

    The corner values are interpolated affinely on each simplex of the
    decomposition (Kuhn by default), and the energy is the exact integral
    sum_S |S| * V(G_S) of the piecewise-constant interpolant gradient.
    For quasiconvex V the homogenized density reproduces V itself.
    """
    if spec.n_cols != spec.n_corners:
        raise ValueError("quasiconvex wrapper requires a unit-cell stencil")
    if decomp is None:
        decomp = kuhn_decomposition(spec)
    elif decomp.volumes is None or decomp.corner_ids is None:
        decomp = decomp.validate(spec)
    else:
        if abs(decomp.volumes.sum() - spec.det_abs) > 1e-9 * max(1.0, spec.det_abs):
            raise ValueError("bad decomposition: volumes do not sum to the cell volume")
    return QuasiconvexWrapperModel(spec, density, decomp)


# ---------------------------------------------------------------------------
# quadratic-form model (multi-constant energies beyond pair potentials)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticForm:
    """Quadratic form Q on d x d matrices, stored via its Hessian.

    Q(M) = vec(M)^T H vec(M) / 2 with H symmetric (row-major vec).
    """

    d: int
    H: np.ndarray

    def __post_init__(self):
        self.H.setflags(write=False)

    def value(self, M):
        v = np.asarray(M).reshape(*np.asarray(M).shape[:-2], self.d * self.d)
        return 0.5 * np.einsum("...i,ij,...j->...", v, self.H, v)

    def grad(self, M):
        shp = np.asarray(M).shape
        v = np.asarray(M).reshape(*shp[:-2], self.d * self.d)
        return (v @ self.H.T).reshape(shp)

    def tensor(self):
        """Hessian entries as a (d, d, d, d) array: d^2 Q / dM_ij dM_kl."""
        return self.H.reshape(self.d, self.d, self.d, self.d)

    @staticmethod
    def from_moduli(mu: float, lam: float, d: int = 2) -> "QuadraticForm":
        """Q(M) = mu*|sym M|^2 + (lam/2)*(tr M)^2."""
        n = d * d
        H = np.zeros((n, n))
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    for l in range(d):
                        h = mu * ((i == k) * (j == l) + (i == l) * (j == k))
                        h += lam * (i == j) * (k == l)
                        H[i * d + j, k * d + l] = h
        return QuadraticForm(d=d, H=H)


def _sym_basis(d):
    mats = []
    for i in range(d):
        E = np.zeros((d, d))
        E[i, i] = 1.0
        mats.append(E)
    for i in range(d):
        for j in range(i + 1, d):
            E = np.zeros((d, d))
            E[i, j] = E[j, i] = 2**-0.5
            mats.append(E)
    return mats


def _antisym_basis(d):
    mats = []
    for i in range(d):
        for j in range(i + 1, d):
            E = np.zeros((d, d))
            E[i, j] = 2**-0.5
            E[j, i] = -(2**-0.5)
            mats.append(E)
    return mats


def check_quadratic_form(Q: QuadraticForm):
    """Admissibility gate: psd, definite on symmetric, zero on antisymmetric."""
    scale = max(1.0, float(np.max(np.abs(Q.H))))
    eig = np.linalg.eigvalsh(0.5 * (Q.H + Q.H.T))
    if eig.min() < -1e-10 * scale:
        raise ValueError("inadmissible Q: not positive semidefinite")
    B = np.stack([m.reshape(-1) for m in _sym_basis(Q.d)], axis=1)
    sym_eig = np.linalg.eigvalsh(B.T @ Q.H @ B)
    if sym_eig.min() <= 1e-10 * scale:
        raise ValueError("inadmissible Q: not positive definite on symmetric matrices")
    for W in _antisym_basis(Q.d):
        if abs(Q.value(W)) > 1e-10 * scale:
            raise ValueError("inadmissible Q: does not vanish on antisymmetric matrices")


def _smoothstep(u):
    """C-infinity step, 0 at u <= 0 and 1 at u >= 1."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


def _smoothstep_deriv(u):
    u = np.asarray(u, dtype=float)
    inner = (u > 0) & (u < 1)
    ui = np.where(inner, u, 0.5)
    a = np.exp(-1.0 / ui)
    b = np.exp(-1.0 / (1.0 - ui))
    val = a * b * (1.0 / ui**2 + 1.0 / (1.0 - ui) ** 2) / (a + b) ** 2
    return np.where(inner, val, 0.0)


class QuadraticFormModel(EnergyModel):
    """det|A|*Q(sqrt(Fp^T Fp) - Id) + |Fr|^2 + chi, Fp/Fr the split of the
    corner block into its best d x d gradient and the residual."""

    def __init__(self, spec, Q, kappa, delta):
        qmax = float(np.max(np.abs(np.linalg.eigvalsh(Q.H))))
        super().__init__(
            "quadratic-form", spec, p=2,
            params={"kappa": kappa, "delta": delta},
            growth=(min(0.5, 0.05 * kappa),
                    4.0 * (spec.det_abs * qmax * spec.d + kappa + 1.0),
                    8.0 * (spec.det_abs * qmax + kappa + 1.0)),
            nonnegative=True, frame_indifferent=True, zero_at_rotations=True,
        )
        self.Q = Q
        self.kappa = kappa
        self.delta = delta
        Z = spec.corners
        self._ZZT_inv = np.linalg.inv(Z @ Z.T)
        self._proj = Z.T @ self._ZZT_inv @ Z        # n x n projector onto {MZ}
        self._lift = Z.T @ self._ZZT_inv            # F' = F @ lift

    def _split(self, F):
        Fp = F @ self._lift           # (B, d, d)
        Fr = F - Fp @ self.spec.corners
        return Fp, Fr

    def _chi_parts(self, Fp, F):
        det = np.linalg.det(Fp)
        u = (self.delta - det) / (0.5 * self.delta)
        h = _smoothstep(u)
        grow = 1.0 + np.sum(np.square(F), axis=(1, 2))
        return det, h, grow

    def _energy(self, F, S):
        Fp, Fr = self._split(F)
        C = np.swapaxes(Fp, 1, 2) @ Fp
        lam, V = np.linalg.eigh(C)
        lam = np.clip(lam, 0.0, None)
        U = V @ (np.sqrt(lam)[..., None] * np.swapaxes(V, 1, 2))
        E1 = self.spec.det_abs * self.Q.value(U - np.eye(self.spec.d))
        E2 = np.sum(np.square(Fr), axis=(1, 2))
        det, h, grow = self._chi_parts(Fp, F)
        return E1 + E2 + self.kappa * h * grow

    def _gradient(self, F, S):
        d = self.spec.d
        Fp, Fr = self._split(F)
        C = np.swapaxes(Fp, 1, 2) @ Fp
        lam, V = np.linalg.eigh(C)
        lam = np.clip(lam, 0.0, None)
        sq = np.sqrt(lam)
        U = V @ (sq[..., None] * np.swapaxes(V, 1, 2))
        S1 = self.Q.grad(U - np.eye(d))
        S1 = 0.5 * (S1 + np.swapaxes(S1, 1, 2))
        # solve U T + T U = S1 in the eigenbasis of U
        St = np.swapaxes(V, 1, 2) @ S1 @ V
        den = sq[:, :, None] + sq[:, None, :]
        T = np.where(den > 1e-12, St / np.where(den > 1e-12, den, 1.0), 0.0)
        T = V @ T @ np.swapaxes(V, 1, 2)
        gFp = 2.0 * self.spec.det_abs * (Fp @ T)

        det, h, grow = self._chi_parts(Fp, F)
        u = (self.delta - det) / (0.5 * self.delta)
        dh_ddet = _smoothstep_deriv(u) * (-1.0 / (0.5 * self.delta))
        cof = np.empty_like(Fp)  # d(det)/dFp for d = 2
        if d == 2:
            cof[:, 0, 0] = Fp[:, 1, 1]
            cof[:, 0, 1] = -Fp[:, 1, 0]
            cof[:, 1, 0] = -Fp[:, 0, 1]
            cof[:, 1, 1] = Fp[:, 0, 0]
        else:
            cof = det[:, None, None] * np.linalg.inv(np.swapaxes(Fp, 1, 2))
        gFp = gFp + self.kappa * (dh_ddet * grow)[:, None, None] * cof

        gF = gFp @ (self._ZZT_inv @ self.spec.corners)
        gF = gF + 2.0 * Fr
        gF = gF + (2.0 * self.kappa) * h[:, None, None] * F
        return gF, None


def quadratic_form_model(spec: LatticeSpec, Q: QuadraticForm,
                         kappa: float = 1.0, delta: float = 0.5) -> EnergyModel:
    """Frame-indifferent cell energy whose Hessian at the identity is 2*Q.

    The corner block splits orthogonally into its best affine part Fp and
    a residual; the energy is det|A|*Q(stretch(Fp) - Id) + |residual|^2
    plus a smooth orientation penalty kappa*h(det Fp)*(1 + |F|^p) that
    switches on below det Fp = delta, which keeps reflected states away
    from the zero set.
    """
    if spec.d != 2 or spec.n_cols != spec.n_corners:
        raise ValueError("quadratic form model requires a 2D unit-cell stencil")
    if Q.d != spec.d:
        raise ValueError("dimension mismatch between Q and the lattice")
    check_quadratic_form(Q)
    if kappa <= 0 or not (0 < delta < 1):
        raise ValueError("need kappa > 0 and 0 < delta < 1")
    return QuadraticFormModel(spec, Q, float(kappa), float(delta))


# ---------------------------------------------------------------------------
# multilattice harmonic model
# ---------------------------------------------------------------------------


class MultilatticeHarmonicModel(_BondModel):
    """Square cell with one internal atom tethered to the four corners."""

    def __init__(self, spec, k, r0):
        super().__init__(
            "multilattice-harmonic", spec, m=1, p=2, q=2,
            params={"k": k, "r0": r0},
            growth=(0.25 * k, 4.0 * k * (1.0 + r0**2), 8.0 * k * (1.0 + r0**2)),
            nonnegative=True, frame_indifferent=True, zero_at_rotations=True,
        )
        self.k = k
        self.r0 = r0
        self.edge_rest = 1.0
        edges = _cell_edges(spec.d)
        self._set_bonds(edges, np.ones(len(edges)), spec.n_cols)

    def _phi(self, L):
        return 0.5 * self.k * (L - self.edge_rest) ** 2

    def _dphi(self, L):
        return self.k * (L - self.edge_rest)

    def _arm_terms(self, F, S):
        arm = F - S[:, :, 0][:, :, None]  # corner minus internal atom
        La = np.sqrt(np.einsum("bde,bde->be", arm, arm))
        return arm, La

    def _energy(self, F, S):
        if S is None:
            raise ValueError("multilattice model needs an internal shift s")
        e = self._phi(self._lengths(self._bond_vectors(F))) @ self.weights
        _, La = self._arm_terms(F, S)
        return e + 0.5 * self.k * np.sum((La - self.r0) ** 2, axis=1)

    def _gradient(self, F, S):
        if S is None:
            raise ValueError("multilattice model needs an internal shift s")
        b = self._bond_vectors(F)
        gF = self._grad_from(b, self._lengths(b))
        arm, La = self._arm_terms(F, S)
        safe = np.where(La > _ZERO_BOND, La, 1.0)
        coef = np.where(La > _ZERO_BOND, self.k * (La - self.r0) / safe, 0.0)
        ga = coef[:, None, :] * arm   # (B, d, 4) w.r.t. the corner columns
        gF += ga
        gS = -ga.sum(axis=2)[:, :, None]
        return gF, gS

    def _energy_gradient(self, F, S):
        return self._energy(F, S), self._gradient(F, S)


def multilattice_harmonic_model(spec: LatticeSpec, k: float, r0: float) -> EnergyModel:
    """One internal atom per square cell, harmonically tethered.

    The energy adds four center-to-corner springs of rest length r0 = |z_1|
    (the corner distance) to the plain corner-edge springs; s is the offset
    of the internal atom from the deformed cell mean.
    """
    if spec.m != 1:
        raise ValueError("unsupported internal count: model needs m = 1")
    if spec.d != 2 or not np.allclose(spec.A, np.eye(2)) or spec.n_cols != 4:
        raise ValueError("multilattice harmonic model requires the 2D unit square lattice")
    if k <= 0:
        raise ValueError("spring stiffness must be positive")
    z1 = np.linalg.norm(spec.corners[:, 0])
    if abs(r0 - z1) > 1e-9:
        raise ValueError(f"rest length must equal the corner distance {z1}")
    return MultilatticeHarmonicModel(spec, float(k), float(r0))


# ---------------------------------------------------------------------------
# gated operations
# ---------------------------------------------------------------------------


def _validate_cell_input(model, F, s):
    F = np.asarray(F, dtype=float)
    if F.shape != (model.spec.d, model.n_cols):
        raise ValueError(
            f"F must be {model.spec.d}x{model.n_cols}, got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite input")
    nc = model.spec.n_corners
    rows = F[:, :nc].sum(axis=1)
    if np.max(np.abs(rows)) > 1e-12 * (1.0 + np.max(np.abs(F))) * nc:
        raise ValueError("not a discrete gradient: corner row sums violate V0")
    if model.m > 0:
        if s is None:
            raise ValueError(f"model has m = {model.m} internal atoms, s required")
        s = np.asarray(s, dtype=float).reshape(model.spec.d, model.m)
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite input")
    else:
        s = None
    return F, s


def eval_cell_energy(model: EnergyModel, F, s=None) -> float:
    """Energy of one cell with validation of the discrete-gradient gate."""
    F, s = _validate_cell_input(model, F, s)
    e = model.energy(F, s)
    if not np.isfinite(e):
        raise ValueError("non-finite input")
    return e


def grad_cell_energy(model: EnergyModel, F, s=None):
    """(dE/dF, dE/ds) for one cell; zero subgradient at zero bond lengths."""
    F, s = _validate_cell_input(model, F, s)
    return model.gradient(F, s)
