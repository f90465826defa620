"""Minimization of the total interior-cell energy under affine pinning.

The free variables are the positions of sites not touching any boundary
cell, plus (for multilattice models) the per-cell internal shifts.  When a
mean value is prescribed for the internal shifts, the deviations from it
are parametrized on the mean-zero subspace (differences against the last
interior cell), so the constraint holds identically along all iterates.

The minimizer is a limited-memory quasi-Newton descent with a backtracking
line search (sufficient-decrease constant 1e-4, halving steps).  Accepted
energies are monotone nonincreasing and pinned coordinates never change.
Everything is deterministic given the options, including the random warm
starts, which draw from per-start counter-based generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import Deformation, InternalField, affine_deformation, apply_boundary
from .lattice import CellGrid
from .models import EnergyModel

__all__ = [
    "SolveOptions",
    "SolveResult",
    "Problem",
    "assemble",
    "energy_and_gradient",
    "site_forces",
    "minimize",
    "buckling_start",
    "multi_start_minimize",
    "DivergedEvaluation",
]


class DivergedEvaluation(RuntimeError):
    """Raised when the energy evaluates to a non-finite value."""


@dataclass(frozen=True)
class SolveOptions:
    grad_tol: float = 1e-8          # sup-norm of the gradient
    max_iter: int = 5000
    history: int = 10               # quasi-Newton memory length
    n_random_starts: int = 8
    perturb_amp: float = 0.1        # lattice units
    seed: int = 0
    use_buckling_starts: bool = True

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.perturb_amp < 0:
            raise ValueError("perturb_amp must be nonnegative")


@dataclass
class SolveResult:
    energy: float
    argmin: Deformation
    internal: InternalField | None
    iterations: int
    converged: bool
    grad_norm: float
    start_label: str


class Problem:
    """Assembled cell problem: grid + model + affine boundary data."""

    def __init__(self, grid: CellGrid, model: EnergyModel, M, s0=None):
        if model.spec.n_cols != grid.spec.n_cols or model.spec.d != grid.spec.d:
            raise ValueError("incompatible stencil between model and grid")
        if not np.allclose(model.spec.A, grid.spec.A):
            raise ValueError("model and grid live on different lattices")
        if grid.spec.radius < model.spec.radius:
            raise ValueError("incompatible stencil radius vs N: grid too narrow")
        self.grid = grid
        self.model = model
        self.M = np.asarray(M, dtype=float)
        self.d = grid.spec.d
        self.n_free = int(grid.free_mask.sum())
        self.free_idx = np.nonzero(grid.free_mask)[0]
        self.cell_sites = grid.interior_cell_sites
        self.n_cells = self.cell_sites.shape[0]

        base = affine_deformation(grid, self.M)
        self.pinned_values = base.y[~grid.free_mask].copy()

        self.m = model.m
        if self.m > 0:
            self.s0 = None if s0 is None else np.asarray(s0, dtype=float).reshape(self.d, self.m)
            if self.s0 is not None:
                self.n_internal = (self.n_cells - 1) * self.d * self.m
            else:
                self.n_internal = self.n_cells * self.d * self.m
        else:
            if s0 is not None:
                raise ValueError("internal variables undefined for Bravais model")
            self.s0 = None
            self.n_internal = 0
        self.n_vars = self.n_free * self.d + self.n_internal

    # -- variable packing ---------------------------------------------------

    def pack(self, deformation: Deformation, internal: InternalField | None = None):
        x = np.empty(self.n_vars)
        x[: self.n_free * self.d] = deformation.y[self.free_idx].ravel()
        if self.m > 0:
            s = np.zeros((self.n_cells, self.d, self.m)) if internal is None else internal.s
            if self.s0 is not None:
                dev = s - self.s0[None]
                x[self.n_free * self.d:] = dev[:-1].ravel()
            else:
                x[self.n_free * self.d:] = s.ravel()
        return x

    def unpack(self, x):
        y = np.empty((self.grid.n_sites, self.d))
        y[~self.grid.free_mask] = self.pinned_values
        y[self.free_idx] = x[: self.n_free * self.d].reshape(self.n_free, self.d)
        s = None
        if self.m > 0:
            if self.s0 is not None:
                dev = np.zeros((self.n_cells, self.d, self.m))
                dev[:-1] = x[self.n_free * self.d:].reshape(self.n_cells - 1, self.d, self.m)
                dev[-1] = -dev[:-1].sum(axis=0)
                s = self.s0[None] + dev
            else:
                s = x[self.n_free * self.d:].reshape(self.n_cells, self.d, self.m)
        return y, s

    def deformation(self, x) -> Deformation:
        y, _ = self.unpack(x)
        return Deformation(self.grid, y)

    def internal_field(self, x) -> InternalField | None:
        if self.m == 0:
            return None
        _, s = self.unpack(x)
        return InternalField(self.grid, s, mean_target=self.s0)

    def start_vector(self, deformation: Deformation, internal: InternalField | None = None):
        if not np.array_equal(deformation.y[~self.grid.free_mask], self.pinned_values):
            raise ValueError("start does not satisfy the boundary pinning")
        return self.pack(deformation, internal)

    # -- energy assembly ----------------------------------------------------

    def _gradients_full(self, x):
        """Energy, per-site gradient and per-cell internal gradient."""
        y, s = self.unpack(x)
        nc = self.grid.spec.n_corners
        Y = y[self.cell_sites]                       # (C, n_cols, d)
        F = np.swapaxes(Y, 1, 2)                     # (C, d, n_cols)
        F = F - F[:, :, :nc].mean(axis=2, keepdims=True)
        E_cells, (gF, gS) = self.model._energy_gradient(F, s)
        E = float(E_cells.sum())
        # chain through the corner-mean subtraction
        gF[:, :, :nc] -= gF.sum(axis=2, keepdims=True) / nc
        g_sites = np.zeros((self.grid.n_sites, self.d))
        flat = self.cell_sites.ravel()
        contrib = np.swapaxes(gF, 1, 2).reshape(-1, self.d)
        for axis in range(self.d):
            g_sites[:, axis] = np.bincount(
                flat, weights=contrib[:, axis], minlength=self.grid.n_sites
            )
        if not (np.isfinite(E) and np.all(np.isfinite(g_sites))):
            raise DivergedEvaluation("diverged evaluation")
        return E, g_sites, gS

    def energy_only(self, x) -> float:
        y, s = self.unpack(x)
        nc = self.grid.spec.n_corners
        Y = y[self.cell_sites]
        F = np.swapaxes(Y, 1, 2)
        F = F - F[:, :, :nc].mean(axis=2, keepdims=True)
        E = float(self.model._energy(F, s).sum())
        if not np.isfinite(E):
            raise DivergedEvaluation("diverged evaluation")
        return E

    def value_and_grad(self, x):
        E, g_sites, gS = self._gradients_full(x)
        g = np.empty(self.n_vars)
        g[: self.n_free * self.d] = g_sites[self.free_idx].ravel()
        if self.m > 0:
            if self.s0 is not None:
                g[self.n_free * self.d:] = (gS[:-1] - gS[-1][None]).ravel()
            else:
                g[self.n_free * self.d:] = gS.ravel()
        return E, g


def assemble(grid: CellGrid, model: EnergyModel, M, s0=None) -> Problem:
    """Set up the cell problem for boundary matrix M (and mean shift s0)."""
    return Problem(grid, model, M, s0=s0)


def energy_and_gradient(problem: Problem, x):
    """Total interior-cell energy and its gradient in the flat variables."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return problem.value_and_grad(x)


def site_forces(problem: Problem, x):
    """Energy and the raw per-site gradient (pinned pseudo-forces included)."""
    E, g_sites, _ = problem._gradients_full(np.asarray(x, dtype=float))
    return E, g_sites


# ---------------------------------------------------------------------------
# minimization
# ---------------------------------------------------------------------------

_ARMIJO = 1e-4
_BACKTRACK = 0.5
_MAX_BACKTRACKS = 60


def minimize(problem: Problem, opts: SolveOptions, start: Deformation,
             internal_start: InternalField | None = None,
             start_label: str = "custom") -> SolveResult:
    """Limited-memory quasi-Newton descent from one start.

    Terminates when the gradient sup-norm drops below ``opts.grad_tol`` or
    the iteration cap is hit; a stalled line search returns the best
    iterate with ``converged = False``.  The accepted energy sequence is
    nonincreasing by construction.
    """
    x = problem.start_vector(start, internal_start)
    E, g = problem.value_and_grad(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    iterations = 0
    converged = bool(np.max(np.abs(g)) <= opts.grad_tol) if g.size else True
    if g.size == 0:
        return SolveResult(E, problem.deformation(x), problem.internal_field(x),
                           0, True, 0.0, start_label)

    while not converged and iterations < opts.max_iter:
        q = -g
        alpha = []
        for s_v, y_v, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s_v @ q)
            alpha.append(a)
            q -= a * y_v
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s_v, y_v, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alpha)):
            b = rho * (y_v @ q)
            q += (a - b) * s_v
        direction = q
        slope = direction @ g
        if not np.isfinite(slope) or slope >= 0:
            direction = -g
            slope = -(g @ g)
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()

        # Evaluate the gradient together with the first (usually accepted)
        # unit-step trial; fall back to energy-only backtracking otherwise.
        t = 1.0
        ok = False
        g_new = None
        x_new = x + direction
        try:
            E_new, g_new = problem.value_and_grad(x_new)
        except DivergedEvaluation:
            E_new = np.inf
        if E_new <= E + _ARMIJO * slope:
            ok = True
        else:
            for _ in range(_MAX_BACKTRACKS):
                t *= _BACKTRACK
                x_new = x + t * direction
                try:
                    E_new = problem.energy_only(x_new)
                except DivergedEvaluation:
                    E_new = np.inf
                if E_new <= E + _ARMIJO * t * slope:
                    ok = True
                    break
            if ok:
                E_new, g_new = problem.value_and_grad(x_new)
        if not ok:
            break
        assert E_new <= E + 1e-12 * (1.0 + abs(E))
        s_v = x_new - x
        y_v = g_new - g
        sy = s_v @ y_v
        if sy > 1e-12 * np.linalg.norm(s_v) * np.linalg.norm(y_v):
            s_hist.append(s_v)
            y_hist.append(y_v)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > opts.history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, E, g = x_new, E_new, g_new
        iterations += 1
        converged = bool(np.max(np.abs(g)) <= opts.grad_tol)

    return SolveResult(
        energy=E,
        argmin=problem.deformation(x),
        internal=problem.internal_field(x),
        iterations=iterations,
        converged=converged,
        grad_norm=float(np.max(np.abs(g))),
        start_label=start_label,
    )


# ---------------------------------------------------------------------------
# warm starts
# ---------------------------------------------------------------------------


def buckling_start(grid: CellGrid, M) -> Deformation:
    """Affine field plus the 2-periodic zig-zag that relaxes compression.

    Each compressed column m of M (|m| < 1) contributes the alternating
    displacement 0.5*(-1)^z * sqrt(1/|m|^2 - 1) * (-m_2, m_1) along its
    lattice direction, which restores every bulk bond in that direction to
    unit length; pinned sites keep the affine datum.
    """
    if grid.spec.d != 2:
        raise ValueError("buckling start is 2D-only")
    M = np.asarray(M, dtype=float)
    out = affine_deformation(grid, M)
    disp = np.zeros_like(out.y)
    for col in range(2):
        m = M[:, col]
        nsq = float(m @ m)
        if nsq >= 1.0 or nsq < 1e-20:
            continue
        amp = 0.5 * np.sqrt(1.0 / nsq - 1.0)
        vec = np.array([-m[1], m[0]])
        signs = np.where(grid.site_multi[:, col] % 2 == 0, 1.0, -1.0)
        disp += amp * signs[:, None] * vec[None, :]
    out.y[grid.free_mask] += disp[grid.free_mask]
    return out


def _rng_for_start(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def _min_bond_length(problem: Problem, x) -> float:
    y, _ = problem.unpack(x)
    Y = y[problem.cell_sites]            # (C, n_cols, d)
    diffs = Y[:, :, None, :] - Y[:, None, :, :]
    L = np.linalg.norm(diffs, axis=-1)
    n = L.shape[1]
    iu = np.triu_indices(n, k=1)
    return float(L[:, iu[0], iu[1]].min())


def multi_start_minimize(problem: Problem, opts: SolveOptions) -> SolveResult:
    """Affine, buckling and randomized starts; lowest energy wins.

    Converged results are preferred; among equal energies the earliest
    start wins, which keeps the reduction deterministic under any
    execution order.
    """
    starts = []
    affine = apply_boundary(affine_deformation(problem.grid, problem.M),
                            lambda x: x @ problem.M.T)
    starts.append(("affine", affine, None))

    if problem.d == 2 and opts.use_buckling_starts:
        buck = buckling_start(problem.grid, problem.M)
        if not np.array_equal(buck.y, affine.y):
            starts.append(("buckling", buck, None))

    base_internal = None
    if problem.m > 0:
        s_base = np.tile(
            (problem.s0 if problem.s0 is not None else np.zeros((problem.d, problem.m)))[None],
            (problem.n_cells, 1, 1),
        )
        base_internal = InternalField(problem.grid, s_base, mean_target=problem.s0)
        starts = [(lbl, dfm, base_internal) for (lbl, dfm, _) in starts]

    for k in range(opts.n_random_starts):
        rng = _rng_for_start(opts.seed, k)
        dfm = affine.copy()
        noise = rng.uniform(-opts.perturb_amp, opts.perturb_amp,
                            size=(problem.n_free, problem.d))
        dfm.y[problem.free_idx] += noise
        internal = base_internal
        if problem.m > 0 and problem.s0 is None:
            s = rng.uniform(-opts.perturb_amp, opts.perturb_amp,
                            size=(problem.n_cells, problem.d, problem.m))
            internal = InternalField(problem.grid, s, mean_target=None)
        starts.append((f"random-{k}", dfm, internal))

    results = []
    failures = []
    for idx, (label, dfm, internal) in enumerate(starts):
        x0 = problem.start_vector(dfm, internal)
        if _min_bond_length(problem, x0) < 1e-8:
            rng = _rng_for_start(opts.seed, 10_000 + idx)
            dfm = dfm.copy()
            dfm.y[problem.free_idx] += rng.uniform(
                -1e-6, 1e-6, size=(problem.n_free, problem.d))
        try:
            results.append(minimize(problem, opts, dfm, internal, start_label=label))
        except DivergedEvaluation as exc:
            failures.append((label, exc))
    if not results:
        raise DivergedEvaluation(
            f"all starts failed: {', '.join(lbl for lbl, _ in failures)}")

    pool = [(r.energy, i, r) for i, r in enumerate(results) if r.converged]
    if not pool:
        pool = [(r.energy, i, r) for i, r in enumerate(results)]
    return min(pool, key=lambda t: (t[0], t[1]))[2]
