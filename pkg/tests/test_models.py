import numpy as np
import pytest

from cellhom import (QuadraticForm, build_grid, build_lattice, constant_density,
                     eval_cell_energy, frobenius_squared_density, grad_cell_energy,
                     harmonic_pair, harmonic_spring_model, kuhn_decomposition,
                     lennard_jones, multilattice_harmonic_model,
                     pair_potential_model, quadratic_form_model,
                     quasiconvex_wrapper_model, square_lattice)
from cellhom.models import SimplicialDecomposition, check_quadratic_form

from conftest import fd_gradient, random_rotation, rotation


def centered(F):
    F = np.asarray(F, dtype=float)
    return F - F[:, :4].mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# harmonic springs
# ---------------------------------------------------------------------------


def test_harmonic_rest_state(harmonic, square_spec):
    assert harmonic.energy(square_spec.corners) == 0.0


def test_harmonic_tension_value(harmonic, square_spec):
    F = np.diag([1.2, 1.0]) @ square_spec.corners
    # two stretched x-edges at 0.5*(0.2)^2 each; also the target density
    # (max(0, 1.2-1))^2 = 0.04 of the benchmark
    assert harmonic.energy(F) == pytest.approx(0.04, abs=1e-14)


def test_harmonic_compression_value(harmonic, square_spec):
    F = np.diag([0.5, 1.0]) @ square_spec.corners
    assert harmonic.energy(F) == pytest.approx(0.25, abs=1e-14)


def test_harmonic_requires_square_lattice():
    spec = build_lattice(2, 2 * np.eye(2))
    with pytest.raises(ValueError):
        harmonic_spring_model(spec, 1.0, 1.0)


# ---------------------------------------------------------------------------
# pair potentials
# ---------------------------------------------------------------------------


def brute_force_pair_energy(model, grid, y):
    """Independent bond enumeration: every unordered site pair within the
    cutoff, weighted by (interior cells covering it) / (bulk cells covering
    it), both counted by explicit loops."""
    spec = model.spec
    coords = grid.site_coords
    cutoff = model.cutoff
    cell_cover = {}
    for c, sites in enumerate(grid.interior_cell_sites):
        for a in sites:
            for b in sites:
                if a < b:
                    cell_cover.setdefault((a, b), 0)
                    cell_cover[(a, b)] += 1
    offs = [tuple(o) for o in spec.offsets_int]
    offset_set = set(offs)

    def bulk_count(delta):
        # cells of the infinite lattice containing a bond of this integer
        # separation: one per stencil pair (o, o + delta)
        cnt = 0
        for o in offs:
            if tuple(np.asarray(o) + np.asarray(delta)) in offset_set:
                cnt += 1
        return cnt

    total = 0.0
    for (a, b), covered in cell_cover.items():
        r = np.linalg.norm(coords[a] - coords[b])
        if r > cutoff + 1e-12:
            continue
        delta = tuple(grid.site_multi[b] - grid.site_multi[a])
        nb = bulk_count(delta)
        length = np.linalg.norm(y[a] - y[b])
        total += covered / nb * float(model.potential.value(r, length))
    return total


def test_pair_zero_potential(square_spec):
    zero = harmonic_pair(k=0.0, r0=1.0)
    model = pair_potential_model(square_spec, zero, cutoff=1.5)
    rng = np.random.default_rng(0)
    F = centered(np.zeros((2, model.spec.n_cols)) + rng.standard_normal((2, model.spec.n_cols)))
    F = F - F[:, : 4].mean(axis=1, keepdims=True)
    assert model.energy_many(F[None])[0] == 0.0


def test_pair_matches_harmonic_springs(square_spec, harmonic):
    pot = harmonic_pair(k=2.0, r0=1.0, shell=1.0)  # (rho-1)^2 on shell 1
    model = pair_potential_model(square_spec, pot, cutoff=1.0)
    assert model.spec.n_cols == 4
    rng = np.random.default_rng(1)
    for _ in range(10):
        F = centered(square_spec.corners + 0.3 * rng.standard_normal((2, 4)))
        assert model.energy(F) == pytest.approx(harmonic.energy(F), abs=1e-13)


def test_pair_brute_force_oracle(square_spec):
    pot = lennard_jones(epsilon=1.0, sigma=2 ** (-1 / 6))  # minimum at r = 1
    model = pair_potential_model(square_spec, pot, cutoff=1.9)
    grid = build_grid(model.spec, 7)
    rng = np.random.default_rng(5)
    y = grid.site_coords + 0.05 * rng.standard_normal(grid.site_coords.shape)

    nc = model.spec.n_corners
    Y = y[grid.interior_cell_sites]
    F = np.swapaxes(Y, 1, 2)
    F = F - F[:, :, :nc].mean(axis=2, keepdims=True)
    total = float(model.energy_many(F).sum())
    oracle = brute_force_pair_energy(model, grid, y)
    assert total == pytest.approx(oracle, rel=1e-12)


def test_pair_affine_matches_shell_sum(square_spec):
    # affine bulk energy per cell equals half the ordered-pair lattice sum
    pot = lennard_jones(1.0, 2 ** (-1 / 6))
    cutoff = 2.2
    model = pair_potential_model(square_spec, pot, cutoff)
    M = np.array([[1.03, 0.05], [0.0, 0.98]])
    cell_energy = model.energy(M @ model.spec.stencil)
    shell = 0.0
    for i in range(-4, 5):
        for j in range(-4, 5):
            v = np.array([float(i), float(j)])
            r = np.linalg.norm(v)
            if 0 < r <= cutoff + 1e-12:
                shell += float(pot.value(r, np.linalg.norm(M @ v)))
    assert cell_energy == pytest.approx(0.5 * shell, rel=1e-12)


def test_pair_cutoff_too_small(square_spec):
    with pytest.raises(ValueError, match="empty stencil"):
        pair_potential_model(square_spec, lennard_jones(), cutoff=0.5)


# ---------------------------------------------------------------------------
# quasiconvex wrapper
# ---------------------------------------------------------------------------


def test_wrapper_affine_value(square_spec):
    model = quasiconvex_wrapper_model(square_spec, frobenius_squared_density())
    M = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert model.energy(M @ square_spec.corners) == pytest.approx(5.0, abs=1e-13)


def test_wrapper_constant_density(square_spec, rng):
    model = quasiconvex_wrapper_model(square_spec, constant_density(7.0))
    F = centered(square_spec.corners + rng.standard_normal((2, 4)))
    assert model.energy(F) == pytest.approx(7.0 * square_spec.det_abs, abs=1e-14)


def test_wrapper_corner_bump_brute_force(square_spec):
    model = quasiconvex_wrapper_model(square_spec, frobenius_squared_density())
    decomp = model.decomp
    F = square_spec.corners.copy()
    F[:, 0] += np.array([-0.3, 0.0])   # push the lowest corner outward
    F = centered(F)
    # direct per-simplex evaluation
    expected = 0.0
    for verts, ids, vol in zip(decomp.simplices, decomp.corner_ids, decomp.volumes):
        verts = np.asarray(verts)
        vals = F[:, ids].T
        G = (vals[1:] - vals[0]).T @ np.linalg.inv((verts[1:] - verts[0]).T)
        expected += vol * np.sum(G**2)
    got = model.energy(F)
    assert got == pytest.approx(expected, rel=1e-13)
    baseline = model.energy(centered(square_spec.corners))
    assert got > baseline + 0.01


def test_kuhn_decomposition_valid(square_spec):
    decomp = kuhn_decomposition(square_spec)
    assert len(decomp.simplices) == 2
    assert decomp.volumes.sum() == pytest.approx(square_spec.det_abs, abs=1e-12)


def test_bad_decomposition_rejected(square_spec):
    decomp = kuhn_decomposition(square_spec)
    broken = SimplicialDecomposition(d=2, simplices=[decomp.simplices[0]])
    with pytest.raises(ValueError, match="bad decomposition"):
        quasiconvex_wrapper_model(square_spec, frobenius_squared_density(), broken)


# ---------------------------------------------------------------------------
# quadratic-form model
# ---------------------------------------------------------------------------


def test_quadratic_zero_at_rotations(square_spec, rng):
    model = quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5))
    for _ in range(50):
        R = random_rotation(rng)
        c = rng.standard_normal((2, 1))
        F = R @ square_spec.corners + c
        assert abs(model.energy(F)) < 1e-12


def test_quadratic_positive_off_zero_set(square_spec, rng):
    model = quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5))
    for _ in range(50):
        R = random_rotation(rng)
        pert = rng.standard_normal((2, 4))
        pert -= pert.mean(axis=1, keepdims=True)
        pert *= (0.05 + 0.3 * rng.random()) / np.linalg.norm(pert)
        F = centered(R @ square_spec.corners + pert)
        assert model.energy(F) > 0.0


def test_quadratic_translation_invariance(square_spec, rng):
    model = quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5))
    F = centered(square_spec.corners + 0.2 * rng.standard_normal((2, 4)))
    c = rng.standard_normal((2, 1))
    e = model.energy(F)
    assert abs(model.energy(F + c) - e) <= 1e-13 * (1 + abs(e))


def test_quadratic_small_strain_expansion(square_spec):
    Q = QuadraticForm.from_moduli(1.0, 0.5)
    model = quadratic_form_model(square_spec, Q)
    E = np.array([[0.3, 0.1], [0.1, -0.2]])
    for t in (1e-2, 1e-3):
        val = model.energy((np.eye(2) + t * E) @ square_spec.corners)
        target = square_spec.det_abs * Q.value(t * E)
        assert abs(val - target) <= 5.0 * t**3


def test_quadratic_reflection_penalized(square_spec):
    model = quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5))
    refl = np.diag([1.0, -1.0])
    assert model.energy(refl @ square_spec.corners) > 0.5


def test_inadmissible_q_rejected(square_spec):
    n = 4
    H = -np.eye(n)
    with pytest.raises(ValueError, match="inadmissible Q"):
        quadratic_form_model(square_spec, QuadraticForm(d=2, H=H))
    # vanishing on symmetric part too -> not definite on symmetric
    with pytest.raises(ValueError, match="inadmissible Q"):
        quadratic_form_model(square_spec, QuadraticForm(d=2, H=np.zeros((4, 4))))


def test_check_quadratic_form_accepts_moduli():
    check_quadratic_form(QuadraticForm.from_moduli(2.0, 1.0))


# ---------------------------------------------------------------------------
# multilattice harmonic
# ---------------------------------------------------------------------------


def test_multilattice_rest_state(multilattice):
    Z = multilattice.spec.corners
    assert multilattice.energy(Z, np.zeros((2, 1))) == 0.0


def test_multilattice_shifted_internal(multilattice):
    Z = multilattice.spec.corners
    s = np.array([[0.1], [0.0]])
    # direct evaluation of the four center-corner springs
    expected = 0.0
    for j in range(4):
        expected += 0.5 * (np.linalg.norm(Z[:, j] - s[:, 0]) - np.sqrt(0.5)) ** 2
    got = multilattice.energy(Z, s)
    assert got == pytest.approx(expected, abs=1e-14)
    assert got > 0.0


def test_multilattice_grid_argmin_symmetry(multilattice):
    F = np.diag([1.1, 1.0]) @ multilattice.spec.corners
    grid_vals = np.linspace(-0.2, 0.2, 41)
    best, best_s = np.inf, None
    for sx in grid_vals:
        for sy in grid_vals:
            e = multilattice.energy(F, np.array([[sx], [sy]]))
            if e < best:
                best, best_s = e, (sx, sy)
    assert best_s[1] == pytest.approx(0.0, abs=1e-12)


def test_multilattice_needs_internal_spec(square_spec):
    with pytest.raises(ValueError, match="unsupported internal count"):
        multilattice_harmonic_model(square_spec, 1.0, np.sqrt(0.5))


# ---------------------------------------------------------------------------
# gated operations
# ---------------------------------------------------------------------------


def test_eval_rejects_row_sum_violation(harmonic, square_spec):
    F = square_spec.corners.copy()
    F[:, 2] += 0.5   # one column shifted in all entries
    with pytest.raises(ValueError, match="not a discrete gradient"):
        eval_cell_energy(harmonic, F)


def test_eval_rejects_non_finite(harmonic, square_spec):
    F = square_spec.corners.copy()
    F[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite input"):
        eval_cell_energy(harmonic, F)


def test_eval_frame_indifference_gate(harmonic, square_spec, rng):
    R = random_rotation(rng)
    assert eval_cell_energy(harmonic, R @ square_spec.corners) == pytest.approx(
        eval_cell_energy(harmonic, square_spec.corners), abs=1e-14)


def test_grad_zero_at_rest(harmonic, square_spec):
    gF, gS = grad_cell_energy(harmonic, square_spec.corners)
    assert np.all(gF == 0.0)
    assert gS is None


def test_grad_zero_on_rotation_manifold(square_spec, rng):
    model = quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5))
    R = random_rotation(rng)
    gF, _ = grad_cell_energy(model, R @ square_spec.corners)
    assert np.max(np.abs(gF)) < 1e-12


def all_models(square_spec, multilattice):
    lj = pair_potential_model(square_spec, lennard_jones(1.0, 2 ** (-1 / 6)), 1.8)
    return [
        ("harmonic", harmonic_spring_model(square_spec, 1.0, 1.0), 0),
        ("pair-lj", lj, 0),
        ("quasiconvex", quasiconvex_wrapper_model(square_spec, frobenius_squared_density()), 0),
        ("quadratic", quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5)), 0),
        ("multilattice", multilattice, 1),
    ]


def test_gradients_match_finite_differences(square_spec, multilattice, rng):
    for name, model, m in all_models(square_spec, multilattice):
        worst = 0.0
        for _ in range(20):
            F = model.spec.stencil + 0.2 * rng.standard_normal((2, model.spec.n_cols))
            F = F - F[:, :4].mean(axis=1, keepdims=True)
            s = 0.2 * rng.standard_normal((2, 1)) if m else None
            gF, gS = model.gradient(F, s)
            fF, fS = fd_gradient(model.energy, F, s)
            worst = max(worst, np.abs(gF - fF).max() / max(1.0, np.abs(fF).max()))
            if m:
                worst = max(worst, np.abs(gS - fS).max() / max(1.0, np.abs(fS).max()))
        assert worst <= 1e-6, f"{name}: rel err {worst}"


def test_translation_invariance_machine_precision(square_spec, multilattice, rng):
    # adding c to every column (the corner block and any stencil columns
    # together) changes the energy only by rounding of the shifted inputs
    for name, model, m in all_models(square_spec, multilattice):
        F = model.spec.stencil + 0.3 * rng.standard_normal((2, model.spec.n_cols))
        F = F - F[:, :4].mean(axis=1, keepdims=True)
        s = 0.1 * rng.standard_normal((2, 1)) if m else None
        c = rng.standard_normal((2, 1))
        e = model.energy(F, s)
        assert abs(model.energy(F + c, s) - e) <= 1e-13 * (1 + abs(e)), name


def test_frame_indifference_invariant(square_spec, multilattice, rng):
    for name, model, m in all_models(square_spec, multilattice):
        if not model.frame_indifferent:
            continue
        F = model.spec.stencil + 0.2 * rng.standard_normal((2, model.spec.n_cols))
        F = F - F[:, :4].mean(axis=1, keepdims=True)
        s = 0.1 * rng.standard_normal((2, 1)) if m else None
        base = model.energy(F, s)
        for _ in range(100):
            R = random_rotation(rng)
            rs = R @ s if m else None
            assert abs(model.energy(R @ F, rs) - base) <= 1e-10 * (1 + abs(base)), name


def test_zero_set_characterization(square_spec, rng):
    models = [
        harmonic_spring_model(square_spec, 1.0, 1.0),
        quadratic_form_model(square_spec, QuadraticForm.from_moduli(1.0, 0.5)),
    ]
    Z = square_spec.corners
    for model in models:
        for _ in range(50):
            R = random_rotation(rng)
            c = rng.standard_normal((2, 1))
            assert abs(model.energy(R @ Z + c)) < 1e-12
        for _ in range(50):
            pert = rng.standard_normal((2, 4))
            pert -= pert.mean(axis=1, keepdims=True)
            pert *= (0.05 + rng.random()) / np.linalg.norm(pert)
            assert model.energy(centered(Z + pert)) > 0.0


def test_growth_sandwich(square_spec, multilattice, rng):
    for name, model, m in all_models(square_spec, multilattice):
        if model.growth is None:
            continue
        c, cp, cpp = model.growth
        n = 10_000
        F = 3.0 * rng.standard_normal((n, 2, model.spec.n_cols))
        F -= F[:, :, :4].mean(axis=2, keepdims=True)
        S = 3.0 * rng.standard_normal((n, 2, 1)) if m else None
        E = model.energy_many(F, S)
        nF2 = np.sum(F**2, axis=(1, 2))
        nS2 = np.sum(S**2, axis=(1, 2)) if m else 0.0
        assert np.all(E >= c * nF2 - cp - 1e-9), name
        assert np.all(E <= cpp * (nF2 + nS2 + 1) + 1e-9), name
        if model.nonnegative:
            assert np.all(E >= 0.0), name
