"""Batch driver: JSON run configs in, CSV tables and a JSON summary out.

Usage:
    cellhom run <config.json> [--threads N] [--out DIR]
    cellhom validate [--quick]

A config selects a lattice, a model, one task and its inputs.  Outputs are
``results.csv`` (one row per solved cell problem), ``summary.json``
(extrapolations, gaps, residuals, solver metadata, config hash) and
``plotdata/*.csv`` (f_N against 1/N per boundary matrix).  Identical
configs and seeds produce byte-identical results.csv; only the timestamp
in summary.json varies between runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import homogenize as hm
from . import models as md
from .elasticity import (cauchy_residuals, numeric_elastic_tensor,
                         pair_elastic_tensor, voigt_matrix)
from .lattice import build_grid, build_lattice
from .solver import SolveOptions

__all__ = ["RunConfig", "parse_config", "run", "main"]

ARTIFACT_VERSION = "0.1.0"

_TASKS = ("homogenize", "cb_scan", "elastic", "tiling_check", "validate")
_TOP_KEYS = {"lattice", "model", "task", "M", "s0", "schedule", "solver",
             "output", "seed"}
_LATTICE_KEYS = {"d", "A", "stencil", "m"}
_SOLVER_KEYS = {"grad_tol", "max_iter", "history", "n_random_starts",
                "perturb_amp", "seed", "use_buckling_starts"}
_MODEL_KEYS = {"name", "params"}

_DEFAULT_SCHEDULES = {2: [8, 16, 32, 64], 3: [4, 6, 8, 12]}


@dataclass
class RunConfig:
    raw: dict
    lattice: object        # LatticeSpec
    model: object          # EnergyModel
    task: str
    M_list: list
    s0_list: list | None
    schedule: list
    solver: SolveOptions
    seed: int

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _reject_unknown(block, allowed, where):
    unknown = set(block) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(block, key, where):
    if key not in block:
        raise ValueError(f"missing field '{key}' in {where}")
    return block[key]


def _build_model(name, params, spec, raw_lattice):
    params = dict(params)
    if name == "harmonic":
        return md.harmonic_spring_model(spec, params.pop("k", 1.0), params.pop("r0", 1.0))
    if name == "pair_lj":
        pot = md.lennard_jones(params.pop("epsilon", 1.0), params.pop("sigma", 1.0))
        return md.pair_potential_model(spec, pot, params.pop("cutoff", 2.5))
    if name == "pair_harmonic":
        pot = md.harmonic_pair(params.pop("k", 1.0), params.pop("r0", 1.0),
                               shell=params.pop("shell", None))
        return md.pair_potential_model(spec, pot, params.pop("cutoff", 1.0))
    if name == "quasiconvex_frobenius":
        if params:
            raise ValueError(f"unknown model params: {sorted(params)}")
        return md.quasiconvex_wrapper_model(spec, md.frobenius_squared_density())
    if name == "quadratic_form":
        Q = md.QuadraticForm.from_moduli(params.pop("mu", 1.0),
                                         params.pop("lam", 0.0), d=spec.d)
        return md.quadratic_form_model(spec, Q, kappa=params.pop("kappa", 1.0),
                                       delta=params.pop("delta", 0.5))
    if name == "multilattice_harmonic":
        r0 = params.pop("r0", float(np.linalg.norm(spec.corners[:, 0])))
        return md.multilattice_harmonic_model(spec, params.pop("k", 1.0), r0)
    raise ValueError(f"unknown model name '{name}'")


def parse_config(path) -> RunConfig:
    """Load and validate a run config; fills documented defaults."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")

    lat = _require(raw, "lattice", "config")
    _reject_unknown(lat, _LATTICE_KEYS, "lattice block")
    d = int(_require(lat, "d", "lattice block"))
    A_rows = _require(lat, "A", "lattice block")
    if len(A_rows) != d or any(len(row) != d for row in A_rows):
        raise ValueError(f"dimension mismatch: A must be {d}x{d}")
    m = int(lat.get("m", 0))
    spec = build_lattice(d, np.array(A_rows, dtype=float),
                         stencil_offsets=lat.get("stencil"), m=m)

    mdl = _require(raw, "model", "config")
    _reject_unknown(mdl, _MODEL_KEYS, "model block")
    model = _build_model(_require(mdl, "name", "model block"),
                         mdl.get("params", {}), spec, lat)

    task = _require(raw, "task", "config")
    if task not in _TASKS:
        raise ValueError(f"unknown task '{task}', expected one of {_TASKS}")

    M_list = []
    for entry in raw.get("M", []):
        flat = np.asarray(entry, dtype=float).reshape(-1)
        if flat.size != d * d:
            raise ValueError(f"dimension mismatch: M entries must have {d * d} values")
        M_list.append(flat.reshape(d, d))
    if task in ("homogenize", "cb_scan", "tiling_check") and not M_list:
        raise ValueError("missing field 'M' in config")

    s0_list = None
    if raw.get("s0") is not None:
        if model.m == 0:
            raise ValueError("internal variables undefined for Bravais model")
        s0_list = [np.asarray(v, dtype=float).reshape(d, model.m)
                   for v in raw["s0"]]
        if len(s0_list) not in (1, len(M_list)):
            raise ValueError("s0 list must have length 1 or match the M list")

    schedule = [int(N) for N in raw.get("schedule", _DEFAULT_SCHEDULES[d])]
    r = model.spec.radius
    if any(N <= 2 * r for N in schedule):
        raise ValueError(f"schedule invalid for stencil radius {r}: need N > {2 * r}")

    sol = dict(raw.get("solver", {}))
    _reject_unknown(sol, _SOLVER_KEYS, "solver block")
    seed = int(raw.get("seed", 0))
    env_seed = os.environ.get("CELLHOM_SEED")
    if env_seed is not None:
        seed = int(env_seed)
    sol.setdefault("seed", seed)
    solver = SolveOptions(**sol)

    return RunConfig(raw=raw, lattice=spec, model=model, task=task,
                     M_list=M_list, s0_list=s0_list, schedule=schedule,
                     solver=solver, seed=seed)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _fmt_matrix(M) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(M).reshape(-1))


_CSV_HEADER = "task,model,M,s0,N,f_N,energy,iters,converged,grad_norm,start_label"


def _result_rows(task, model_name, M, s0, est):
    rows = []
    for diag in est.per_N:
        rows.append(",".join([
            task, model_name, _fmt_matrix(M),
            "" if s0 is None else _fmt_matrix(s0),
            _fmt(diag["N"]), _fmt(diag["f_N"]), _fmt(diag["energy"]),
            _fmt(diag["iterations"]), _fmt(diag["converged"]),
            _fmt(diag["grad_norm"]), diag["start_label"],
        ]))
    return rows


def _est_summary(est):
    return {
        "M": np.asarray(est.M).reshape(-1).tolist(),
        "s0": None if est.s0 is None else np.asarray(est.s0).reshape(-1).tolist(),
        "schedule": list(est.schedule),
        "f_values": [float(v) for v in est.f_values],
        "w_cont": est.w_cont,
        "fit_coeff": est.fit_coeff,
        "fit_residual": est.fit_residual,
        "clipped": est.clipped,
        "warnings": list(est.warnings),
        "converged": [bool(d["converged"]) for d in est.per_N],
    }


def _write_plotdata(out_dir, tag, est):
    path = os.path.join(out_dir, "plotdata", f"{tag}.csv")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        fh.write("N,inv_N,f_N\n")
        for N, f in zip(est.schedule, est.f_values):
            fh.write(f"{N},{_fmt(1.0 / N)},{_fmt(float(f))}\n")


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def _s0_for(config, i):
    if config.s0_list is None:
        return None
    if len(config.s0_list) == 1:
        return config.s0_list[0]
    return config.s0_list[i]


def _run_homogenize(config: RunConfig, threads: int):
    def job(args):
        i, M = args
        s0 = _s0_for(config, i)
        if config.model.m > 0 and s0 is not None:
            return hm.w_cont_multilattice(config.model, M, s0, config.schedule,
                                          config.solver)
        if config.model.m > 0:
            return hm.w_cont_min_over_s(config.model, M, config.schedule,
                                        config.solver)
        return hm.w_cont_estimate(config.model, M, config.schedule, config.solver)

    with ThreadPoolExecutor(max_workers=threads) as ex:
        estimates = list(ex.map(job, enumerate(config.M_list)))

    rows, summary, warnings = [], [], []
    for i, (M, est) in enumerate(zip(config.M_list, estimates)):
        rows.extend(_result_rows("homogenize", config.model.name, M,
                                 _s0_for(config, i), est))
        summary.append(_est_summary(est))
        warnings.extend(est.warnings)
    return rows, {"estimates": summary}, warnings, estimates


def _run_cb_scan(config: RunConfig, threads: int):
    def job(M):
        return hm.cb_validity_scan(config.model, [M], config.schedule,
                                   config.solver)[0]

    with ThreadPoolExecutor(max_workers=threads) as ex:
        scan = list(ex.map(job, config.M_list))

    rows, table, warnings, estimates = [], [], [], []
    for M, entry in zip(config.M_list, scan):
        est = entry["result"]
        rows.extend(_result_rows("cb_scan", config.model.name, M, None, est))
        table.append({
            "M": np.asarray(M).reshape(-1).tolist(),
            "w_cb": entry["w_cb"],
            "w_cont": entry["w_cont"],
            "gap": entry["gap"],
            "flagged": bool(entry["flagged"]),
        })
        warnings.extend(est.warnings)
        estimates.append(est)
    return rows, {"cb_table": table}, warnings, estimates


def _run_elastic(config: RunConfig, threads: int):
    model = config.model
    W = lambda M: hm.cauchy_born_density(model, M)
    tensor = numeric_elastic_tensor(W, d=model.spec.d, h=1e-3)
    report = cauchy_residuals(tensor)
    rows = ["i,j,k,l,c_ijkl"]
    d = model.spec.d
    for i in range(d):
        for j in range(d):
            for k in range(d):
                for l in range(d):
                    rows.append(f"{i+1},{j+1},{k+1},{l+1},{_fmt(tensor.c[i, j, k, l])}")
    summary = {
        "voigt": voigt_matrix(tensor).tolist(),
        "cauchy_residuals": report.residuals,
        "max_cauchy": report.max_cauchy,
        "minor_symmetry": report.minor_symmetry,
        "major_symmetry": report.major_symmetry,
    }
    return rows, summary, [], []


def _run_tiling(config: RunConfig, threads: int):
    n = config.schedule[0]
    checks = []
    for M in config.M_list:
        for k in config.schedule[1:]:
            solved, tiled = hm.tiling_upper_bound_check(config.model, M, n, k,
                                                        config.solver)
            checks.append({
                "M": np.asarray(M).reshape(-1).tolist(),
                "n": n, "k": k,
                "f_k_solved": solved, "f_k_tiled": tiled,
                "dominated": bool(solved <= tiled + 1e-9),
            })
    rows = []
    warnings = [] if all(c["dominated"] for c in checks) else \
        ["tiling dominance violated"]
    return rows, {"tiling": checks}, warnings, []


def run(config: RunConfig, out_dir=".", threads=None) -> int:
    """Execute the configured task; write results.csv/summary.json/plotdata."""
    threads = threads or os.cpu_count() or 1
    os.makedirs(out_dir, exist_ok=True)

    if config.task == "validate":
        ok = run_validation_suite(quick=True)
        return 0 if ok else 1

    runner = {
        "homogenize": _run_homogenize,
        "cb_scan": _run_cb_scan,
        "elastic": _run_elastic,
        "tiling_check": _run_tiling,
    }[config.task]
    rows, results, warnings, estimates = runner(config, threads)

    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w") as fh:
        if config.task == "elastic":
            fh.write("\n".join(rows) + "\n")
        else:
            fh.write(_CSV_HEADER + "\n")
            if rows:
                fh.write("\n".join(rows) + "\n")

    for i, est in enumerate(estimates):
        _write_plotdata(out_dir, f"m{i}", est)

    summary = {
        "config_hash": config.config_hash,
        "task": config.task,
        "results": results,
        "warnings": warnings,
        "artifact_version": ARTIFACT_VERSION,
        "solver": {
            "grad_tol": config.solver.grad_tol,
            "max_iter": config.solver.max_iter,
            "history": config.solver.history,
            "n_random_starts": config.solver.n_random_starts,
            "perturb_amp": config.solver.perturb_amp,
            "seed": config.solver.seed,
            "use_buckling_starts": config.solver.use_buckling_starts,
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    solved_rows = [d for est in estimates for d in est.per_N]
    if solved_rows and not any(d["converged"] for d in solved_rows):
        print("error: no cell problem converged", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# built-in validation suite
# ---------------------------------------------------------------------------


def run_validation_suite(quick: bool = False) -> bool:
    """Run the invariant checks and print one PASS/FAIL line per property."""
    from .fields import affine_deformation, discrete_gradient, interpolate_cell
    from .lattice import square_lattice
    from .solver import assemble, multi_start_minimize

    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - report, don't crash
            checks.append((name, False, str(exc)))

    spec = square_lattice()
    harmonic = md.harmonic_spring_model(spec, 1.0, 1.0)
    rng = np.random.default_rng(0)

    def interior_counts():
        for N in (3, 4, 5, 7):
            grid = build_grid(spec, N)
            assert grid.n_interior == (N - 2) ** 2

    check("grid interior-cell count (N-2r)^d", interior_counts)

    def corner_order():
        grid = build_grid(spec, 5)
        from .lattice import cell_sites
        cell = int(grid.interior_cells[0])
        center = grid.cell_center(cell)
        sites = cell_sites(grid, cell)
        for j, s in enumerate(sites):
            assert np.allclose(grid.site_coords[s], center + spec.corners[:, j])

    check("corner order matches the corner matrix", corner_order)

    def v0_property():
        grid = build_grid(spec, 5)
        dfm = affine_deformation(grid, np.eye(2))
        dfm.y += rng.standard_normal(dfm.y.shape)
        for cell in grid.interior_cells[:4]:
            F = discrete_gradient(dfm, int(cell))
            assert abs(F[:, :4].sum(axis=1)).max() < 1e-12

    check("discrete gradients have zero row sums", v0_property)

    def gradient_fd():
        F = spec.corners + 0.1 * rng.standard_normal((2, 4))
        F = F - F.mean(axis=1, keepdims=True)
        g, _ = harmonic.gradient(F)
        h = 1e-6
        for i in range(2):
            for j in range(4):
                Fp, Fm = F.copy(), F.copy()
                Fp[i, j] += h
                Fm[i, j] -= h
                fd = (harmonic.energy(Fp) - harmonic.energy(Fm)) / (2 * h)
                assert abs(fd - g[i, j]) < 1e-6 * (1 + abs(fd))

    check("harmonic gradient matches finite differences", gradient_fd)

    def cb_values():
        assert abs(hm.cauchy_born_density(harmonic, np.diag([1.2, 1.0])) - 0.04) < 1e-12
        assert abs(hm.cauchy_born_density(harmonic, np.diag([0.5, 1.0])) - 0.25) < 1e-12

    check("affine density benchmark values", cb_values)

    def zero_energy_rotation():
        theta = 0.3
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        opts = SolveOptions(n_random_starts=0 if quick else 2)
        grid = build_grid(spec, 5)
        res = multi_start_minimize(assemble(grid, harmonic, R), opts)
        assert res.energy / 25.0 <= 1e-12

    check("zero energy at rotations", zero_energy_rotation)

    def affine_reproduction():
        grid = build_grid(spec, 4)
        M = np.array([[1.1, 0.2], [-0.1, 0.9]])
        dfm = affine_deformation(grid, M)
        for piece in interpolate_cell(dfm, int(grid.interior_cells[0])):
            assert np.allclose(piece.gradient, M, atol=1e-12)

    check("interpolation reproduces affine fields", affine_reproduction)

    def determinism():
        grid = build_grid(spec, 6)
        opts = SolveOptions(n_random_starts=2)
        p = assemble(grid, harmonic, np.diag([0.8, 1.0]))
        r1 = multi_start_minimize(p, opts)
        r2 = multi_start_minimize(p, opts)
        assert r1.energy == r2.energy and r1.start_label == r2.start_label

    check("deterministic multistart", determinism)

    if not quick:
        def tiling():
            solved, tiled = hm.tiling_upper_bound_check(
                harmonic, np.diag([1.2, 1.0]), 4, 8, SolveOptions(n_random_starts=2))
            assert solved <= tiled + 1e-9

        check("tiling dominance", tiling)

        def cauchy():
            v1, v2 = md.harmonic_pair(1.0, 1.0).at_rest()
            t = pair_elastic_tensor(v1, v2, spec, 1.5)
            rep = cauchy_residuals(t)
            assert rep.max_cauchy <= 1e-10 * max(1.0, np.abs(t.c).max())

        check("pair tensors satisfy the Cauchy relations", cauchy)

    ok = True
    for name, passed, msg in checks:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        if msg and not passed:
            line += f"  ({msg})"
        print(line)
        ok = ok and passed
    return ok


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cellhom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run config")
    p_run.add_argument("config", help="path to the JSON run config")
    p_run.add_argument("--threads", type=int, default=None)
    p_run.add_argument("--out", default=".")

    p_val = sub.add_parser("validate", help="run the invariant suite")
    p_val.add_argument("--quick", action="store_true")

    args = parser.parse_args(argv)
    if args.command == "run":
        config = parse_config(args.config)
        return run(config, out_dir=args.out, threads=args.threads)
    if args.command == "validate":
        return 0 if run_validation_suite(quick=args.quick) else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
