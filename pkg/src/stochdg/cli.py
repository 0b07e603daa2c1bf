"""Experiment driver: reproduce the covariance studies from config files.

Subcommands:

* ``run``      stochastic run; exports covariance matrices, identity
               products, row correlations and a summary line.
* ``verify``   dense identity suite (adjoint, symmetry, definiteness,
               factorization, steady-state round trip) with one pass/fail
               line per check.
* ``scaling``  timing study of sampler construction, draws and steps over
               a list of mesh refinements, with fitted log-log slopes.
* ``mesh gen`` / ``mesh check``  mesh generation and validation.

Exit codes: 0 success, 1 usage/config, 2 numerical-check failure, 3 IO.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .integrator import SimulationConfig, estimate_spectral_radius, run
from .matio import MatrixFormatError, read_matrix, write_matrix
from .meshes import (
    BoundaryTag,
    MeshError,
    MeshFormatError,
    QuadMesh,
    annulus_mesh,
    apply_periodic,
    cartesian_mesh,
    load_mesh,
    perturbed_cartesian_mesh,
    save_mesh,
    validate,
)
from .operators import (
    BoundaryConditionSpec,
    LdgParameters,
    Regime,
    assemble_gradient,
    build_system,
)
from .samplers import GaussianStream, build_sampler, block_factor_inverse_mass
from .statistics import (
    CovarianceAccumulator,
    RowSubsetAccumulator,
    relative_frobenius_error,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# experiment construction
# ---------------------------------------------------------------------------

def mesh_from_config(cfg: ExperimentConfig) -> QuadMesh:
    if cfg.mesh_kind == "file":
        mesh = load_mesh(cfg.mesh_path)
    elif cfg.mesh_kind == "cartesian":
        mesh = cartesian_mesh(cfg.nx, cfg.ny, cfg.domain)
    elif cfg.mesh_kind == "perturbed":
        mesh = perturbed_cartesian_mesh(cfg.nx, cfg.ny, cfg.domain,
                                        cfg.amplitude, cfg.mesh_seed)
    else:
        mesh = annulus_mesh(cfg.n_radial, cfg.n_angular, cfg.r_inner, cfg.r_outer,
                            cfg.warp_amplitude, cfg.p_geo or cfg.p)
    if cfg.periodic_axes != "none":
        mesh = apply_periodic(mesh, cfg.periodic_axes)
    if cfg.regime.dirichlet:
        mesh = mesh.with_boundary_tag(BoundaryTag.DIRICHLET)
    elif cfg.regime is Regime.NEUMANN:
        mesh = mesh.with_boundary_tag(BoundaryTag.NEUMANN)
    return mesh


def system_from_config(cfg: ExperimentConfig, mesh: QuadMesh | None = None):
    mesh = mesh if mesh is not None else mesh_from_config(cfg)
    bc = BoundaryConditionSpec(cfg.regime)
    return build_system(mesh, cfg.p, bc, LdgParameters(c11_boundary=cfg.c11))


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    meta = {"generator": f"stochdg {__version__}", "config": cfg.config_hash}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

class _SnapshotWriter:
    def __init__(self, outdir: Path, stride: int, meta: dict):
        self.outdir = outdir
        self.stride = stride
        self.meta = meta

    def observe_block(self, step_indices, states):
        sel = np.where(step_indices % self.stride == 0)[0]
        for i in sel:
            write_matrix(self.outdir / f"snapshot_{int(step_indices[i]):09d}.mat",
                         states[i][None, :], self.meta)


class _ErrorCheckpoints:
    """Relative error of the running estimate at chosen sample counts."""

    def __init__(self, acc: CovarianceAccumulator, target: np.ndarray, counts):
        self.acc = acc
        self.target = target
        self.counts = sorted(int(c) for c in counts)
        self.records: list[tuple[int, float]] = []

    def observe_block(self, step_indices, states):
        while self.counts and self.acc.count >= self.counts[0]:
            n = self.counts.pop(0)
            self.records.append(
                (n, relative_frobenius_error(self.acc.second_moment(), self.target)))


def cmd_run(cfg: ExperimentConfig, outdir: Path, threads: int | None) -> int:
    t0 = time.perf_counter()
    system = system_from_config(cfg)
    sampler = build_sampler(system, cfg.sampler, cfg.random_flux_h)
    sim = SimulationConfig(dt=cfg.dt, n_steps=cfg.n_steps,
                           burn_in_fraction=cfg.burn_in_fraction, seed=cfg.seed,
                           temporal_correction=cfg.temporal_correction,
                           chunk_steps=cfg.chunk_steps)
    meta = _meta(cfg, regime=cfg.regime.value, sampler=cfg.sampler, p=cfg.p)

    dense_ok = system.n_dof <= 4096
    observers = []
    acc = None
    if dense_ok:
        acc = CovarianceAccumulator(system.n_dof)
        observers.append(acc)
    else:
        acc = RowSubsetAccumulator(system.n_dof, cfg.row_indices)
        observers.append(acc)
    checkpoints = None
    if cfg.error_checkpoints and dense_ok:
        checkpoints = _ErrorCheckpoints(acc, system.target_covariance_dense(),
                                        cfg.error_checkpoints)
        observers.append(checkpoints)
    if cfg.snapshot_stride > 0:
        observers.append(_SnapshotWriter(outdir, cfg.snapshot_stride, meta))

    result = run(system, sampler, sim, observers)
    if result.n_samples == 0:
        print("error: no post-burn-in samples were accumulated (n_steps too small)",
              file=sys.stderr)
        return EXIT_NUMERICAL

    save_mesh(outdir / "mesh_used.mesh", system.mesh)
    mass = system.dense_mass() if dense_ok else None
    rel_err = float("nan")
    if dense_ok:
        c_emp = acc.second_moment()
        target = system.target_covariance_dense()
        rel_err = relative_frobenius_error(c_emp, target)
        write_matrix(outdir / "covariance_empirical.mat", c_emp, meta)
        write_matrix(outdir / "covariance_target.mat", target, meta)
        write_matrix(outdir / "mass_matrix.mat", mass, meta)
        prod = mass @ c_emp
        write_matrix(outdir / "mass_covariance_product.mat", prod, meta)
        for i in cfg.row_indices:
            if not (0 <= i < system.n_dof):
                print(f"error: row index {i} out of range", file=sys.stderr)
                return EXIT_USAGE
            write_matrix(outdir / f"row_correlation_{i}.mat", prod[i][None, :], meta)
    else:
        for i in cfg.row_indices:
            write_matrix(outdir / f"row_correlation_{i}.mat",
                         acc.row(i)[None, :], meta)
    if checkpoints is not None and checkpoints.records:
        write_matrix(outdir / "error_checkpoints.mat",
                     np.array(checkpoints.records, dtype=float), meta)

    elapsed = time.perf_counter() - t0
    summary = (f"regime={cfg.regime.value} sampler={cfg.sampler} "
               f"N={result.n_samples} rel_err={rel_err:.6g}")
    print(summary)
    (outdir / "summary.txt").write_text(
        summary + f"\nn_steps={result.n_steps} dt={cfg.dt} seed={cfg.seed} "
        f"n_dof={system.n_dof} elapsed_s={elapsed:.1f} "
        f"config={cfg.config_hash} version={__version__}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _restricted_roundtrip(system, sampler) -> float:
    """Steady-state round trip error on the regime's equilibrating subspace."""
    from scipy.linalg import null_space

    l = system.dense_generator()
    lam = sampler.prescribed_covariance_dense()
    w = system.dense_mass_inv()
    if system.regime.mean_zero:
        basis = null_space(system.m_one[None, :])
        lr = basis.T @ l @ basis
        gr = basis.T @ lam @ basis
        c = -0.5 * np.linalg.solve(lr, gr)
        one = np.ones(system.n_dof)
        target = basis.T @ (w - np.outer(one, one) / system.total_mass) @ basis
        return float(np.linalg.norm(c - target) / np.linalg.norm(target))
    if system.regime is Regime.DIRICHLET_WEAK:
        c = -0.5 * np.linalg.solve(l, lam)
        return float(np.linalg.norm(c - w) / np.linalg.norm(w))
    interior = np.setdiff1d(np.arange(system.n_dof), system.boundary_dofs)
    lr = l[np.ix_(interior, interior)]
    gr = lam[np.ix_(interior, interior)]
    c = -0.5 * np.linalg.solve(lr, gr)
    target = w[np.ix_(interior, interior)]
    return float(np.linalg.norm(c - target) / np.linalg.norm(target))


def cmd_verify(cfg: ExperimentConfig, outdir: Path) -> int:
    import scipy.linalg as sla

    system = system_from_config(cfg)
    if system.n_dof > 4096:
        print(f"error: dense verification capped at 4096 DOFs, mesh has {system.n_dof}",
              file=sys.stderr)
        return EXIT_USAGE
    checks: list[tuple[str, bool, str]] = []

    def check(name, ok, detail=""):
        checks.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))

    d = system.dense_divergence()
    if system.mesh.p_geo == 1:
        g = assemble_gradient(system.mesh, system.ref, system.params, system.bc).toarray()
        err = np.max(np.abs(g + d.T)) / max(np.max(np.abs(d)), 1e-300)
        check("gradient adjoint G = -D^T", err <= 1e-12, f"rel {err:.2e}")
    else:
        print("SKIP  gradient adjoint (curved mesh: gradient is defined as -D^T)")

    a = system.dense_a()
    sym = np.linalg.norm(a - a.T) / np.linalg.norm(a)
    check("A symmetric", sym <= 1e-12, f"rel {sym:.2e}")

    mass = system.dense_mass()
    eig = sla.eigh(0.5 * (a + a.T), mass, eigvals_only=True)
    scale = abs(eig[0])
    check("A negative semidefinite", eig[-1] <= 1e-10 * scale,
          f"max eig {eig[-1]:.2e}")
    n_null = int(np.sum(np.abs(eig) <= 1e-10 * scale))
    if system.regime.mean_zero:
        check("A strictly definite on mean-zero subspace", n_null == 1,
              f"null dim {n_null}")
        l1 = np.max(np.abs(system.generator @ np.ones(system.n_dof)))
        check("L annihilates constants", l1 <= 1e-10, f"max {l1:.2e}")
    elif system.regime is Regime.DIRICHLET_WEAK:
        check("A strictly negative definite", n_null == 0 and eig[-1] < 0,
              f"max eig {eig[-1]:.2e}, null dim {n_null}")
    else:
        lt = system.dense_generator()
        bd = system.boundary_dofs
        zero_rows = max(np.max(np.abs(lt[bd, :])), np.max(np.abs(lt[:, bd])))
        check("boundary rows/cols of masked generator vanish", zero_rows == 0.0,
              f"max {zero_rows:.2e}")
        interior = np.setdiff1d(np.arange(system.n_dof), bd)
        ev = np.linalg.eigvals(lt[np.ix_(interior, interior)])
        check("interior generator stable", np.max(ev.real) < 0,
              f"max Re {np.max(ev.real):.2e}")

    try:
        sampler = build_sampler(system, "fdd")
        cov = sampler.dense_covariance()
        lam = sampler.prescribed_covariance_dense()
        fac = np.linalg.norm(cov - lam) / np.linalg.norm(lam)
        check("sampler covariance R R^T = Lambda", fac <= 1e-10, f"rel {fac:.2e}")
        rt = _restricted_roundtrip(system, sampler)
        check("steady-state round trip", rt <= 1e-8, f"rel {rt:.2e}")
    except np.linalg.LinAlgError as exc:
        check("sampler factorization", False, str(exc))

    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        print(f"{len(failed)} of {len(checks)} checks failed")
        return EXIT_NUMERICAL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def _time_min(fn, repeats: int) -> float:
    """Best-of-n wall time; bumps repetitions when the timer is too coarse."""
    res = time.get_clock_info("perf_counter").resolution
    best = float("inf")
    reps = repeats
    for attempt in range(2):
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        if best >= 100 * res:
            break
        print(f"warning: timing near resolution ({best:.2e}s); increasing repetitions",
              file=sys.stderr)
        reps *= 4
    return best


def cmd_scaling(cfg: ExperimentConfig, outdir: Path) -> int:
    if len(cfg.scaling_levels) < 3:
        print("error: scaling needs at least 3 refinement levels in [scaling] levels",
              file=sys.stderr)
        return EXIT_USAGE
    rows = []
    steps = cfg.steps_per_level
    for nx, ny in cfg.scaling_levels:
        level_cfg = ExperimentConfig(**{**cfg.__dict__, "nx": nx, "ny": ny,
                                        "n_radial": nx, "n_angular": ny})
        system = system_from_config(level_cfg)
        sampler = build_sampler(system, cfg.sampler, cfg.random_flux_h)
        stream = GaussianStream(cfg.seed)
        nt = system.mesh.n_elements

        t_factor = _time_min(lambda: block_factor_inverse_mass(system.mass), cfg.repeats)
        t_draw = _time_min(lambda: sampler.draw_block(stream, 0, steps), cfg.repeats) / steps
        sim = SimulationConfig(dt=cfg.dt, n_steps=steps, burn_in_fraction=0.0,
                               seed=cfg.seed, chunk_steps=steps, check_stability=False)
        t_step = _time_min(lambda: run(system, sampler, sim), cfg.repeats) / steps
        rows.append((nt, system.n_dof, t_factor, t_draw, t_step))
        print(f"n_t={nt:7d}  n_dof={system.n_dof:8d}  factor={t_factor:.3e}s  "
              f"draw={t_draw:.3e}s/step  step={t_step:.3e}s/step")

    arr = np.array(rows, dtype=float)
    logs = np.log(arr[:, 0])
    slopes = {name: float(np.polyfit(logs, np.log(arr[:, col]), 1)[0])
              for name, col in (("factor", 2), ("draw", 3), ("step", 4))}
    for name, slope in slopes.items():
        print(f"log-log slope {name} vs n_t: {slope:.3f}")
    write_matrix(outdir / "scaling_results.mat", arr,
                 _meta(cfg, columns="n_t n_dof t_factor t_draw t_step",
                       **{f"slope_{k}": f"{v:.4f}" for k, v in slopes.items()}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# mesh tools
# ---------------------------------------------------------------------------

def cmd_mesh_gen(args) -> int:
    if args.kind == "cartesian":
        mesh = cartesian_mesh(args.nx, args.ny, (args.x0, args.x1, args.y0, args.y1))
    elif args.kind == "perturbed":
        mesh = perturbed_cartesian_mesh(args.nx, args.ny,
                                        (args.x0, args.x1, args.y0, args.y1),
                                        args.amplitude, args.mesh_seed)
    elif args.kind == "annulus":
        mesh = annulus_mesh(args.n_radial, args.n_angular, args.r_inner,
                            args.r_outer, args.warp_amplitude, args.p_geo)
    else:
        print(f"error: unknown mesh kind {args.kind!r}", file=sys.stderr)
        return EXIT_USAGE
    save_mesh(args.out, mesh)
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_elements} elements, "
          f"p_geo={mesh.p_geo}")
    return EXIT_OK


def cmd_mesh_check(args) -> int:
    mesh = load_mesh(args.path)
    validate(mesh)
    n_per = int(np.sum(mesh.interior_faces[:, 5])) if mesh.interior_faces.size else 0
    print(f"{args.path}: OK  ({mesh.n_vertices} vertices, {mesh.n_elements} elements, "
          f"{mesh.interior_faces.shape[0]} interior faces ({n_per} periodic), "
          f"{mesh.boundary_faces.shape[0]} boundary faces, p_geo={mesh.p_geo})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochdg",
                     description="Stochastic DG experiments with prescribed noise covariance")
    parser.add_argument("--version", action="version", version=f"stochdg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", "verify", "scaling"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for compiled kernels (does not affect results)")
        p.add_argument("--output-dir", default=".", help="directory for output files")

    mesh = sub.add_parser("mesh")
    msub = mesh.add_subparsers(dest="mesh_command", required=True)
    gen = msub.add_parser("gen")
    gen.add_argument("--kind", required=True, choices=("cartesian", "perturbed", "annulus"))
    gen.add_argument("--nx", type=int, default=4)
    gen.add_argument("--ny", type=int, default=4)
    gen.add_argument("--x0", type=float, default=-1.0)
    gen.add_argument("--x1", type=float, default=1.0)
    gen.add_argument("--y0", type=float, default=-1.0)
    gen.add_argument("--y1", type=float, default=1.0)
    gen.add_argument("--amplitude", type=float, default=0.22)
    gen.add_argument("--mesh-seed", dest="mesh_seed", type=int, default=0)
    gen.add_argument("--n-radial", dest="n_radial", type=int, default=2)
    gen.add_argument("--n-angular", dest="n_angular", type=int, default=8)
    gen.add_argument("--r-inner", dest="r_inner", type=float, default=0.5)
    gen.add_argument("--r-outer", dest="r_outer", type=float, default=1.5)
    gen.add_argument("--warp-amplitude", dest="warp_amplitude", type=float, default=0.0)
    gen.add_argument("--p-geo", dest="p_geo", type=int, default=1)
    gen.add_argument("--out", required=True)
    chk = msub.add_parser("check")
    chk.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "mesh":
            if args.mesh_command == "gen":
                return cmd_mesh_gen(args)
            return cmd_mesh_check(args)
        if args.threads is not None:
            try:
                import numba

                numba.set_num_threads(max(1, args.threads))
            except (ImportError, ValueError):
                pass
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        outdir = Path(args.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            return cmd_run(cfg, outdir, args.threads)
        if args.command == "verify":
            return cmd_verify(cfg, outdir)
        return cmd_scaling(cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshFormatError, MatrixFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MeshError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
