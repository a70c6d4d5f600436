"""Command line interface: ``dgeeg <command> [--config FILE] [--set k=v ...]``.

Commands: genseg, mesh, leaks, forward, reference, sweep, fluxvis, transfer.
Exit status is 0 only if every requested output was written and no dipole
failed (unless ``--allow-partial``).
"""
import argparse
import csv
import logging
import os
import sys
import time

from . import config as cfgmod

log = logging.getLogger("dgeeg")

GOLDEN_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class PartialFailure(RuntimeError):
    pass


def _table(cp, skull=None):
    from .pipeline import sphere_table

    skull = skull if skull is not None else (cfgmod.floats(cp, "model", "skull_radius") or [None])[0]
    return sphere_table(cfgmod.floats(cp, "model", "radii"),
                        cfgmod.floats(cp, "model", "conductivities"),
                        cfgmod.words(cp, "model", "names"), skull)


def _skull(cp):
    return (cfgmod.floats(cp, "model", "skull_radius") or [None])[0]


def _experiment(cp, skull=None):
    from .pipeline import SphereExperiment, model_name

    skull = _skull(cp) if skull is None else skull
    seg, h = cp.getfloat("mesh", "seg_mm"), cp.getfloat("mesh", "h_mm")
    return SphereExperiment(
        _table(cp, skull), seg, h,
        eta=cp.getfloat("scheme", "eta"),
        penalty_factor=cp.getfloat("scheme", "penalty_factor"),
        series_order=cp.getint("series", "order"),
        series_tol=cp.getfloat("series", "tolerance"),
        name=model_name(seg, h, skull),
        quadrature={k: cp.getint("quadrature", k) for k in ("cell", "face", "boundary")},
    )


def _solve_cfg(cp, tol=None):
    from .solve import SolveConfig

    pre = cp.get("solver", "preconditioner").strip() or None
    return SolveConfig(tol=cp.getfloat("solver", "tol") if tol is None else tol,
                       maxiter=cp.getint("solver", "maxiter"), preconditioner=pre)


def _dipoles(cp, sphere):
    from .evalmetrics import place_sources

    return place_sources(sphere, cfgmod.floats(cp, "sources", "eccentricities"),
                         cp.getint("sources", "count"), cp.get("sources", "orientation").strip(),
                         cp.getint("sources", "seed"), cp.getfloat("sources", "magnitude"))


def _single_dipole(cp, section="dipole"):
    from .pipeline import fixed_dipole

    return fixed_dipole(cfgmod.floats(cp, section, "position"),
                        cfgmod.floats(cp, section, "direction"),
                        cp.getfloat("sources", "magnitude"))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    log.info("wrote %s", path)


# --- commands -------------------------------------------------------------

def cmd_genseg(cp, args):
    from .voxelgeom import detect_leaks, generate_sphere_segmentation, write_seg
    from .pipeline import model_name

    import warnings

    seg = cp.getfloat("mesh", "seg_mm")
    table = _table(cp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # reported below from grid.warnings
        grid = generate_sphere_segmentation(table, seg)
    out = cfgmod.output_dir(cp) / f"{model_name(seg, seg, _skull(cp))}.seg"
    write_seg(out, grid, encoding="raw8")
    rep = detect_leaks(grid, table)
    print(f"{out}: dims {grid.dims}, {grid.count()} head voxels, {rep.leak_vertex_count} leaks")
    for w in grid.warnings:
        print(f"warning: {w}")


def _grid_and_table(cp, args):
    from .voxelgeom import generate_sphere_segmentation, read_seg

    table = _table(cp)
    if args.seg:
        return read_seg(args.seg), table
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_sphere_segmentation(table, cp.getfloat("mesh", "seg_mm")), table


def cmd_mesh(cp, args):
    from .hexmesh import build_hex_mesh, compute_skeleton, write_vtk

    grid, _ = _grid_and_table(cp, args)
    t = time.perf_counter()
    mesh = build_hex_mesh(grid, cp.getfloat("mesh", "h_mm"))
    sk = compute_skeleton(mesh)
    print(f"vertices {mesh.n_vertices} cells {mesh.n_cells} internal faces {sk.n_internal} "
          f"boundary faces {sk.n_boundary} ({time.perf_counter() - t:.2f} s)")
    if cp.getboolean("output", "vtk"):
        out = cfgmod.output_dir(cp) / "mesh.vtk"
        write_vtk(out, mesh)
        print(f"wrote {out}")


def cmd_leaks(cp, args):
    from .voxelgeom import detect_leaks

    grid, table = _grid_and_table(cp, args)
    rep = detect_leaks(grid, table)
    print(f"leak vertices: {rep.leak_vertex_count}")
    if rep.leak_vertex_count:
        out = cfgmod.output_dir(cp) / "leaks.csv"
        xyz = rep.vertex_coordinates(grid)
        _write_rows(out, ["x", "y", "z", "labels"],
                    [[*p, " ".join(map(str, lab))] for p, lab in zip(xyz.tolist(), rep.incident_labels)])


def cmd_forward(cp, args):
    import numpy as np
    from .evalmetrics import flux_field
    from .hexmesh import write_vtk

    exp = _experiment(cp)
    scheme = cp.get("scheme", "name").strip()
    d = _single_dipole(cp)
    t = time.perf_counter()
    sol = exp.forward(scheme, d, _solve_cfg(cp))
    u = exp.surface(sol)
    elapsed = time.perf_counter() - t
    ref = None
    try:
        ref = exp.reference(d)
    except Exception as exc:  # noqa: BLE001 - reference is optional output
        log.warning("no analytic reference: %s", exc)
    out = cfgmod.output_dir(cp) / f"forward-{exp.name}-{scheme}.csv"
    cols = ["x", "y", "z", "cell", "potential"] + (["reference"] if ref is not None else [])
    pts = exp.sampling.points
    rows = [[*pts[i], int(exp.sampling.cells[i]), u[i]] + ([ref[i]] if ref is not None else [])
            for i in range(len(u))]
    _write_rows(out, cols, rows)
    msg = f"{scheme} on {exp.name}: {sol.iterations} iterations, {elapsed:.1f} s, {len(u)} skin values"
    if ref is not None:
        from .evalmetrics import ln_mag, rdm

        msg += f", RDM {rdm(u, ref):.4f}, lnMAG {ln_mag(u, ref):.4f}"
    if not sol.split.valid:
        msg += " (source without homogeneous neighbourhood)"
    print(msg)
    if cp.getboolean("output", "vtk"):
        j = flux_field(sol, exclude_singular=True)
        vtk = out.with_suffix(".vtk")
        write_vtk(vtk, exp.mesh, {"j": j.j, "sigma": exp.cond.sigma.astype(np.float64)})
        print(f"wrote {vtk}")


def cmd_reference(cp, args):
    from .analytic import LayeredSphereModel, layered_sphere_reference
    from .evalmetrics import skin_sampling
    from .hexmesh import build_hex_mesh, compute_skeleton

    grid, table = _grid_and_table(cp, args)
    mesh = build_hex_mesh(grid, cp.getfloat("mesh", "h_mm"))
    samp = skin_sampling(mesh, compute_skeleton(mesh), table.skin_label)
    model = LayeredSphereModel.from_table(table, order=cp.getint("series", "order"),
                                          tolerance=cp.getfloat("series", "tolerance"))
    dipoles = _dipoles(cp, model)
    rows = []
    for i, d in enumerate(dipoles):
        u = layered_sphere_reference(model, d, samp.points)
        rows += [[i, d.eccentricity, k, *samp.points[k], u[k]] for k in range(len(u))]
    out = cfgmod.output_dir(cp) / "reference.csv"
    _write_rows(out, ["dipole_id", "eccentricity", "point", "x", "y", "z", "potential"], rows)
    print(f"{len(dipoles)} dipoles x {len(samp)} points -> {out}")


def cmd_sweep(cp, args):
    from .evalmetrics import DEFAULT_ECCENTRICITIES, write_metrics_csv
    from .pipeline import mean_by_eccentricity, run_sweep

    schemes = cfgmod.words(cp, "sweep", "schemes")
    skulls = cfgmod.floats(cp, "sweep", "skull_radii") or [_skull(cp)]
    solve_cfg = _solve_cfg(cp, tol=cp.getfloat("sweep", "tol"))
    rows, failures = [], []
    for skull in skulls:
        exp = _experiment(cp, skull)
        dipoles = _dipoles(cp, exp.sphere)
        t = time.perf_counter()
        res = run_sweep(exp, schemes, dipoles, solve_cfg, seed=cp.getint("sources", "seed"))
        rows += res.rows
        failures += [(exp.name,) + f for f in res.failures]
        print(f"{exp.name}: {len(res.rows)} rows in {time.perf_counter() - t:.1f} s")
        for s in schemes:
            means = mean_by_eccentricity(res.rows, s)
            print(f"  {s} mean RDM: " + ", ".join(f"{e:g}:{m:.4f}" for e, m in means.items()))
    eccs = cfgmod.floats(cp, "sources", "eccentricities")
    note = None
    if eccs == list(DEFAULT_ECCENTRICITIES):
        note = "eccentricities are the assumed default list " + ",".join(map(str, eccs))
    out = cfgmod.output_dir(cp) / "metrics.csv"
    write_metrics_csv(out, rows, comment=note)
    print(f"wrote {out} ({len(rows)} rows)")
    if failures:
        for f in failures:
            print("failed:", *f)
        raise PartialFailure(f"{len(failures)} dipole solves failed")


def fluxvis(exp, dipole, solve_cfg, schemes=("cg", "dg")):
    """Both schemes' cell fluxes for one dipole plus the local metrics."""
    from .evalmetrics import flux_field, local_flux_metrics

    fields = {s: flux_field(exp.forward(s, dipole, solve_cfg), exclude_singular=True) for s in schemes}
    a, b = (fields[s] for s in schemes)
    ln_loc, diff = local_flux_metrics(a, b)
    return fields, ln_loc, diff


def max_flux_cell(field, labels, among):
    """(cell, |j|) of the strongest flux among cells with the given labels."""
    import numpy as np

    mag = field.magnitude()
    mag[field.singular] = np.nan
    mag[~np.isin(labels, among)] = np.nan
    k = int(np.nanargmax(mag))
    return k, float(mag[k])


def cmd_fluxvis(cp, args):
    from .hexmesh import write_vtk

    exp = _experiment(cp)
    d = _single_dipole(cp, "fluxvis")
    schemes = cfgmod.words(cp, "fluxvis", "schemes")
    fields, ln_loc, diff = fluxvis(exp, d, _solve_cfg(cp), schemes)
    outdir = cfgmod.output_dir(cp)
    outer = [exp.table.skull_label, exp.table.skin_label]
    for s, f in fields.items():
        out = outdir / f"fluxvis-{exp.name}-{s}.vtk"
        write_vtk(out, exp.mesh, {"j": f.j, "lnMAGloc": ln_loc, "totDIFF": diff})
        k, peak = max_flux_cell(f, exp.mesh.cell_labels, outer)
        name = exp.table.by_label(int(exp.mesh.cell_labels[k])).name
        print(f"{s}: max |j| over skull+skin {peak:.4e} in cell {k} ({name}); wrote {out}")


def cmd_transfer(cp, args):
    import numpy as np
    from .evalmetrics import restriction_rows
    from .solve import compute_transfer_matrix

    exp = _experiment(cp)
    scheme = cp.get("scheme", "name").strip()
    n = cp.getint("transfer", "electrodes")
    rng = np.random.default_rng(cp.getint("transfer", "seed"))
    pick = np.sort(rng.choice(len(exp.sampling), size=min(n, len(exp.sampling)), replace=False))
    pts, cells = exp.sampling.points[pick], exp.sampling.cells[pick]
    R, _ = restriction_rows(exp.mesh, scheme, pts, cp.getint("transfer", "reference"), cells)
    t = time.perf_counter()
    T = compute_transfer_matrix(exp.system(scheme), R, _solve_cfg(cp))
    out = cfgmod.output_dir(cp) / f"transfer-{exp.name}-{scheme}.bin"
    T.save(out)
    _write_rows(out.with_suffix(".electrodes.csv"), ["x", "y", "z", "cell"],
                [[*p, int(c)] for p, c in zip(pts, cells)])
    print(f"{T.shape[0]}x{T.shape[1]} transfer matrix in {time.perf_counter() - t:.1f} s -> {out}")


COMMANDS = {
    "genseg": (cmd_genseg, "write a layered-sphere segmentation (SEGv1)"),
    "mesh": (cmd_mesh, "build the hexahedral mesh and report its size"),
    "leaks": (cmd_leaks, "count skin/CSF leak vertices"),
    "forward": (cmd_forward, "solve one dipole and write skin potentials"),
    "reference": (cmd_reference, "analytic layered-sphere skin potentials"),
    "sweep": (cmd_sweep, "RDM/lnMAG sweep over random dipoles"),
    "fluxvis": (cmd_fluxvis, "CG vs DG cell fluxes for one dipole (VTK)"),
    "transfer": (cmd_transfer, "transfer matrix for random skin electrodes"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="dgeeg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", help="INI file with a [units] section")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        s.add_argument("--golden", action="store_true",
                       help="single-threaded deterministic mode")
        s.add_argument("--allow-partial", action="store_true",
                       help="exit 0 even if some dipoles failed")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("mesh", "leaks", "reference"):
            s.add_argument("--seg", help="read this SEGv1 file instead of generating one")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.golden:
        for k in GOLDEN_ENV:
            os.environ[k] = "1"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = cfgmod.load_config(args.config, args.set)
        COMMANDS[args.command][0](cp, args)
    except PartialFailure as exc:
        print(f"dgeeg {args.command}: {exc}", file=sys.stderr)
        return 0 if args.allow_partial else 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        if args.verbose:
            raise
        print(f"dgeeg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
