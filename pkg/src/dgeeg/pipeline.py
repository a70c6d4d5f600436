"""Sphere-model experiments: mesh, operators and preconditioners built once
per model and shared by every dipole."""
from dataclasses import dataclass
import logging
import math
import time
import warnings

import numpy as np

from .analytic import Dipole, LayeredSphereModel, layered_sphere_reference
from .evalmetrics import ForwardSolution, evaluate_potential, skin_sampling, surface_errors
from .hexmesh import build_hex_mesh, compute_skeleton
from .schemes import (DEFAULT_ETA, PENALTY_DEGREE_FACTOR, ConductivityField,
                      SourceValidityWarning, assemble_operator_cg, assemble_operator_dg,
                      cg_system, dg_system, source_conductivity)
from .solve import SolveConfig, make_preconditioner, solve
from .voxelgeom import CompartmentTable, Compartment, generate_sphere_segmentation

logger = logging.getLogger(__name__)


def model_name(seg_mm, h_mm, skull=None):
    name = f"seg-{seg_mm:g}-h-{h_mm:g}"
    return name if skull is None else f"{name}-R{skull:g}"


def sphere_table(radii, conductivities, names=("brain", "csf", "skull", "skin"), skull_radius=None):
    if len(radii) != len(conductivities) or len(radii) != len(names):
        raise ValueError("need one radius and one conductivity per compartment")
    entries = tuple(Compartment(i + 1, n, float(r), float(s))
                    for i, (n, r, s) in enumerate(zip(names, radii, conductivities)))
    lower = [n.lower() for n in names]
    table = CompartmentTable(
        entries,
        skull_label=lower.index("skull") + 1 if "skull" in lower else None,
        skin_label=lower.index("skin") + 1 if "skin" in lower else len(names),
        inner_labels=tuple(i + 1 for i, n in enumerate(lower) if n in ("brain", "csf")),
    )
    if skull_radius is not None:
        table = table.with_radius("skull", skull_radius)
    return table


class SphereExperiment:
    """One voxelised layered sphere with its analytic reference."""

    def __init__(self, table, seg_mm, h_mm, eta=DEFAULT_ETA, penalty_factor=PENALTY_DEGREE_FACTOR,
                 series_order=400, series_tol=1e-8, name=None, quadrature=None):
        self.table = table
        self.name = name or model_name(seg_mm, h_mm)
        with warnings.catch_warnings():
            # thin shells are leaky by design in the reduced-skull models
            warnings.simplefilter("ignore")
            self.grid = generate_sphere_segmentation(table, seg_mm)
        self.mesh = build_hex_mesh(self.grid, h_mm)
        self.skeleton = compute_skeleton(self.mesh)
        self.cond = ConductivityField.from_table(self.mesh, table)
        self.sampling = skin_sampling(self.mesh, self.skeleton, table.skin_label)
        self.sphere = LayeredSphereModel.from_table(table, order=series_order, tolerance=series_tol)
        self.eta = eta
        self.penalty_factor = penalty_factor
        self.quadrature = dict(quadrature or {})
        self._ops = {}
        self._pre = {}

    def operator(self, scheme):
        if scheme not in self._ops:
            t = time.perf_counter()
            if scheme == "dg":
                A = assemble_operator_dg(self.mesh, self.skeleton, self.cond, self.eta,
                                         self.penalty_factor)
            elif scheme == "cg":
                A = assemble_operator_cg(self.mesh, self.cond)
            else:
                raise ValueError(f"unknown scheme {scheme!r}")
            self._ops[scheme] = A
            logger.info("%s %s operator: %.2f s", self.name, scheme, time.perf_counter() - t)
        return self._ops[scheme]

    def system(self, scheme, dipole=None, split=None):
        build = dg_system if scheme == "dg" else cg_system
        if dipole is not None and split is None:
            split = source_conductivity(self.mesh, self.cond, dipole)
        kw = {"eta": self.eta} if scheme == "dg" else {}
        return build(self.mesh, self.cond, split, dipole, self.skeleton,
                     matrix=self.operator(scheme), quadrature=self.quadrature, **kw)

    def preconditioner(self, scheme, kind):
        """Shared across dipoles; the DG AMG variant reuses the CG hierarchy."""
        key = (scheme, kind)
        if key not in self._pre:
            t = time.perf_counter()
            coarse = None
            if scheme == "dg" and kind == "amg":
                coarse = self.preconditioner("cg", "amg")
            self._pre[key] = make_preconditioner(self.system(scheme), kind, coarse=coarse)
            logger.info("%s %s/%s preconditioner: %.2f s", self.name, scheme, kind,
                        time.perf_counter() - t)
        return self._pre[key]

    def forward(self, scheme, dipole, cfg=None):
        cfg = SolveConfig() if cfg is None else cfg
        split = source_conductivity(self.mesh, self.cond, dipole)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SourceValidityWarning)
            S = self.system(scheme, dipole, split)
        kind = cfg.resolved(scheme)
        x, info = solve(S, cfg, precond=self.preconditioner(scheme, kind), return_info=True)
        return ForwardSolution(scheme, x, self.mesh, self.cond, split, dipole, self.skeleton,
                               info.iterations)

    def surface(self, sol):
        return evaluate_potential(sol, self.sampling.points, self.sampling.cells)

    def reference(self, dipole):
        return layered_sphere_reference(self.sphere, dipole, self.sampling.points)


@dataclass
class SweepResult:
    rows: list
    failures: list


def run_sweep(experiment, schemes, dipoles, cfg, seed=0, progress=None):
    """RDM / lnMAG of every (scheme, dipole) pair against the series reference.

    Failures are recorded as NaN rows and collected, the sweep goes on.
    """
    rows, failures = [], []
    for i, d in enumerate(dipoles):
        try:
            ref = experiment.reference(d)
        except Exception as exc:  # noqa: BLE001 - recorded per dipole
            ref = None
            failures.append((i, "reference", repr(exc)))
        for scheme in schemes:
            row = dict(scheme=scheme, model=experiment.name, seed=seed,
                       eccentricity=d.eccentricity, dipole_id=i, orientation=d.orientation,
                       rdm=math.nan, lnmag=math.nan, excluded_flag=0)
            try:
                sol = experiment.forward(scheme, d, cfg)
                row["excluded_flag"] = int(not sol.split.valid)
                if ref is not None:
                    row["rdm"], row["lnmag"] = surface_errors(experiment.surface(sol), ref)
            except Exception as exc:  # noqa: BLE001
                failures.append((i, scheme, repr(exc)))
                logger.warning("dipole %d (%s) failed: %s", i, scheme, exc)
            rows.append(row)
            if progress:
                progress(row)
    return SweepResult(rows, failures)


def mean_by_eccentricity(rows, scheme, model=None, include_excluded=True):
    out = {}
    for r in rows:
        if r["scheme"] != scheme or (model is not None and r["model"] != model):
            continue
        if not include_excluded and r["excluded_flag"]:
            continue
        out.setdefault(float(r["eccentricity"]), []).append(r["rdm"])
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}


def fixed_dipole(position, direction, magnitude=1.0):
    p = np.asarray(position, dtype=float)
    m = np.asarray(direction, dtype=float)
    return Dipole(p, magnitude * m / np.linalg.norm(m))
