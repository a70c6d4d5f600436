"""Post-processing of forward solutions: potential reconstruction
u_h = u_corr + u_inf, surface sampling, RDM / lnMAG, cell fluxes, the
DG conservation audit and sphere source placement."""
from dataclasses import dataclass
import csv
import math

import numpy as np
import scipy.sparse as sp

from . import femcore
from .analytic import Dipole, SingularPointError, grad_u_inf, u_inf
from .hexmesh import face_centroids
from .schemes import (BOUNDARY_FACE_DEGREE, RHS_FACE_DEGREE, boundary_source_flux,
                      face_source_flux)

METRIC_COLUMNS = ("scheme", "model", "seed", "eccentricity", "dipole_id",
                  "orientation", "rdm", "lnmag", "excluded_flag")

# assumed eccentricities (the first six, up to 0.9, are not given in the source text)
DEFAULT_ECCENTRICITIES = (0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.964, 0.979, 0.987, 0.991)
BRAIN_RADIUS_MM = 78.0


@dataclass
class ForwardSolution:
    scheme: str  # "cg" | "dg"
    coefficients: np.ndarray
    mesh: object
    cond: object
    split: object
    dipole: Dipole
    skeleton: object = None
    iterations: int = 0

    def __post_init__(self):
        if self.scheme not in ("cg", "dg"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        n = 8 * self.mesh.n_cells if self.scheme == "dg" else self.mesh.n_vertices
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (n,):
            raise ValueError(f"{self.scheme} solution needs {n} coefficients, "
                             f"got {self.coefficients.shape}")

    @property
    def sigma_inf(self):
        return self.split.sigma_inf

    def _cell_coefficients(self, cells):
        if self.scheme == "dg":
            return self.coefficients.reshape(-1, 8)[cells]
        return self.coefficients[self.mesh.cells[cells]]

    def _basis(self):
        return femcore.dg_basis() if self.scheme == "dg" else femcore.cg_basis()

    def correction(self, points, cells=None):
        """u_corr at ``points`` (cells located if not given)."""
        pts, cells = _locate(self.mesh, points, cells)
        vals, _ = self._basis().evaluate(self.mesh.reference_coordinates(pts, cells))
        return np.einsum("ni,ni->n", vals, self._cell_coefficients(cells))

    def correction_gradient(self, points, cells=None):
        pts, cells = _locate(self.mesh, points, cells)
        _, g = self._basis().evaluate(self.mesh.reference_coordinates(pts, cells))
        return np.einsum("nik,ni->nk", g, self._cell_coefficients(cells)) / self.mesh.h


def _locate(mesh, points, cells):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cells is None:
        cells = mesh.locate(pts)
    cells = np.asarray(cells, dtype=np.int64)
    if np.any(cells < 0):
        bad = pts[np.flatnonzero(cells < 0)[0]]
        raise ValueError(f"point {bad.tolist()} lies in no mesh cell")
    return pts, cells


def evaluate_potential(sol, points, cells=None, center=True):
    """u_corr + u_inf at ``points``; mean-centred over the point set."""
    pts, cells = _locate(sol.mesh, points, cells)
    u = sol.correction(pts, cells) + u_inf(sol.dipole, sol.sigma_inf, pts)
    return u - u.mean() if center else u


@dataclass
class SurfaceSampling:
    points: np.ndarray  # (n, 3) mm
    cells: np.ndarray
    faces: np.ndarray  # boundary face ids

    def __len__(self):
        return len(self.points)


def skin_sampling(mesh, skeleton, skin_label):
    """Centroids of the boundary faces of skin cells."""
    faces = np.flatnonzero(mesh.cell_labels[skeleton.boundary_cell] == skin_label)
    if not len(faces):
        raise ValueError(f"no boundary face belongs to label {skin_label}")
    cells = skeleton.boundary_cell[faces]
    pts = face_centroids(mesh, cells, skeleton.boundary_local[faces])
    return SurfaceSampling(pts, cells, faces)


# --- metrics ---------------------------------------------------------------

def _pair(u_h, u):
    u_h = np.asarray(u_h, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if u_h.shape != u.shape:
        raise ValueError(f"length mismatch {u_h.shape} vs {u.shape}")
    nh, n = np.linalg.norm(u_h), np.linalg.norm(u)
    if nh == 0 or n == 0:
        raise ValueError("metric undefined for a zero vector")
    return u_h, u, nh, n


def rdm(u_h, u):
    """|| u_h/|u_h| - u/|u| ||, in [0, 2]."""
    u_h, u, nh, n = _pair(u_h, u)
    return float(np.linalg.norm(u_h / nh - u / n))


def ln_mag(u_h, u):
    """ln(|u_h| / |u|)."""
    _, _, nh, n = _pair(u_h, u)
    return float(math.log(nh / n))


def surface_errors(u_h, u, rtol=1e-10):
    """(rdm, lnmag) of two gauge-fixed topographies; both must be mean-free."""
    for name, v in (("numerical", u_h), ("reference", u)):
        v = np.asarray(v, dtype=float)
        if abs(v.mean()) > rtol * max(np.abs(v).max(), np.finfo(float).tiny):
            raise ValueError(f"{name} potentials are not mean-centred")
    return rdm(u_h, u), ln_mag(u_h, u)


# --- fluxes ------------------------------------------------------------------

@dataclass
class FluxField:
    j: np.ndarray  # (n_cells, 3)
    singular: np.ndarray  # cells whose centroid is the dipole position

    def magnitude(self):
        return np.linalg.norm(self.j, axis=1)


def flux_field(sol, exclude_singular=False):
    """j(x_E) = sigma_E (grad u_corr + grad u_inf) at the cell centroids.

    A dipole exactly at a centroid makes grad u_inf undefined there; with
    ``exclude_singular`` that cell keeps only sigma grad u_corr and is
    listed in ``singular``, otherwise the evaluation fails.
    """
    mesh = sol.mesh
    xc = mesh.centroids()
    cells = np.arange(mesh.n_cells)
    g = sol.correction_gradient(xc, cells)
    hit = np.flatnonzero(np.all(xc == sol.dipole.position, axis=1))
    if len(hit) and not exclude_singular:
        raise SingularPointError(f"dipole sits at the centroid of cell {int(hit[0])}")
    keep = np.ones(mesh.n_cells, dtype=bool)
    keep[hit] = False
    g[keep] += grad_u_inf(sol.dipole, sol.sigma_inf, xc[keep])
    return FluxField(sol.cond.sigma[:, None] * g, hit)


def local_flux_metrics(j_cg, j_dg):
    """Per cell lnMAGloc = ln(|j_cg| / |j_dg|) and totDIFF = j_cg - j_dg.

    lnMAGloc is NaN where either magnitude vanishes or a field is excluded.
    """
    a = j_cg.j if isinstance(j_cg, FluxField) else np.asarray(j_cg)
    b = j_dg.j if isinstance(j_dg, FluxField) else np.asarray(j_dg)
    if a.shape != b.shape:
        raise ValueError("flux fields live on different meshes")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    ln_loc = np.full(len(a), np.nan)
    ln_loc[ok] = np.log(na[ok] / nb[ok])
    for f in (j_cg, j_dg):
        if isinstance(f, FluxField):
            ln_loc[f.singular] = np.nan
    return ln_loc, a - b


# --- conservation ------------------------------------------------------------

@dataclass
class ConservationReport:
    residual: np.ndarray  # per cell |sum of outward face fluxes - source|
    face_flux: np.ndarray  # per internal face, discrete flux minus source, e to f
    boundary_flux: np.ndarray  # per boundary face
    cell_flux: np.ndarray  # per cell, sum of |face flux| over its faces

    def relative(self):
        return float(self.residual.max() / self.cell_flux.max())


def check_conservation(sol, operator, quadrature=None):
    """Per-cell balance of the DG correction flux.

    For every cell K the outward discrete flux of u_corr,
    int (-<s grad u_corr> + eta s_hat/h [u_corr]) . n, summed over the
    faces of K has to equal the source flux of the correction problem
    (sigma_corr grad u_inf across internal faces, sigma_inf d_n u_inf on
    the boundary). The volume source integrates to zero against the
    constant test function. ``quadrature`` must match the degrees the
    right-hand side was assembled with.
    """
    if sol.scheme != "dg":
        raise NotImplementedError("the cellwise conservation audit needs a DG solution "
                                  "(CG only conserves globally)")
    mesh = sol.mesh
    sk = operator.skeleton if sol.skeleton is None else sol.skeleton
    n = mesh.n_cells
    face = operator.face_flux(sol.coefficients)
    q = dict(quadrature or {})
    face -= face_source_flux(mesh, sk, sol.cond, sol.split, sol.dipole,
                             q.get("face", RHS_FACE_DEGREE))
    bnd = -boundary_source_flux(mesh, sk, sol.dipole, q.get("boundary", BOUNDARY_FACE_DEGREE))
    net = (np.bincount(sk.e, weights=face, minlength=n)
           - np.bincount(sk.f, weights=face, minlength=n)
           + np.bincount(sk.boundary_cell, weights=bnd, minlength=n))
    mag = (np.bincount(sk.e, weights=np.abs(face), minlength=n)
           + np.bincount(sk.f, weights=np.abs(face), minlength=n)
           + np.bincount(sk.boundary_cell, weights=np.abs(bnd), minlength=n))
    return ConservationReport(np.abs(net), face, bnd, mag)


# --- sources -------------------------------------------------------------------

def place_sources(model, eccentricities, count, orientation="radial", seed=0, magnitude=1.0):
    """``count`` dipoles per eccentricity at radius e * (innermost radius),
    position directions uniform on the sphere.

    Radial moments point along the position; tangential ones are uniform in
    the tangent plane. At e = 0 the radial direction is +z.
    """
    if orientation not in ("radial", "tangential"):
        raise ValueError(f"orientation must be radial or tangential, got {orientation!r}")
    radius = float(model.radii[0]) if hasattr(model, "radii") else float(model)
    ecc = np.asarray(eccentricities, dtype=float)
    if np.any(ecc < 0) or np.any(ecc >= 1):
        raise ValueError("eccentricities must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    out = []
    for e in ecc:
        for _ in range(int(count)):
            v = rng.standard_normal(3)
            t = rng.standard_normal(3)
            d = v / np.linalg.norm(v) if e > 0 else np.array([0.0, 0.0, 1.0])
            if orientation == "radial":
                m = d
            else:
                t -= (t @ d) * d
                m = t / np.linalg.norm(t)
            out.append(Dipole(e * radius * d, magnitude * m, orientation, float(e)))
    return out


# --- sensors -------------------------------------------------------------------

def evaluation_matrix(mesh, scheme, points, cells=None):
    """Sparse rows evaluating u_corr at ``points`` from the coefficients."""
    pts, cells = _locate(mesh, points, cells)
    ref = mesh.reference_coordinates(pts, cells)
    if scheme == "dg":
        vals, _ = femcore.dg_basis().evaluate(ref)
        cols = 8 * cells[:, None] + np.arange(8)[None, :]
        n = 8 * mesh.n_cells
    else:
        vals, _ = femcore.cg_basis().evaluate(ref)
        cols = mesh.cells[cells]
        n = mesh.n_vertices
    rows = np.repeat(np.arange(len(pts)), 8)
    return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(pts), n))


def restriction_rows(mesh, scheme, points, reference=0, cells=None):
    """Point evaluation at every electrode minus evaluation at electrode
    ``reference``; the reference itself is dropped."""
    E = evaluation_matrix(mesh, scheme, points, cells)
    keep = np.setdiff1d(np.arange(E.shape[0]), [reference])
    R = E[keep] - E[np.full(len(keep), reference)]
    return sp.csr_matrix(R), keep


def electrode_values(T, rhs, dipole, sigma_inf, points, reference=0):
    """Referenced sensor values T b + u_inf(x_i) - u_inf(x_ref)."""
    keep = np.setdiff1d(np.arange(len(points)), [reference])
    ui = u_inf(dipole, sigma_inf, np.asarray(points, dtype=float))
    return T.apply(rhs) + ui[keep] - ui[reference]


def write_metrics_csv(path, rows, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_metrics_csv(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for k in ("rdm", "lnmag", "eccentricity"):
            r[k] = float(r[k]) if r[k] not in ("", "nan") else math.nan
        r["dipole_id"] = int(r["dipole_id"])
        r["excluded_flag"] = int(r["excluded_flag"])
    return rows
