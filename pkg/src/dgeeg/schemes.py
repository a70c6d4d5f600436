"""Assembly of the CG and symmetric weighted interior penalty (SWIP) DG
subtraction systems on structured hexahedral meshes.

DG degrees of freedom are laid out cell by cell, 8 per cell, in the order
of :func:`dgeeg.femcore.orthonormalize_broken_basis`; CG degrees of
freedom are the mesh vertices.
"""
from dataclasses import dataclass, field
import logging
import warnings

import numpy as np
import scipy.sparse as sp

from . import femcore
from ._kernels import (dipole_cell_moments, dipole_normal_field, embed_adjoint, embed_apply,
                       face_apply_modal)
from .analytic import SingularPointError
from .hexmesh import compute_skeleton

logger = logging.getLogger(__name__)

DEFAULT_ETA = 0.39
# k (k + d - 1) for k = 1, d = 3: the penalty carries the polynomial-degree
# scaling of the trace inverse inequality (same convention as DUNE-PDELab's
# DG Poisson operators); eta itself stays dimensionless.
PENALTY_DEGREE_FACTOR = 3.0
RHS_CELL_DEGREE = 5
RHS_FACE_DEGREE = 5
BOUNDARY_FACE_DEGREE = 9
# boundary faces closer to the dipole than this many face widths are subdivided
BOUNDARY_SUBDIVISION = 4.0
MAX_BOUNDARY_SUBDIVISION = 64


class SourceValidityWarning(UserWarning):
    """Dipole cell has neighbours of a different tissue."""


# --- face operators ---------------------------------------------------------

def jump(u_e, u_f, normal):
    """[u] = u_e n_e + u_f n_f = (u_e - u_f) n for n pointing from e to f."""
    return (np.asarray(u_e) - np.asarray(u_f))[..., None] * np.asarray(normal)


def jump_vector(v_e, v_f, normal):
    """[v] = v_e . n_e + v_f . n_f, a scalar."""
    n = np.asarray(normal)
    return np.sum((np.asarray(v_e) - np.asarray(v_f)) * n, axis=-1)


def average(x_e, x_f, w_ef):
    """<x> = w_ef x_e + w_fe x_f with w_fe = 1 - w_ef."""
    w_ef = np.asarray(w_ef)
    return w_ef * np.asarray(x_e) + (1.0 - w_ef) * np.asarray(x_f)


def switched_average(x_e, x_f, w_ef):
    """<x>* with the two weights exchanged."""
    return average(x_e, x_f, 1.0 - np.asarray(w_ef))


@dataclass
class ConductivityField:
    sigma: np.ndarray  # per cell, S/m

    @classmethod
    def from_table(cls, mesh, table):
        lut = table.conductivity_lookup()
        sigma = lut[mesh.cell_labels]
        if np.any(sigma <= 0):
            raise ValueError("every mesh label needs a positive conductivity")
        return cls(sigma)

    def weights(self, e, f):
        """(w_ef, w_fe) = (s_f, s_e) / (s_e + s_f)."""
        se, sf = self.sigma[e], self.sigma[f]
        return sf / (se + sf), se / (se + sf)

    def harmonic(self, e, f):
        se, sf = self.sigma[e], self.sigma[f]
        return 2.0 * se * sf / (se + sf)

    def scaled(self, factor):
        return ConductivityField(self.sigma * factor)


def face_width(mesh, skeleton):
    """h_gamma = min(|E_e|, |E_f|) / |gamma|; equals h on uniform cubes."""
    vol = mesh.cell_volume
    return np.full(skeleton.n_internal, vol) / skeleton.area


@dataclass
class SubtractionSplit:
    sigma_inf: float
    sigma_corr: np.ndarray  # per cell
    source_cell: int
    source_label: int
    valid: bool
    messages: list = field(default_factory=list)


def source_conductivity(mesh, cond, dipole, skeleton=None):
    """sigma_inf from the cell holding the dipole.

    ``valid`` is False when a face neighbour of that cell carries another
    label or the cell touches the boundary, i.e. there is no homogeneous
    neighbourhood around the source.
    """
    cid = int(mesh.locate(dipole.position[None, :])[0])
    if cid < 0:
        raise ValueError(f"dipole position {dipole.position.tolist()} lies outside the mesh")
    label = int(mesh.cell_labels[cid])
    sigma_inf = float(cond.sigma[cid])
    ijk = mesh.cell_ijk[cid]
    dims = np.array(mesh.lattice_dims)
    valid = True
    for axis in range(3):
        for step in (-1, 1):
            n = ijk.copy()
            n[axis] += step
            if np.any(n < 0) or np.any(n >= dims):
                valid = False
                continue
            nid = mesh.cell_index[tuple(n)]
            if nid < 0 or mesh.cell_labels[nid] != label:
                valid = False
    messages = []
    if not valid:
        messages.append(
            f"dipole at {dipole.position.tolist()} sits in cell {cid} (label {label}) "
            "without a homogeneous face neighbourhood"
        )
    return SubtractionSplit(sigma_inf, cond.sigma - sigma_inf, cid, label, valid, messages)


# --- linear system container ---------------------------------------------------

@dataclass
class LinearSystem:
    matrix: object  # scipy sparse matrix or DGOperator
    rhs: np.ndarray | None
    scheme: str  # "cg" | "dg"
    kernel: np.ndarray  # spans the constant functions
    mesh: object = None
    warnings: list = field(default_factory=list)

    @property
    def n_dofs(self):
        return self.matrix.shape[0]

    def constant_mode_sum(self, b=None):
        b = self.rhs if b is None else b
        return float(self.kernel @ b)


def dg_kernel(n_cells):
    k = np.zeros(8 * n_cells)
    k[::8] = 1.0
    return k


def dump_system(path, system):
    """Debug dump: ``block_row block_col local_row local_col value`` lines,
    then ``rhs index value`` lines. The format is not stable."""
    A = system.matrix.to_bsr() if hasattr(system.matrix, "to_bsr") else sp.csr_matrix(system.matrix)
    bs = 8 if system.scheme == "dg" else 1
    coo = A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# scheme {system.scheme} n {A.shape[0]} block {bs}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i // bs} {j // bs} {i % bs} {j % bs} {v!r}\n")
        if system.rhs is not None:
            for i, v in enumerate(system.rhs):
                fh.write(f"rhs {i} {v!r}\n")


# --- CG -----------------------------------------------------------------------

def assemble_operator_cg(mesh, cond):
    """Trilinear stiffness sum_E sigma_E h K_ref on the vertices."""
    K = femcore.reference_stiffness(femcore.cg_basis())
    scale = cond.sigma * mesh.h
    cells = mesh.cells.astype(np.int32)
    rows = np.repeat(cells, 8, axis=1).ravel()
    cols = np.tile(cells, (1, 8)).ravel()
    data = (scale[:, None] * K.ravel()[None, :]).ravel()
    n = mesh.n_vertices
    A = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def _quad_points_cells(mesh, cells, rule):
    return mesh.origin + mesh.h * (mesh.cell_ijk[cells][:, None, :] + rule.points[None, :, :])


def _finite(out):
    if not np.all(np.isfinite(out)):
        raise SingularPointError("a quadrature point coincides with the dipole position")
    return out


def _volume_rhs(mesh, split, dipole, basis, degree):
    """Per-cell contributions -int sigma_corr grad(u_inf) . grad(phi_i)."""
    rule = femcore.quadrature_rule("cell", degree)
    _, gref = basis.evaluate(rule.points)  # (q, 8, 3)
    h = mesh.h
    out = np.zeros((mesh.n_cells, 8))
    active = np.flatnonzero(split.sigma_corr != 0.0)
    # h^3 volume, 1/h gradient scale
    coef = -split.sigma_corr[active] * h * h / (4.0 * np.pi * split.sigma_inf)
    local = np.zeros((len(active), 8))
    dipole_cell_moments(mesh.cell_origins()[active], h, rule.points, rule.weights,
                        np.ascontiguousarray(gref), dipole.position, dipole.moment, coef, local)
    out[active] = local
    return _finite(out)


def _composite_face_rule(rule, m):
    """``rule`` repeated on an m x m subdivision of the unit square."""
    if m == 1:
        return rule.points, rule.weights
    off = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"), -1).reshape(-1, 2)
    pts = (off[:, None, :] + rule.points[None, :, :]).reshape(-1, 2) / m
    return pts, np.tile(rule.weights, m * m) / (m * m)


def _boundary_subdivision(mesh, skeleton, dipole, sel, lf):
    """Subdivisions per boundary face so that sub-squares are no larger than
    a quarter of their distance to the dipole (the source flux is then resolved
    well enough for the constant mode to integrate to zero)."""
    axis, side = divmod(lf, 2)
    rel = (dipole.position - mesh.cell_origins()[skeleton.boundary_cell[sel]]) / mesh.h
    lo = np.zeros(3)
    hi = np.ones(3)
    lo[axis] = hi[axis] = side
    dist = np.linalg.norm(rel - np.clip(rel, lo, hi), axis=1)
    m = np.ceil(BOUNDARY_SUBDIVISION / np.maximum(dist, 1e-3))
    return np.clip(m, 1, MAX_BOUNDARY_SUBDIVISION).astype(np.int64)


def _boundary_source(mesh, skeleton, dipole, degree):
    """Quadrature of -sigma_inf d_n u_inf |face| w_q on boundary faces, grouped
    by local face and subdivision: yields (local face, face ids, reference
    face points (q, 2), values (n, q))."""
    rule = femcore.quadrature_rule("face", degree)
    corners = mesh.cell_origins()
    for lf in range(6):
        faces = np.flatnonzero(skeleton.boundary_local == lf)
        if not len(faces):
            continue
        msub = _boundary_subdivision(mesh, skeleton, dipole, faces, lf)
        for m in np.unique(msub):
            sel = faces[msub == m]
            pts, w = _composite_face_rule(rule, int(m))
            ref = femcore.face_to_cell_points(lf, pts)
            dn = np.empty((len(sel), len(w)))
            dipole_normal_field(corners[skeleton.boundary_cell[sel]], mesh.h, ref,
                                skeleton.boundary_normal[sel], dipole.position, dipole.moment, dn)
            # sigma_inf cancels against the 1/(4 pi sigma_inf) of u_inf
            dn *= (-skeleton.boundary_area[sel] / (4.0 * np.pi))[:, None] * w
            yield lf, sel, pts, _finite(dn)


def _boundary_rhs(mesh, skeleton, split, dipole, basis, degree):
    """Per-cell contributions -int_{dOmega} sigma_inf d_n u_inf phi_i."""
    out = np.zeros((mesh.n_cells, 8))
    for lf, sel, pts, val in _boundary_source(mesh, skeleton, dipole, degree):
        vals, _ = basis.evaluate(femcore.face_to_cell_points(lf, pts))
        # a cell has at most one boundary face per local face
        out[skeleton.boundary_cell[sel]] += val @ vals
    return out


def boundary_source_flux(mesh, skeleton, dipole, degree=BOUNDARY_FACE_DEGREE):
    """-int sigma_inf d_n u_inf over each boundary face."""
    out = np.zeros(skeleton.n_boundary)
    for _, sel, _, val in _boundary_source(mesh, skeleton, dipole, degree):
        out[sel] = val.sum(axis=1)
    return out


def _check_split(split):
    if not split.valid:
        for msg in split.messages:
            warnings.warn(msg, SourceValidityWarning, stacklevel=3)


def assemble_rhs_cg(mesh, skeleton, cond, split, dipole,
                    cell_degree=RHS_CELL_DEGREE, boundary_degree=BOUNDARY_FACE_DEGREE):
    _check_split(split)
    basis = femcore.cg_basis()
    local = _volume_rhs(mesh, split, dipole, basis, cell_degree)
    local += _boundary_rhs(mesh, skeleton, split, dipole, basis, boundary_degree)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def _degrees(quadrature, keys):
    """Quadrature degree overrides, e.g. {"cell": 7, "boundary": 11}."""
    q = dict(quadrature or {})
    unknown = set(q) - {"cell", "face", "boundary"}
    if unknown:
        raise ValueError(f"unknown quadrature entities {sorted(unknown)}")
    return {f"{k}_degree": int(q[k]) for k in keys if k in q}


def cg_system(mesh, cond, split=None, dipole=None, skeleton=None, matrix=None, quadrature=None):
    skeleton = compute_skeleton(mesh) if skeleton is None else skeleton
    A = assemble_operator_cg(mesh, cond) if matrix is None else matrix
    b = None
    msgs = []
    if dipole is not None:
        b = assemble_rhs_cg(mesh, skeleton, cond, split, dipole,
                            **_degrees(quadrature, ("cell", "boundary")))
        msgs = list(split.messages)
    return LinearSystem(A, b, "cg", np.ones(mesh.n_vertices), mesh, msgs)


# --- DG -----------------------------------------------------------------------

@dataclass(frozen=True)
class DGReference:
    """Unit-cell matrices of the SWIP form.

    ``stiffness`` is int grad(phi_i).grad(phi_j) on the unit cube. For a
    face seen from local face ``le`` of cell e, ``consistency_e`` and
    ``consistency_f`` (16x16 over [e dofs, f dofs]) hold the symmetrised
    -<s grad u>[v] - <s grad v>[u] terms per unit weighted conductivity of
    each side, and ``penalty`` holds int [u][v]; all on the unit face.
    """

    stiffness: np.ndarray
    consistency_e: tuple
    consistency_f: tuple
    penalty: tuple
    face_values_e: tuple  # (q, 8) traces on the e side per local face
    face_values_f: tuple
    face_rule: femcore.QuadratureRule


def dg_reference(face_degree=3):
    basis = femcore.dg_basis()
    K = femcore.reference_stiffness(basis)
    rule = femcore.quadrature_rule("face", face_degree)
    W = np.diag(rule.weights)
    ge, gf, pen, ve_all, vf_all = [], [], [], [], []
    for le in range(6):
        lf = le ^ 1
        axis, side = divmod(le, 2)
        sign = 1.0 if side == 1 else -1.0  # n from e to f along +axis iff le is a + face
        ve, dve = basis.evaluate(femcore.face_to_cell_points(le, rule.points))
        vf, dvf = basis.evaluate(femcore.face_to_cell_points(lf, rule.points))
        dne = sign * dve[:, :, axis]
        dnf = sign * dvf[:, :, axis]
        zero = np.zeros_like(ve)
        J = np.hstack([ve, -vf])
        De = np.hstack([dne, zero])
        Df = np.hstack([zero, dnf])
        Ce = J.T @ W @ De
        Cf = J.T @ W @ Df
        ge.append(-(Ce + Ce.T))
        gf.append(-(Cf + Cf.T))
        pen.append(J.T @ W @ J)
        ve_all.append(ve)
        vf_all.append(vf)
    return DGReference(K, tuple(ge), tuple(gf), tuple(pen), tuple(ve_all), tuple(vf_all), rule)


class DGOperator:
    """Matrix-free SWIP operator a + J.

    ``A = sum_E sigma_E h K  +  sum_faces [ h (c_e G_e + c_f G_f)
    + eta k(k+d-1) sigma_hat |gamma| / h_gamma P ]`` with ``c_e = w_ef sigma_e`` and
    ``c_f = w_fe sigma_f``. Works on vectors of length 8 * n_cells and on
    stacks of such vectors (shape (n, k)).
    """

    def __init__(self, mesh, skeleton, cond, eta=DEFAULT_ETA, reference=None,
                 penalty_factor=PENALTY_DEGREE_FACTOR):
        if not eta >= 0:
            raise ValueError("penalty parameter must be non-negative")
        self.mesh = mesh
        self.skeleton = skeleton
        self.cond = cond
        self.eta = float(eta)
        self.penalty_factor = float(penalty_factor)
        self.ref = dg_reference() if reference is None else reference
        self.n_cells = mesh.n_cells
        self.shape = (8 * mesh.n_cells, 8 * mesh.n_cells)
        self.dtype = np.dtype(float)
        h = mesh.h
        sk = skeleton
        w_ef, w_fe = cond.weights(sk.e, sk.f)
        self.coef_e = h * w_ef * cond.sigma[sk.e]
        self.coef_f = h * w_fe * cond.sigma[sk.f]
        hg = face_width(mesh, sk)
        self.coef_pen = self.eta * self.penalty_factor * cond.harmonic(sk.e, sk.f) * sk.area / hg
        self.vol_scale = cond.sigma * h
        self.groups = [np.flatnonzero(sk.local_e == le) for le in range(6)]

    def _face_block(self, le, k):
        r = self.ref
        return (self.coef_e[k] * r.consistency_e[le] + self.coef_f[k] * r.consistency_f[le]
                + self.coef_pen[k] * r.penalty[le])

    def _trace_tables(self):
        """Per-cell trace matrices on all 6 faces: values and outward normal
        derivatives at the face quadrature points, shape (8, 6*q) each."""
        basis = femcore.dg_basis()
        rule = self.ref.face_rule
        vals, dns = [], []
        for lf in range(6):
            axis, side = divmod(lf, 2)
            v, g = basis.evaluate(femcore.face_to_cell_points(lf, rule.points))
            vals.append(v)
            dns.append((1.0 if side else -1.0) * g[:, :, axis])
        V = np.concatenate(vals, axis=0).T
        D = np.concatenate(dns, axis=0).T
        return np.hstack([V, D])

    def _face_modal_maps(self):
        """Maps from cell coefficients to face-modal traces.

        Traces of Q1 functions on a face are bilinear, so they are exactly
        represented in the orthonormal face basis {1, s, t, st} (scaled
        Legendre). With the tensor Legendre cell basis each value trace
        mode picks two cell modes (weights 1 and c) and each derivative
        trace mode one. Returns (v0, v1, c1, d0, dcoef), each (6, 4).
        """
        rule = self.ref.face_rule
        W = rule.weights
        s_, t_ = (rule.points - 0.5).T
        r12 = np.sqrt(12.0)
        phi = np.stack([np.ones_like(s_), r12 * s_, r12 * t_, 12.0 * s_ * t_], axis=1)
        if not np.allclose(phi.T @ (W[:, None] * phi), np.eye(4), atol=1e-12):
            raise RuntimeError("face quadrature does not integrate the face modes exactly")
        traces = self._trace_tables()
        nq = len(rule)
        v0 = np.zeros((6, 4), dtype=np.int64)
        v1 = np.zeros((6, 4), dtype=np.int64)
        d0 = np.zeros((6, 4), dtype=np.int64)
        c1 = np.zeros((6, 4))
        dcoef = np.zeros((6, 4))
        for lf in range(6):
            tv = traces[:, lf * nq:(lf + 1) * nq].T
            td = traces[:, (6 + lf) * nq:(7 + lf) * nq].T
            Sv = phi.T @ (W[:, None] * tv)
            Sd = phi.T @ (W[:, None] * td)
            if not (np.allclose(phi @ Sv, tv, atol=1e-12) and np.allclose(phi @ Sd, td, atol=1e-12)):
                raise RuntimeError("face traces are not bilinear")
            for m in range(4):
                nzv = np.flatnonzero(np.abs(Sv[m]) > 1e-12)
                nzd = np.flatnonzero(np.abs(Sd[m]) > 1e-12)
                if len(nzv) != 2 or len(nzd) != 1 or abs(Sv[m, nzv[0]] - 1.0) > 1e-12:
                    raise RuntimeError("DG basis is not a tensor Legendre basis")
                v0[lf, m], v1[lf, m] = nzv
                c1[lf, m] = Sv[m, nzv[1]]
                d0[lf, m] = nzd[0]
                dcoef[lf, m] = Sd[m, nzd[0]]
        return v0, v1, c1, d0, dcoef

    def _prepare_matvec(self):
        sk = self.skeleton
        self._faces = (np.ascontiguousarray(sk.e, dtype=np.int64),
                       np.ascontiguousarray(sk.f, dtype=np.int64),
                       np.ascontiguousarray(sk.local_e, dtype=np.int64),
                       np.ascontiguousarray(self.coef_e, dtype=float),
                       np.ascontiguousarray(self.coef_f, dtype=float),
                       np.ascontiguousarray(self.coef_pen, dtype=float))
        self._modal = tuple(self._face_modal_maps())
        K = self.ref.stiffness
        off = K - np.diag(np.diag(K))
        self._kdiag = np.diag(K).copy() if np.abs(off).max() <= 1e-12 * np.abs(K).max() else None

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            if x.shape[1] == 1:
                return self.matvec(x[:, 0])[:, None]
            return np.stack([self.matvec(x[:, j]) for j in range(x.shape[1])], axis=1)
        if not hasattr(self, "_faces"):
            self._prepare_matvec()
        X = np.ascontiguousarray(x).reshape(self.n_cells, 8)
        if self._kdiag is not None:
            if not hasattr(self, "_vol_diag"):
                self._vol_diag = self.vol_scale[:, None] * self._kdiag
            Y = X * self._vol_diag
        else:
            Y = np.dot(X, self.ref.stiffness) * self.vol_scale[:, None]
        face_apply_modal(X, Y, *self._faces, *self._modal)
        return Y.ravel()

    def dot(self, x):
        return self.matvec(x)

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal_blocks(self):
        D = self.vol_scale[:, None, None] * self.ref.stiffness[None, :, :]
        flat = D.reshape(self.n_cells, 64)
        sk = self.skeleton
        r = self.ref
        for le, idx in enumerate(self.groups):
            if not len(idx):
                continue
            coefs = np.stack([self.coef_e[idx], self.coef_f[idx], self.coef_pen[idx]], axis=1)
            for cell, part in ((sk.e[idx], slice(None, 8)), (sk.f[idx], slice(8, None))):
                refs = np.stack([m[part, part].ravel()
                                 for m in (r.consistency_e[le], r.consistency_f[le], r.penalty[le])])
                # each cell occurs once per local face, so no accumulation conflicts
                flat[cell] += coefs @ refs
        return D

    def face_flux(self, x):
        """a(u, 1_e) restricted to each internal face: the discrete flux
        int (-<s grad u> + pen [u]) . n over the face, n from e to f.
        The f side sees the negative value."""
        X = np.asarray(x, dtype=float).reshape(-1, 8)
        sk = self.skeleton
        r = self.ref
        out = np.zeros(sk.n_internal)
        for le, idx in enumerate(self.groups):
            if not len(idx):
                continue
            row = (self.coef_e[idx, None] * r.consistency_e[le][0]
                   + self.coef_f[idx, None] * r.consistency_f[le][0]
                   + self.coef_pen[idx, None] * r.penalty[le][0])
            out[idx] = (np.einsum("ni,ni->n", row[:, :8], X[sk.e[idx]])
                        + np.einsum("ni,ni->n", row[:, 8:], X[sk.f[idx]]))
        return out

    def _face_blocks(self, le, idx):
        r = self.ref
        return (self.coef_e[idx, None, None] * r.consistency_e[le]
                + self.coef_f[idx, None, None] * r.consistency_f[le]
                + self.coef_pen[idx, None, None] * r.penalty[le])

    def to_bsr(self):
        """Explicit block sparse matrix (8x8 blocks)."""
        sk = self.skeleton
        nc = self.n_cells
        rows = [np.arange(nc)]
        cols = [np.arange(nc)]
        blocks = [self.diagonal_blocks()]
        for le, idx in enumerate(self.groups):
            if not len(idx):
                continue
            B = self._face_blocks(le, idx)
            rows += [sk.e[idx], sk.f[idx]]
            cols += [sk.f[idx], sk.e[idx]]
            blocks += [B[:, :8, 8:], B[:, 8:, :8]]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        blocks = np.concatenate(blocks)
        order = np.lexsort((cols, rows))
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=nc))])
        return sp.bsr_matrix((blocks[order], cols[order], indptr), shape=self.shape)

    def toarray(self):
        return self.to_bsr().toarray()


def assemble_operator_dg(mesh, skeleton, cond, eta=DEFAULT_ETA, penalty_factor=PENALTY_DEGREE_FACTOR):
    return DGOperator(mesh, skeleton, cond, eta, penalty_factor=penalty_factor)


def _face_source(mesh, skeleton, cond, split, dipole, degree):
    """Quadrature values of <sigma_corr grad u_inf> . n |face| w_q on internal
    faces with sigma_corr != 0 on some side, grouped by local face of e."""
    rule = femcore.quadrature_rule("face", degree)
    sk = skeleton
    sc = split.sigma_corr
    active = (sc[sk.e] != 0.0) | (sc[sk.f] != 0.0)
    w_ef, w_fe = cond.weights(sk.e, sk.f)
    coef = (w_ef * sc[sk.e] + w_fe * sc[sk.f]) * sk.area / (4.0 * np.pi * split.sigma_inf)
    corners = mesh.cell_origins()
    for le in range(6):
        sel = np.flatnonzero(active & (sk.local_e == le))
        if not len(sel):
            continue
        ref_e = femcore.face_to_cell_points(le, rule.points)
        val = np.empty((len(sel), len(rule)))
        dipole_normal_field(corners[sk.e[sel]], mesh.h, ref_e, sk.normal[sel],
                            dipole.position, dipole.moment, val)
        val *= coef[sel, None] * rule.weights
        yield le, sel, _finite(val)


def _face_rhs(mesh, skeleton, cond, split, dipole, basis, degree):
    """int over internal faces of <sigma_corr grad u_inf> . [v] with the
    conductivity weights of the operator."""
    rule = femcore.quadrature_rule("face", degree)
    out = np.zeros((mesh.n_cells, 8))
    for le, sel, val in _face_source(mesh, skeleton, cond, split, dipole, degree):
        ve, _ = basis.evaluate(femcore.face_to_cell_points(le, rule.points))
        vf, _ = basis.evaluate(femcore.face_to_cell_points(le ^ 1, rule.points))
        # within one local-face group every cell occurs at most once per side
        out[skeleton.e[sel]] += val @ ve
        out[skeleton.f[sel]] -= val @ vf
    return out


def face_source_flux(mesh, skeleton, cond, split, dipole, degree=RHS_FACE_DEGREE):
    """int <sigma_corr grad u_inf> . n over each internal face (n from e to f)."""
    out = np.zeros(skeleton.n_internal)
    for _, sel, val in _face_source(mesh, skeleton, cond, split, dipole, degree):
        out[sel] = val.sum(axis=1)
    return out


def assemble_rhs_dg(mesh, skeleton, cond, split, dipole, cell_degree=RHS_CELL_DEGREE,
                    face_degree=RHS_FACE_DEGREE, boundary_degree=BOUNDARY_FACE_DEGREE):
    _check_split(split)
    basis = femcore.dg_basis()
    b = _volume_rhs(mesh, split, dipole, basis, cell_degree)
    b += _face_rhs(mesh, skeleton, cond, split, dipole, basis, face_degree)
    b += _boundary_rhs(mesh, skeleton, split, dipole, basis, boundary_degree)
    return b.ravel()


def dg_system(mesh, cond, split=None, dipole=None, skeleton=None, eta=DEFAULT_ETA, matrix=None,
              quadrature=None):
    skeleton = compute_skeleton(mesh) if skeleton is None else skeleton
    A = assemble_operator_dg(mesh, skeleton, cond, eta) if matrix is None else matrix
    b = None
    msgs = []
    if dipole is not None:
        b = assemble_rhs_dg(mesh, skeleton, cond, split, dipole,
                            **_degrees(quadrature, ("cell", "face", "boundary")))
        msgs = list(split.messages)
    return LinearSystem(A, b, "dg", dg_kernel(mesh.n_cells), mesh, msgs)


class CellEmbedding:
    """Map from vertex values to DG coefficients (exact embedding of the
    trilinear space into the broken Q1 space), applied cell by cell.

    ``P @ v`` and ``P.T @ r`` accept vectors or column blocks.
    """

    def __init__(self, mesh, local_map=None):
        self.cells = np.ascontiguousarray(mesh.cells, dtype=np.int64)
        self.M = np.ascontiguousarray(femcore.cg_to_dg_map() if local_map is None else local_map)
        self.shape = (8 * mesh.n_cells, mesh.n_vertices)

    @property
    def T(self):
        return _TransposedEmbedding(self)

    def __matmul__(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            out = np.empty((len(self.cells), 8))
            embed_apply(self.cells, self.M, np.ascontiguousarray(v), out)
            return out.ravel()
        return np.stack([self @ v[:, j] for j in range(v.shape[1])], axis=1)

    def rmatvec(self, r):
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            return np.stack([self.rmatvec(r[:, j]) for j in range(r.shape[1])], axis=1)
        out = np.zeros(self.shape[1])
        embed_adjoint(self.cells, self.M, np.ascontiguousarray(r).reshape(-1, 8), out)
        return out

    def tocsr(self):
        nc = len(self.cells)
        rows = (8 * np.arange(nc)[:, None, None] + np.arange(8)[None, :, None]) * np.ones((1, 1, 8), dtype=np.int64)
        cols = np.broadcast_to(self.cells[:, None, :], (nc, 8, 8))
        data = np.broadcast_to(self.M[None, :, :], (nc, 8, 8))
        return sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=self.shape)

    def toarray(self):
        return self.tocsr().toarray()


class _TransposedEmbedding:
    def __init__(self, P):
        self.P = P
        self.shape = P.shape[::-1]

    def __matmul__(self, r):
        return self.P.rmatvec(r)


def cg_to_dg_prolongation(mesh):
    return CellEmbedding(mesh)
