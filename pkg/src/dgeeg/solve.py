"""Null-space aware preconditioned conjugate gradients and transfer matrices.

The pure Neumann systems are singular with the constant functions as
kernel. PCG runs on the kernel-orthogonal complement: the right-hand side
and every preconditioned residual are projected, and the returned
coefficients are the representative orthogonal to the kernel.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg
from scipy.linalg.blas import daxpy
import scipy.sparse as sp

from ._kernels import block_apply

logger = logging.getLogger(__name__)

PRECONDITIONERS = ("none", "diagonal", "block-diagonal", "amg")


class SolverError(RuntimeError):
    pass


class NotConverged(SolverError):
    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = residual_history


class IncompatibleRHS(SolverError):
    pass


class IndefiniteOperator(SolverError):
    pass


@dataclass
class SolveConfig:
    tol: float = 1e-10
    maxiter: int = 5000
    preconditioner: str | None = None  # None picks block-diagonal (DG) / diagonal (CG)
    deflation: bool = True
    compatibility_tol: float = 1e-6

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.preconditioner is not None and self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def resolved(self, scheme):
        if self.preconditioner is None:
            return "block-diagonal" if scheme == "dg" else "diagonal"
        if self.preconditioner == "block-diagonal" and scheme != "dg":
            raise ValueError("block-diagonal preconditioning needs the DG layout")
        return self.preconditioner


@dataclass
class SolveInfo:
    iterations: int
    residual_history: list = field(default_factory=list)
    relative_residual: np.ndarray | None = None


def _apply(A, X):
    return A @ X


class _Identity:
    def __call__(self, R):
        return R.copy()


class _Jacobi:
    def __init__(self, diag):
        if np.any(diag <= 0):
            raise IndefiniteOperator("non-positive diagonal entry; operator is not positive semidefinite")
        self.inv = 1.0 / diag

    def __call__(self, R):
        return R * (self.inv[:, None] if R.ndim == 2 else self.inv)


class _BlockJacobi:
    """Inverse 8x8 cell blocks via Cholesky; fails on indefinite blocks.

    The (symmetrised) inverses are stored in single precision: applying
    them is memory bound and a preconditioner needs no more accuracy.
    """

    def __init__(self, blocks):
        try:
            L = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as exc:
            bad = [i for i, B in enumerate(blocks) if np.linalg.eigvalsh(B)[0] <= 0]
            raise IndefiniteOperator(
                f"{len(bad)} DG cell blocks are not positive definite (first: cell {bad[:5]}); "
                "the penalty parameter eta is too small for coercivity - increase it"
            ) from exc
        eye = np.broadcast_to(np.eye(8), blocks.shape)
        Linv = np.linalg.solve(L, eye)
        inv = np.matmul(Linv.transpose(0, 2, 1), Linv)
        self.inv = (0.5 * (inv + inv.transpose(0, 2, 1))).astype(np.float32)

    def __call__(self, R):
        if R.ndim == 2:
            return np.stack([self(R[:, j]) for j in range(R.shape[1])], axis=1)
        X = np.ascontiguousarray(R, dtype=float).reshape(-1, 8)
        out = np.empty_like(X)
        block_apply(self.inv, X, out)
        return out.ravel()


class _AMG:
    """One symmetric V-cycle of a smoothed-aggregation hierarchy per column.

    pyamg builds the hierarchy; the cycle is run here without the residual
    norm bookkeeping of ``MultilevelSolver.solve``.
    """

    def __init__(self, A):
        import pyamg

        A = sp.csr_matrix(A)
        self.ml = pyamg.smoothed_aggregation_solver(
            A, B=np.ones((A.shape[0], 1)), symmetry="hermitian",
            # forward sweep down, backward sweep up keeps the cycle symmetric
            presmoother=("gauss_seidel", {"sweep": "forward"}),
            postsmoother=("gauss_seidel", {"sweep": "backward"}),
            max_coarse=500, coarse_solver="pinv",
        )
        for level in self.ml.levels:
            level.A = sp.csr_matrix(level.A)
            if hasattr(level, "P"):
                level.P = sp.csr_matrix(level.P)
                level.R = sp.csr_matrix(level.R)

    def _cycle(self, lvl, b):
        levels = self.ml.levels
        A = levels[lvl].A
        if lvl == len(levels) - 1:
            return self.ml.coarse_solver(A, b)
        x = np.zeros_like(b)
        levels[lvl].presmoother(A, x, b)
        x += levels[lvl].P @ self._cycle(lvl + 1, levels[lvl].R @ (b - A @ x))
        levels[lvl].postsmoother(A, x, b)
        return x

    def __call__(self, R):
        if R.ndim == 1:
            return self._cycle(0, np.ascontiguousarray(R))
        out = np.empty_like(R)
        for j in range(R.shape[1]):
            out[:, j] = self._cycle(0, np.ascontiguousarray(R[:, j]))
        return out


class _AuxiliarySpace:
    """Additive two-level DG preconditioner: block-Jacobi plus a coarse
    correction in the trilinear subspace, whose Galerkin operator is the CG
    stiffness matrix (approximated by one AMG cycle)."""

    def __init__(self, op, prolongation, coarse_matrix):
        self.smoother = _BlockJacobi(op.diagonal_blocks())
        self.P = prolongation
        self.PT = prolongation.T
        self.coarse = coarse_matrix if isinstance(coarse_matrix, _AMG) else _AMG(coarse_matrix)

    def __call__(self, R):
        return self.smoother(R) + self.P @ self.coarse(self.PT @ R)


def make_preconditioner(system, kind, coarse=None):
    """Preconditioner of the given kind for ``system``.

    For DG with ``kind="amg"`` an existing CG AMG preconditioner of the same
    mesh and conductivities can be passed as ``coarse`` and is shared.
    """
    A = system.matrix
    if kind == "none":
        return _Identity()
    if kind == "diagonal":
        if hasattr(A, "diagonal_blocks"):
            diag = np.einsum("nii->ni", A.diagonal_blocks()).ravel()
        else:
            diag = A.diagonal()
        return _Jacobi(diag)
    if kind == "block-diagonal":
        return _BlockJacobi(A.diagonal_blocks())
    if kind == "amg":
        if system.scheme == "dg":
            from .schemes import assemble_operator_cg, cg_to_dg_prolongation

            mesh = A.mesh
            if coarse is None:
                coarse = assemble_operator_cg(mesh, A.cond)
            return _AuxiliarySpace(A, cg_to_dg_prolongation(mesh), coarse)
        return _AMG(A)
    raise ValueError(f"unknown preconditioner {kind!r}")


class Projector:
    """Euclidean projection onto the complement of the kernel vector."""

    def __init__(self, kernel):
        k = np.asarray(kernel, dtype=float)
        self.k = k / np.linalg.norm(k)
        # a strided support (the DG constant mode) lets projection touch only those rows
        nz = np.flatnonzero(self.k)
        self.support = slice(None)
        if len(nz) > 1:
            step = nz[1] - nz[0]
            if np.array_equal(nz, np.arange(nz[0], nz[-1] + 1, step)):
                self.support = slice(nz[0], nz[-1] + 1, step)
        self.ks = self.k[self.support]
        self.uniform = bool(np.all(self.ks == self.ks[0]))

    def component(self, X):
        return self.ks @ X[self.support]

    def project_(self, X):
        """In-place projection; returns ``X``."""
        if self.uniform:
            # constant on its support: subtract the mean there
            X[self.support] -= X[self.support].mean(axis=0)
            return X
        c = self.ks @ X[self.support]
        X[self.support] -= np.outer(self.ks, c) if X.ndim == 2 else self.ks * c
        return X

    def __call__(self, X):
        return self.project_(np.array(X, dtype=float))


def _pcg_vector(A, b, precond, proj, tol, maxiter, x0):
    """Single right-hand-side PCG on 1-D arrays (see :func:`pcg`)."""
    x = np.zeros_like(b) if x0 is None else proj(np.asarray(x0, dtype=float).ravel())
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), SolveInfo(0, [np.zeros(1)], np.zeros(1)), False
    r = b - A @ x if x0 is not None else b.copy()
    res = np.linalg.norm(r) / bnorm
    history = [np.array([res])]
    p = None
    rz = 1.0
    it = 0
    while res > tol and it < maxiter:
        z = proj.project_(precond(r))
        rz_new = r @ z
        if p is None:
            p = z
        else:
            p *= rz_new / rz
            p += z
        rz = rz_new
        it += 1
        ap = A @ p
        pap = p @ ap
        if pap <= 0:
            raise IndefiniteOperator(
                f"non-positive curvature p^T A p = {pap:.3e} at iteration {it}; "
                "the operator is indefinite on the kernel complement (penalty too small?)"
            )
        alpha = rz / pap
        daxpy(p, x, a=alpha)
        daxpy(ap, r, a=-alpha)
        res = np.linalg.norm(r) / bnorm
        history.append(np.array([res]))
    return proj.project_(x), SolveInfo(it, history, np.array([res])), res > tol


class _NoProjection:
    def project_(self, X):
        return X

    def __call__(self, X):
        return np.array(X, dtype=float)


def pcg(A, B, precond, projector=None, tol=1e-10, maxiter=5000, x0=None):
    """Preconditioned CG on one or several right-hand sides (columns of B).

    Columns iterate independently; converged columns drop out of the
    working set. Returns ``(X, SolveInfo)``.
    """
    B = np.asarray(B, dtype=float)
    proj = projector if projector is not None else _NoProjection()
    if B.ndim == 1 or B.shape[1] == 1:
        x, info, failed = _pcg_vector(A, B.ravel(), precond, proj, tol, maxiter, x0)
        if failed:
            raise NotConverged(
                f"PCG did not reach {tol:g} in {maxiter} iterations "
                f"(residual {info.relative_residual[0]:.3e})", info.residual_history
            )
        return (x if B.ndim == 1 else x[:, None]), info
    n, k = B.shape
    X = np.zeros((n, k)) if x0 is None else proj(np.asarray(x0, dtype=float).reshape(n, k))
    bnorm = np.linalg.norm(B, axis=0)
    zero = bnorm == 0
    X[:, zero] = 0.0
    scale = np.where(zero, 1.0, bnorm)
    R = B - A @ X if x0 is not None else B.copy()
    R[:, zero] = 0.0
    res = np.linalg.norm(R, axis=0) / scale
    history = [res.copy()]
    active = np.flatnonzero(~zero & (res > tol))
    Xa = X[:, active]
    Ra = R[:, active]
    Pa = Za = None
    rz = None
    it = 0
    while len(active) and it < maxiter:
        Za = proj.project_(precond(Ra))
        rz_new = np.einsum("ij,ij->j", Ra, Za)
        Pa = Za if Pa is None else Za + Pa * (rz_new / rz)
        rz = rz_new
        it += 1
        AP = A @ Pa
        pAp = np.einsum("ij,ij->j", Pa, AP)
        if np.any(pAp <= 0):
            raise IndefiniteOperator(
                f"non-positive curvature p^T A p = {pAp.min():.3e} at iteration {it}; "
                "the operator is indefinite on the kernel complement (penalty too small?)"
            )
        alpha = rz / pAp
        Xa += Pa * alpha
        Ra -= AP * alpha
        res[active] = np.linalg.norm(Ra, axis=0) / scale[active]
        history.append(res.copy())
        done = res[active] <= tol
        if done.any():
            X[:, active[done]] = Xa[:, done]
            keep = ~done
            active, Xa, Ra, Pa, rz = active[keep], Xa[:, keep], Ra[:, keep], Pa[:, keep], rz[keep]
    if len(active):
        X[:, active] = Xa
    proj.project_(X)
    info = SolveInfo(it, history, res)
    if len(active):
        raise NotConverged(
            f"PCG did not reach {tol:g} in {maxiter} iterations (worst {res.max():.3e})", history
        )
    return X, info


def solve(system, cfg=None, x0=None, rhs=None, return_info=False, precond=None):
    """Solve ``system`` (or ``system.matrix`` with ``rhs``) for the
    kernel-orthogonal coefficient vector(s).

    ``precond`` reuses a preconditioner from :func:`make_preconditioner`
    across right-hand sides of the same operator.
    """
    cfg = SolveConfig() if cfg is None else cfg
    b = system.rhs if rhs is None else rhs
    if b is None:
        raise ValueError("system has no right-hand side")
    b = np.asarray(b, dtype=float)
    proj = Projector(system.kernel)
    comp = np.abs(proj.component(b))
    bn = np.linalg.norm(b, axis=0)
    if np.any(comp > cfg.compatibility_tol * np.where(bn > 0, bn, 1.0)):
        raise IncompatibleRHS(
            f"right-hand side has a kernel component {np.max(comp):.3e} "
            f"(|b| = {np.max(bn):.3e}); check the assembly"
        )
    if precond is None:
        precond = make_preconditioner(system, cfg.resolved(system.scheme))
    b = proj(b) if cfg.deflation else b
    x, info = pcg(system.matrix, b, precond, proj if cfg.deflation else None,
                  tol=cfg.tol, maxiter=cfg.maxiter, x0=x0)
    logger.info("%s solve: %d iterations, residual %.2e", system.scheme, info.iterations,
                float(np.max(info.relative_residual)))
    if return_info:
        return x, info
    return x


@dataclass
class TransferMatrix:
    matrix: np.ndarray  # (sensors, dofs)
    scheme: str
    mesh_hash: str = ""
    solves: int = 0

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, rhs):
        return self.matrix @ rhs

    def save(self, path):
        m, n = self.matrix.shape
        header = f"TRANSFERv1\nsensors {m}\ndofs {n}\nscheme {self.scheme}\nmesh {self.mesh_hash or '-'}\nend\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            lines = []
            while True:
                line = fh.readline().decode("ascii").strip()
                if line == "end":
                    break
                if not line:
                    raise ValueError(f"{path}: truncated transfer-matrix header")
                lines.append(line)
            data = fh.read()
        if lines[0] != "TRANSFERv1":
            raise ValueError(f"{path}: not a transfer-matrix file")
        meta = dict(l.split(None, 1) for l in lines[1:])
        m, n = int(meta["sensors"]), int(meta["dofs"])
        mat = np.frombuffer(data, dtype="<f8").reshape(m, n).copy()
        mesh = meta.get("mesh", "-")
        return cls(mat, meta["scheme"], "" if mesh == "-" else mesh)


def compute_transfer_matrix(system, restrictions, cfg=None, batch=16):
    """Rows t_i solving A t_i = r_i for each sensor functional r_i.

    ``restrictions`` is an (m, n) array or sparse matrix; each row must
    annihilate the constants (point evaluation minus a reference row).
    Sensor values for a right-hand side b are then ``T @ b``.
    """
    R = restrictions.toarray() if sp.issparse(restrictions) else np.asarray(restrictions, dtype=float)
    m, n = R.shape
    if n != system.n_dofs:
        raise ValueError(f"restrictions have {n} columns, system has {system.n_dofs} dofs")
    cfg = SolveConfig() if cfg is None else cfg
    proj = Projector(system.kernel)
    comp = np.abs(proj.component(R.T))
    rn = np.linalg.norm(R, axis=1)
    if np.any(comp > cfg.compatibility_tol * np.where(rn > 0, rn, 1.0)):
        raise IncompatibleRHS("sensor functionals must annihilate constants (subtract a reference row)")
    precond = make_preconditioner(system, cfg.resolved(system.scheme))
    T = np.empty((m, n))
    for start in range(0, m, batch):
        cols = proj(R[start:start + batch].T)
        X, _ = pcg(system.matrix, cols, precond, proj, tol=cfg.tol, maxiter=cfg.maxiter)
        T[start:start + batch] = X.T
    mesh = getattr(system, "mesh", None)
    return TransferMatrix(T, system.scheme, mesh.fingerprint() if mesh is not None else "", m)


def dense_reference_solve(A, b, kernel):
    """Minimum-norm least-squares solution via a dense factorisation; test oracle."""
    M = A.toarray() if hasattr(A, "toarray") else np.asarray(A)
    x = scipy.linalg.lstsq(M, b)[0]
    return Projector(kernel)(x)
