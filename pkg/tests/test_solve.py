import warnings

import numpy as np
import pytest

from conftest import block_mesh
from dgeeg.analytic import Dipole
from dgeeg.evalmetrics import restriction_rows, skin_sampling
from dgeeg.schemes import (ConductivityField, SourceValidityWarning, cg_system, dg_system,
                           source_conductivity)
from dgeeg.solve import (IncompatibleRHS, NotConverged, SolveConfig, TransferMatrix,
                         compute_transfer_matrix, dense_reference_solve, make_preconditioner,
                         solve)

rng = np.random.default_rng(3)


def small_system(scheme):
    labels = rng.integers(1, 3, size=(3, 2, 2))
    mesh, sk = block_mesh(labels)
    cond = ConductivityField(np.where(mesh.cell_labels == 1, 0.33, 0.01))
    build = dg_system if scheme == "dg" else cg_system
    S = build(mesh, cond, skeleton=sk)
    b = rng.standard_normal(S.n_dofs)
    S.rhs = b - S.kernel * (S.kernel @ b) / (S.kernel @ S.kernel)
    return S


@pytest.mark.parametrize("scheme", ["cg", "dg"])
@pytest.mark.parametrize("kind", ["none", "diagonal", "amg"])
def test_matches_dense_oracle(scheme, kind):
    S = small_system(scheme)
    x = solve(S, SolveConfig(tol=1e-12, preconditioner=kind))
    ref = dense_reference_solve(S.matrix, S.rhs, S.kernel)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)
    assert abs(S.kernel @ x) <= 1e-12 * np.linalg.norm(x)


def test_block_diagonal_dg():
    S = small_system("dg")
    x = solve(S, SolveConfig(tol=1e-12, preconditioner="block-diagonal"))
    assert np.allclose(x, dense_reference_solve(S.matrix, S.rhs, S.kernel), atol=1e-9 * np.abs(x).max())
    with pytest.raises(ValueError):
        SolveConfig(preconditioner="block-diagonal").resolved("cg")


def test_two_cell_dense_oracle():
    mesh, sk = block_mesh([[[1]], [[2]]])
    S = dg_system(mesh, ConductivityField(np.array([0.43, 0.01])), skeleton=sk)
    S.rhs = np.zeros(16)
    S.rhs[1], S.rhs[9] = 1.0, -1.0
    x = solve(S, SolveConfig(tol=1e-13))
    assert np.allclose(S.matrix.toarray() @ x, S.rhs, atol=1e-11)


def test_zero_rhs_gives_zero():
    S = small_system("dg")
    S.rhs = np.zeros(S.n_dofs)
    assert np.array_equal(solve(S), np.zeros(S.n_dofs))


def test_initial_guess_gauge_invariant():
    S = small_system("cg")
    cfg = SolveConfig(tol=1e-12)
    x = solve(S, cfg)
    x0 = rng.standard_normal(S.n_dofs)
    y = solve(S, cfg, x0=x0)
    z = solve(S, cfg, x0=x0 + 5.0 * S.kernel)
    assert np.allclose(x, y, atol=1e-9 * np.abs(x).max())
    assert np.allclose(y, z, atol=1e-9 * np.abs(x).max())


def test_incompatible_rhs_rejected():
    S = small_system("dg")
    S.rhs = S.rhs + 1e-2 * S.kernel
    with pytest.raises(IncompatibleRHS):
        solve(S)


def test_not_converged_reports_history():
    S = small_system("dg")
    with pytest.raises(NotConverged) as err:
        solve(S, SolveConfig(tol=1e-14, maxiter=2, preconditioner="none"))
    assert len(err.value.residual_history) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(tol=0)
    with pytest.raises(ValueError):
        SolveConfig(preconditioner="ilu")


@pytest.fixture(scope="module")
def transfer_setup(sphere8, table):
    _, mesh, sk, cond = sphere8
    samp = skin_sampling(mesh, sk, table.skin_label)
    pick = np.random.default_rng(0).choice(len(samp.points), 6, replace=False)
    pts, cells = samp.points[pick], samp.cells[pick]
    return mesh, sk, cond, pts, cells


@pytest.mark.parametrize("scheme", ["cg", "dg"])
def test_transfer_matrix_reproduces_solves(transfer_setup, scheme):
    mesh, sk, cond, pts, cells = transfer_setup
    build = dg_system if scheme == "dg" else cg_system
    R, keep = restriction_rows(mesh, scheme, pts, reference=0, cells=cells)
    cfg = SolveConfig(tol=1e-12, preconditioner="amg")
    T = compute_transfer_matrix(build(mesh, cond, skeleton=sk), R, cfg)
    assert T.shape == (len(pts) - 1, R.shape[1])
    d = Dipole([5.0, 10.0, 30.0], [0.3, -0.2, 1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SourceValidityWarning)
        S = build(mesh, cond, source_conductivity(mesh, cond, d), d, sk)
    x = solve(S, cfg, precond=make_preconditioner(S, "amg"))
    direct = R @ x
    assert np.linalg.norm(T.apply(S.rhs) - direct) <= 1e-8 * np.linalg.norm(direct)


def test_transfer_rejects_non_reference_rows():
    S = small_system("cg")
    R = np.zeros((2, S.n_dofs))
    R[0, 0] = R[1, 1] = 1.0
    with pytest.raises(IncompatibleRHS):
        compute_transfer_matrix(S, R)
    with pytest.raises(ValueError):
        compute_transfer_matrix(S, np.zeros((1, 3)))


def test_transfer_duplicate_rows_identical():
    S = small_system("cg")
    r = np.zeros(S.n_dofs)
    r[0], r[-1] = 1.0, -1.0
    T = compute_transfer_matrix(S, np.vstack([r, r]), SolveConfig(tol=1e-12))
    assert np.allclose(T.matrix[0], T.matrix[1])


def test_transfer_file_roundtrip(tmp_path):
    T = TransferMatrix(rng.standard_normal((3, 7)), "dg", "abc123")
    p = tmp_path / "t.bin"
    T.save(p)
    assert p.read_bytes().startswith(b"TRANSFERv1\n")
    U = TransferMatrix.load(p)
    assert np.array_equal(U.matrix, T.matrix) and U.scheme == "dg" and U.mesh_hash == "abc123"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE\nend\n")
    with pytest.raises(ValueError):
        TransferMatrix.load(bad)
