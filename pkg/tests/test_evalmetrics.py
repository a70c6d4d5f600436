import math

import numpy as np
import pytest

from dgeeg.analytic import Dipole, SingularPointError
from dgeeg.evalmetrics import (ForwardSolution, FluxField, check_conservation, evaluate_potential,
                               flux_field, ln_mag, local_flux_metrics, place_sources,
                               read_metrics_csv, rdm, surface_errors, write_metrics_csv)
from dgeeg.pipeline import SphereExperiment
from dgeeg.solve import SolveConfig

rng = np.random.default_rng(7)


def test_rdm_values():
    u = np.array([1.0, -1.0, 2.0])
    assert rdm(u, u) == 0.0
    assert math.isclose(rdm(u, -u), 2.0)
    assert math.isclose(rdm([1.0, 0.0], [0.0, 1.0]), math.sqrt(2))
    assert rdm(u, 3.7 * u) <= 1e-15


def test_lnmag_values():
    u = rng.standard_normal(20)
    assert math.isclose(ln_mag(2 * u, u), math.log(2))
    assert math.isclose(ln_mag(1.01 * u, u), 0.00995033, rel_tol=1e-6)
    assert ln_mag(-u, u) == 0.0


def test_metric_input_errors():
    with pytest.raises(ValueError):
        rdm([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        ln_mag([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        rdm([1.0, 2.0, 3.0], [1.0, 2.0])


def test_surface_errors_need_centred_input():
    u = rng.standard_normal(30)
    u -= u.mean()
    v = 0.9 * u + 0.01 * rng.standard_normal(30)
    v -= v.mean()
    r, m = surface_errors(v, u)
    assert r == rdm(v, u) and m == ln_mag(v, u)
    with pytest.raises(ValueError):
        surface_errors(v + 1.0, u)


def test_place_sources():
    ds = place_sources(78.0, [0.0, 0.987], 5, seed=3)
    assert len(ds) == 10
    for d in ds[:5]:
        assert np.allclose(d.position, 0) and np.allclose(d.moment, [0, 0, 1])
    for d in ds[5:]:
        assert math.isclose(np.linalg.norm(d.position), 76.986, rel_tol=1e-12)
        assert np.allclose(d.moment, d.position / np.linalg.norm(d.position))
    again = place_sources(78.0, [0.0, 0.987], 5, seed=3)
    assert all(np.array_equal(a.position, b.position) for a, b in zip(ds, again))
    tang = place_sources(78.0, [0.5], 20, orientation="tangential", seed=1)
    for d in tang:
        assert abs(d.moment @ d.position) <= 1e-12 * np.linalg.norm(d.position)
        assert math.isclose(np.linalg.norm(d.moment), 1.0)
    with pytest.raises(ValueError):
        place_sources(78.0, [1.0], 1)
    with pytest.raises(ValueError):
        place_sources(78.0, [0.5], 1, orientation="oblique")


def test_local_flux_metrics():
    j = rng.standard_normal((10, 3))
    ln_loc, diff = local_flux_metrics(j, j)
    assert np.all(ln_loc == 0) and np.all(diff == 0)
    ln_loc, _ = local_flux_metrics(2 * j, j)
    assert np.allclose(ln_loc, math.log(2))
    z = j.copy()
    z[3] = 0
    assert np.isnan(local_flux_metrics(z, j)[0][3])
    f = FluxField(j, np.array([5]))
    assert np.isnan(local_flux_metrics(f, j)[0][5])
    with pytest.raises(ValueError):
        local_flux_metrics(j, j[:5])


def test_csv_roundtrip(tmp_path):
    rows = [dict(scheme="dg", model="m", seed=0, eccentricity=0.5, dipole_id=i,
                 orientation="radial", rdm=0.1 * i, lnmag=-0.01, excluded_flag=0) for i in range(3)]
    rows[1]["rdm"] = math.nan
    p = tmp_path / "m.csv"
    write_metrics_csv(p, rows, comment="run a\nseed 0")
    assert p.read_text().startswith("# run a\n# seed 0\n")
    back = read_metrics_csv(p)
    assert len(back) == 3 and back[2]["rdm"] == pytest.approx(0.2) and math.isnan(back[1]["rdm"])


# --- on real solutions --------------------------------------------------------------

@pytest.fixture(scope="module")
def exp8(table):
    return SphereExperiment(table, 8.0, 8.0)


@pytest.fixture(scope="module")
def solutions(exp8):
    d = Dipole([4.0, -6.0, 31.0], [0.3, 0.1, 1.0])
    cfg = SolveConfig(tol=1e-10, preconditioner="amg")
    return {s: exp8.forward(s, d, cfg) for s in ("cg", "dg")}


def test_forward_solution_validation(exp8, solutions):
    sol = solutions["dg"]
    with pytest.raises(ValueError):
        ForwardSolution("dg", sol.coefficients[:-8], exp8.mesh, exp8.cond, sol.split, sol.dipole)
    with pytest.raises(ValueError):
        ForwardSolution("fv", sol.coefficients, exp8.mesh, exp8.cond, sol.split, sol.dipole)


@pytest.mark.parametrize("scheme", ["cg", "dg"])
def test_potential_gauge_invariant(exp8, solutions, scheme):
    sol = solutions[scheme]
    u = exp8.surface(sol)
    shifted = ForwardSolution(scheme, sol.coefficients + 3.0 * _kernel(exp8, scheme), exp8.mesh,
                              exp8.cond, sol.split, sol.dipole)
    assert np.allclose(exp8.surface(shifted), u, atol=1e-12 * np.abs(u).max())
    assert abs(u.mean()) <= 1e-12 * np.abs(u).max()
    r, _ = surface_errors(u, exp8.reference(sol.dipole))
    assert r < 0.5  # sanity only: 8 mm voxels barely resolve the skull


def _kernel(exp, scheme):
    if scheme == "cg":
        return np.ones(exp.mesh.n_vertices)
    k = np.zeros(8 * exp.mesh.n_cells)
    k[::8] = 1
    return k


def test_cg_vertex_evaluation(exp8, solutions):
    sol = solutions["cg"]
    v = exp8.mesh.cells[10]
    cells = np.full(8, 10)
    assert np.allclose(sol.correction(exp8.mesh.vertices[v], cells), sol.coefficients[v])


def test_point_outside_mesh(solutions):
    with pytest.raises(ValueError):
        evaluate_potential(solutions["dg"], [[500.0, 0, 0]])


def test_flux_singular_at_centroid(exp8):
    c = exp8.mesh.centroids()[np.argmin(np.linalg.norm(exp8.mesh.centroids(), axis=1))]
    d = Dipole(c, [0, 0, 1])
    sol = exp8.forward("dg", d, SolveConfig(tol=1e-8, preconditioner="amg"))
    with pytest.raises(SingularPointError):
        flux_field(sol)
    f = flux_field(sol, exclude_singular=True)
    assert len(f.singular) == 1 and np.all(np.isfinite(f.j))


def test_dg_conservation(exp8, solutions):
    rep = check_conservation(solutions["dg"], exp8.operator("dg"))
    assert rep.relative() <= 1e-6
    with pytest.raises(NotImplementedError):
        check_conservation(solutions["cg"], exp8.operator("dg"))


def test_unconverged_dg_violates_conservation(exp8, solutions):
    sol = solutions["dg"]
    noisy = ForwardSolution("dg", sol.coefficients + 1e-3 * np.abs(sol.coefficients).max()
                            * rng.standard_normal(len(sol.coefficients)), exp8.mesh, exp8.cond,
                            sol.split, sol.dipole, exp8.skeleton)
    assert check_conservation(noisy, exp8.operator("dg")).relative() > 1e-3
