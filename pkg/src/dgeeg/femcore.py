"""Reference-element machinery for axis-aligned hexahedra.

Everything here lives on the unit reference cube [0, 1]^3. A physical cell
of edge ``h`` with lower corner ``x0`` maps by ``x = x0 + h * xi`` so
physical gradients are reference gradients divided by ``h``.

Local vertex ``l`` of a cell sits at offset ``(l >> 2 & 1, l >> 1 & 1, l & 1)``
(row-major tensor order, z fastest).  Local faces are numbered
``-x, +x, -y, +y, -z, +z``, i.e. face ``2*axis + side``.
"""
from dataclasses import dataclass
import math

import numpy as np

CG_TRILINEAR = "cg_trilinear"
DG_ORTHONORMAL_Q1 = "dg_orthonormal_q1"

MAX_QUADRATURE_DEGREE = 13

# vertex offsets, shape (8, 3)
VERTEX_OFFSETS = np.array(
    [[(l >> 2) & 1, (l >> 1) & 1, l & 1] for l in range(8)], dtype=np.int64
)

# monomial exponents in the fixed order 1, x, y, z, xy, xz, yz, xyz
MONOMIAL_EXPONENTS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 1, 0],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ],
    dtype=np.int64,
)


def face_axis(local_face):
    return local_face // 2


def face_side(local_face):
    return local_face % 2


def face_vertices(local_face):
    """Local vertex ids lying on ``local_face``."""
    axis, side = divmod(local_face, 2)
    return np.flatnonzero(VERTEX_OFFSETS[:, axis] == side)


@dataclass(frozen=True)
class QuadratureRule:
    entity: str
    points: np.ndarray  # (n, 3) for cells, (n, 2) for faces
    weights: np.ndarray  # (n,)
    degree: int

    def __len__(self):
        return len(self.weights)


def quadrature_rule(entity, degree):
    """Tensor Gauss-Legendre rule on the unit cube (``"cell"``) or unit
    square (``"face"``) that is exact for tensor polynomials of ``degree``
    in each variable."""
    if entity not in ("cell", "face"):
        raise ValueError(f"unknown entity {entity!r}")
    degree = int(degree)
    if degree < 1:
        raise ValueError("quadrature degree must be >= 1")
    if degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(
            f"quadrature degree {degree} unsupported (max {MAX_QUADRATURE_DEGREE})"
        )
    npts = math.ceil((degree + 1) / 2)
    x, w = np.polynomial.legendre.leggauss(npts)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    dim = 3 if entity == "cell" else 2
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return QuadratureRule(entity, points, weights, degree)


def face_to_cell_points(local_face, face_points):
    """Embed 2D face coordinates into reference-cell coordinates.

    The two tangential coordinates keep their axis order, so the same face
    point seen from the two cells sharing a face maps to the same physical
    location.
    """
    axis, side = divmod(local_face, 2)
    face_points = np.atleast_2d(face_points)
    out = np.empty((len(face_points), 3))
    tangential = [a for a in range(3) if a != axis]
    out[:, axis] = float(side)
    out[:, tangential[0]] = face_points[:, 0]
    out[:, tangential[1]] = face_points[:, 1]
    return out


class BasisSet:
    """Eight Q1 shape functions on the reference cube.

    ``kind`` is either :data:`CG_TRILINEAR` (nodal hat functions) or
    :data:`DG_ORTHONORMAL_Q1`.  DG functions are stored as coefficients
    over the centred monomials and are orthonormal for the scaled inner
    product ``(1/|E|) int_E u v dx``, so the first one is identically 1.
    """

    count = 8

    def __init__(self, kind, coefficients=None):
        if kind not in (CG_TRILINEAR, DG_ORTHONORMAL_Q1):
            raise ValueError(f"unknown basis kind {kind!r}")
        if kind == DG_ORTHONORMAL_Q1 and coefficients is None:
            raise ValueError("DG basis needs monomial coefficients")
        self.kind = kind
        self.coefficients = coefficients

    def __repr__(self):
        return f"BasisSet({self.kind!r})"

    def evaluate(self, ref_points):
        """Values ``(n, 8)`` and reference gradients ``(n, 8, 3)``."""
        xi = np.atleast_2d(np.asarray(ref_points, dtype=float))
        if self.kind == CG_TRILINEAR:
            return _trilinear(xi)
        vals, grads = _centred_monomials(xi)
        c = self.coefficients
        return vals @ c.T, np.einsum("ij,njk->nik", c, grads)


def _trilinear(xi):
    n = len(xi)
    # 1D factors: f[a][d] is the factor for offset d along axis a
    f = np.stack([1.0 - xi, xi], axis=1)  # (n, 2, 3)
    df = np.array([-1.0, 1.0])
    vals = np.empty((n, 8))
    grads = np.empty((n, 8, 3))
    for l, (ox, oy, oz) in enumerate(VERTEX_OFFSETS):
        fx, fy, fz = f[:, ox, 0], f[:, oy, 1], f[:, oz, 2]
        vals[:, l] = fx * fy * fz
        grads[:, l, 0] = df[ox] * fy * fz
        grads[:, l, 1] = fx * df[oy] * fz
        grads[:, l, 2] = fx * fy * df[oz]
    return vals, grads


def _centred_monomials(xi):
    c = xi - 0.5
    n = len(c)
    vals = np.ones((n, 8))
    grads = np.zeros((n, 8, 3))
    for j, e in enumerate(MONOMIAL_EXPONENTS):
        vals[:, j] = np.prod(np.where(e == 1, c, 1.0), axis=1)
        for a in range(3):
            if e[a]:
                others = [b for b in range(3) if b != a and e[b]]
                grads[:, j, a] = np.prod(c[:, others], axis=1) if others else 1.0
    return vals, grads


def cg_basis():
    return BasisSet(CG_TRILINEAR)


def orthonormalize_broken_basis(degree=3):
    """Gram-Schmidt on the centred Q1 monomials {1,x,y,z,xy,xz,yz,xyz}.

    The inner product is the reference-cube L2 product, evaluated with a
    tensor Gauss rule that is exact for the degree-2-per-axis products.
    """
    rule = quadrature_rule("cell", degree)
    mvals, _ = _centred_monomials(rule.points)
    w = rule.weights
    coeffs = np.zeros((8, 8))
    for i in range(8):
        c = np.zeros(8)
        c[i] = 1.0
        v = mvals @ c
        for j in range(i):
            u = mvals @ coeffs[j]
            c = c - np.sum(w * v * u) * coeffs[j]
            v = mvals @ c
        c /= math.sqrt(np.sum(w * v * v))
        coeffs[i] = c
    return BasisSet(DG_ORTHONORMAL_Q1, coeffs)


def dg_basis():
    return orthonormalize_broken_basis()


def eval_basis(basis, ref_point):
    """Values (8,) and reference gradients (8, 3) at a single point.

    Physical gradients on a cell of edge h are ``ref_gradients / h``.
    """
    p = np.asarray(ref_point, dtype=float)
    if p.shape != (3,):
        raise ValueError("reference point must have 3 coordinates")
    vals, grads = basis.evaluate(p[None, :])
    return vals[0], grads[0]


def reference_stiffness(basis, degree=3):
    """int over the unit cube of grad(phi_i) . grad(phi_j)."""
    rule = quadrature_rule("cell", degree)
    _, g = basis.evaluate(rule.points)
    return np.einsum("q,qik,qjk->ij", rule.weights, g, g)


def reference_mass(basis, degree=3):
    rule = quadrature_rule("cell", degree)
    v, _ = basis.evaluate(rule.points)
    return np.einsum("q,qi,qj->ij", rule.weights, v, v)


def cg_to_dg_map(degree=3):
    """Per-cell map from the 8 vertex values of a trilinear function to its
    coefficients in the orthonormal DG basis (exact, since Q1 is shared)."""
    rule = quadrature_rule("cell", degree)
    dg_vals, _ = dg_basis().evaluate(rule.points)
    cg_vals, _ = cg_basis().evaluate(rule.points)
    return np.einsum("q,qi,qj->ij", rule.weights, dg_vals, cg_vals)
