"""Dipole potentials: the unbounded homogeneous carrier and the layered
sphere reference.

Units: lengths in mm, conductivities in S/m, dipole moments in A*mm. With
these numbers a potential value ``u`` corresponds to ``u * POTENTIAL_TO_VOLT``
volts. The error metrics are scale invariant, so nothing downstream
depends on the factor.
"""
from dataclasses import dataclass
import math

import numpy as np

POTENTIAL_TO_VOLT = 1.0e3


class SingularPointError(ValueError):
    """Evaluation at the dipole position."""


class SeriesNotConverged(RuntimeError):
    def __init__(self, message, tail_estimate):
        super().__init__(message)
        self.tail_estimate = tail_estimate


@dataclass(frozen=True)
class Dipole:
    position: np.ndarray  # mm
    moment: np.ndarray  # A*mm
    orientation: str = "free"  # radial | tangential | free
    eccentricity: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=float).reshape(3))
        if not np.linalg.norm(self.moment) > 0:
            raise ValueError("dipole moment must be non-zero")

    def scaled(self, factor):
        return Dipole(self.position, factor * self.moment, self.orientation, self.eccentricity)


def _offsets(dipole, x):
    d = np.atleast_2d(np.asarray(x, dtype=float)) - dipole.position
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise SingularPointError("potential of a point dipole is singular at its position")
    return d, r


def u_inf(dipole, sigma_inf, x):
    """<p, x-y> / (4 pi sigma |x-y|^3); scalar for a single point."""
    d, r = _offsets(dipole, x)
    val = (d @ dipole.moment) / (4.0 * math.pi * sigma_inf * r ** 3)
    return val if np.ndim(x) > 1 else float(val[0])


def grad_u_inf(dipole, sigma_inf, x):
    """Gradient (p - 3 (p.d) d / r^2) / (4 pi sigma r^3)."""
    d, r = _offsets(dipole, x)
    p = dipole.moment
    pd = d @ p
    g = (p[None, :] - 3.0 * (pd / r ** 2)[:, None] * d) / (4.0 * math.pi * sigma_inf * r[:, None] ** 3)
    return g if np.ndim(x) > 1 else g[0]


def homogeneous_sphere_surface_potential(dipole, sigma, radius, x):
    """Closed-form potential on the surface |x| = radius of an insulated
    homogeneous sphere (the l-series summed with the generating function
    of sum a^l P_l / l)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = dipole.moment
    d = x - dipole.position
    dn = np.linalg.norm(d, axis=1)
    R = radius
    denom = R * (R * dn + R * R - x @ dipole.position)
    second = (x @ p + R * (d @ p) / dn) / denom
    return (2.0 * (d @ p) / dn ** 3 + second) / (4.0 * math.pi * sigma)


@dataclass(frozen=True)
class LayeredSphereModel:
    radii: tuple  # outer radius of each shell, increasing (mm)
    conductivities: tuple  # S/m
    order: int = 100
    tolerance: float = 1e-8  # relative tail bound
    adaptive: bool = True  # truncate early when the geometric bound allows

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        if len(radii) != len(self.conductivities) or len(radii) == 0:
            raise ValueError("need one conductivity per shell")
        if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
            raise ValueError("radii must be positive and strictly increasing")
        if any(not s > 0 for s in self.conductivities):
            raise ValueError("conductivities must be positive")
        if self.order < 1:
            raise ValueError("series order must be >= 1")

    @classmethod
    def from_table(cls, table, **kw):
        entries = sorted(table.entries, key=lambda c: c.outer_radius_mm)
        return cls(tuple(c.outer_radius_mm for c in entries),
                   tuple(c.conductivity for c in entries), **kw)


def _radial_coefficients(model, degrees):
    """Per degree l and shell k the coefficients (A, B) of
    A rho^l + B rho^-(l+1) (rho = r / outer radius) multiplying the source
    harmonic; B = 1 in the innermost shell.

    Works with interface values U = A R^l, D = B R^-(l+1): the ratio U/D is
    propagated inwards from the insulating surface (where it only decays),
    then the amplitudes outwards, so nothing cancels at high degree.
    """
    R = np.asarray(model.radii, dtype=float) / model.radii[-1]
    s = np.asarray(model.conductivities, dtype=float)
    l = degrees.astype(float)
    nshell = len(R)
    # ratio[k] = U/D of shell k evaluated at its inner interface R[k-1]
    ratio = np.zeros((nshell, len(l)))
    q = (l + 1.0) / l  # zero radial derivative at rho = 1
    for k in range(nshell - 1, 0, -1):
        q = q * (R[k - 1] / R[k]) ** (2 * l + 1)  # move from R[k] down to R[k-1]
        ratio[k] = q
        # continuity of u and sigma du/dr across R[k-1], with D_{k} = 1
        val = q + 1.0
        flux = s[k] / s[k - 1] * (l * q - (l + 1.0))
        U = ((l + 1.0) * val + flux) / (2 * l + 1)
        q = U / (val - U)
    A = np.zeros((nshell, len(l)))
    B = np.zeros((nshell, len(l)))
    B[0] = 1.0
    A[0] = q / R[0] ** (2 * l + 1) if nshell > 1 else (l + 1.0) / l
    for k in range(1, nshell):
        rk = R[k - 1]
        total = A[k - 1] * rk ** l + B[k - 1] * rk ** -(l + 1)
        D = total / (1.0 + ratio[k])
        A[k] = ratio[k] * D / rk ** l
        B[k] = D * rk ** (l + 1)
    return A, B


def _source_harmonics(dipole, sigma, unit_points, degrees, scale):
    """S_l(x_hat) with lengths in units of ``scale``:
    p . grad_y [|y|^l P_l(x_hat . y_hat)] / (4 pi sigma)."""
    y = dipole.position / scale
    p = dipole.moment / scale  # p has length dimension
    ry = np.linalg.norm(y)
    L = int(degrees.max())
    npts = len(unit_points)
    out = np.zeros((len(degrees), npts))
    if ry == 0.0:
        # only the l = 1 term survives: S_1 = p . x_hat
        if 1 in degrees:
            out[list(degrees).index(1)] = unit_points @ p
        return out / (4.0 * math.pi * sigma)
    yh = y / ry
    t = np.clip(unit_points @ yh, -1.0, 1.0)
    pr = p @ yh
    px = unit_points @ p
    # Legendre P_l and derivative via recurrence
    P = np.zeros((L + 1, npts))
    dP = np.zeros((L + 1, npts))
    P[0] = 1.0
    if L >= 1:
        P[1] = t
        dP[1] = 1.0
    for n in range(1, L):
        P[n + 1] = ((2 * n + 1) * t * P[n] - n * P[n - 1]) / (n + 1)
        dP[n + 1] = dP[n - 1] + (2 * n + 1) * P[n]
    for i, l in enumerate(degrees):
        out[i] = ry ** (l - 1) * (l * P[l] * pr + dP[l] * (px - t * pr))
    return out / (4.0 * math.pi * sigma)


def layered_sphere_potential(model, dipole, points, gauge=True, return_tail=False):
    """Potential of ``dipole`` (inside the innermost shell) in concentric
    insulated shells, evaluated at ``points`` outside the dipole radius.

    Points beyond the outer radius use the outermost shell's expansion.
    With ``gauge`` the result is mean-centred over ``points``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    scale = float(model.radii[-1])
    r = np.linalg.norm(pts, axis=1)
    r0 = np.linalg.norm(dipole.position)
    if r0 >= model.radii[0]:
        raise ValueError("dipole must lie inside the innermost shell")
    if np.any(r <= r0):
        raise ValueError("evaluation points must lie outside the dipole radius")
    N = _needed_order(model, r0 / r.min())
    degrees = np.arange(1, N + 1)
    A, B = _radial_coefficients(model, degrees)
    S = _source_harmonics(dipole, model.conductivities[0], pts / r[:, None], degrees, scale)
    shell = np.searchsorted(np.asarray(model.radii), r, side="left")
    shell = np.minimum(shell, len(model.radii) - 1)
    rho = r / scale
    terms = np.empty((N, len(pts)))
    lcol = degrees[:, None].astype(float)
    for k in np.unique(shell):
        sel = shell == k
        rr = rho[sel][None, :]
        radial = A[k][:, None] * rr ** lcol + B[k][:, None] * rr ** -(lcol + 1)
        terms[:, sel] = radial * S[:, sel]
    # potential picks up 1/scale from the 1/r^2 dipole law in scaled units
    terms /= scale
    values = terms.sum(axis=0)
    tail = _tail_estimate(terms)
    norm = np.max(np.abs(values)) if len(values) else 0.0
    if tail > model.tolerance * max(norm, np.finfo(float).tiny):
        raise SeriesNotConverged(
            f"layered-sphere series not converged at order {N}: "
            f"tail estimate {tail:.3e} (relative {tail / max(norm, 1e-300):.3e})",
            tail,
        )
    if gauge:
        values = values - values.mean()
    if return_tail:
        return values, tail
    return values


def _needed_order(model, q):
    """Truncation order: the terms decay like q^l with q = |y| / min |x|,
    so stop once that bound sits well below the tolerance; never beyond
    ``model.order`` (the tail check then decides)."""
    N = int(model.order)
    if not model.adaptive:
        return N
    if q <= 0.0:
        return min(N, 8)
    need = math.log(1e-3 * model.tolerance) / math.log(q)
    return int(min(N, max(8, math.ceil(need) + 8)))


def _tail_estimate(terms):
    """Geometric bound on the truncated remainder, max over points."""
    mags = np.abs(terms)
    if len(mags) < 3:
        return float(mags[-1].max())
    last = np.maximum(mags[-1], mags[-2])
    prev = np.maximum(mags[-2], mags[-3])
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(prev > 0, last / prev, 0.0)
    q = np.clip(q, 0.0, 0.999)
    return float(np.max(last * q / (1.0 - q)))


def layered_sphere_reference(model, dipole, points):
    """Mean-centred reference potentials (see :func:`layered_sphere_potential`)."""
    return layered_sphere_potential(model, dipole, points, gauge=True)
