"""Compiled inner loops for the matrix-free DG operator."""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True, fastmath=True)
def face_apply_modal(X, Y, e, f, le, coef_e, coef_f, coef_pen, v0, v1, c1, d0, dcoef):
    """Skeleton part of the DG operator in face-modal form, added into ``Y``.

    On local face ``l`` the value trace of face mode ``m`` is
    ``x[v0[l, m]] + c1[l, m] * x[v1[l, m]]`` and the outward normal
    derivative is ``dcoef[l, m] * x[d0[l, m]]`` (tensor Legendre basis).
    The face modes are orthonormal, so face integrals are sums over modes.
    """
    for k in range(e.shape[0]):
        a = e[k]
        b = f[k]
        la = le[k]
        lb = la ^ 1
        ce = coef_e[k]
        cf = coef_f[k]
        pen = coef_pen[k]
        xa = X[a]
        xb = X[b]
        ya = Y[a]
        yb = Y[b]
        for m in range(4):
            ia0 = v0[la, m]
            ia1 = v1[la, m]
            ib0 = v0[lb, m]
            ib1 = v1[lb, m]
            ca = c1[la, m]
            cb = c1[lb, m]
            ja = d0[la, m]
            jb = d0[lb, m]
            dca = dcoef[la, m]
            dcb = dcoef[lb, m]
            jmp = xa[ia0] + ca * xa[ia1] - xb[ib0] - cb * xb[ib1]
            # the face normal points from a to b, so d_n u_b = -(outward derivative)
            val = pen * jmp - (ce * dca * xa[ja] - cf * dcb * xb[jb])
            ya[ia0] += val
            ya[ia1] += ca * val
            yb[ib0] -= val
            yb[ib1] -= cb * val
            ya[ja] -= ce * jmp * dca
            yb[jb] += cf * jmp * dcb


@numba.njit(cache=True, nogil=True)
def block_apply(inv, X, out):
    """out[c] = inv[c] @ X[c] for 8x8 blocks; accumulates in double."""
    for c in range(inv.shape[0]):
        for i in range(8):
            acc = 0.0
            for j in range(8):
                acc += inv[c, i, j] * X[c, j]
            out[c, i] = acc


@numba.njit(cache=True, nogil=True, fastmath=True)
def _dipole_field(dx, dy, dz, px, py, pz):
    """Unscaled dipole field p/r^3 - 3 (p.d) d / r^5 at offset d."""
    r2 = dx * dx + dy * dy + dz * dz
    inv_r3 = 1.0 / (r2 * np.sqrt(r2))
    c = 3.0 * (px * dx + py * dy + pz * dz) / r2
    return (px - c * dx) * inv_r3, (py - c * dy) * inv_r3, (pz - c * dz) * inv_r3


@numba.njit(cache=True, nogil=True, fastmath=True)
def dipole_cell_moments(corner, h, ref, w, G, pos, mom, coef, out):
    """out[c, i] += coef[c] * sum_q w[q] F(corner[c] + h ref[q]) . G[q, i]
    with F the unscaled dipole field."""
    nq = ref.shape[0]
    nb = G.shape[1]
    for c in range(corner.shape[0]):
        acc = np.zeros(nb)
        for q in range(nq):
            fx, fy, fz = _dipole_field(corner[c, 0] + h * ref[q, 0] - pos[0],
                                       corner[c, 1] + h * ref[q, 1] - pos[1],
                                       corner[c, 2] + h * ref[q, 2] - pos[2],
                                       mom[0], mom[1], mom[2])
            for i in range(nb):
                acc[i] += w[q] * (fx * G[q, i, 0] + fy * G[q, i, 1] + fz * G[q, i, 2])
        for i in range(nb):
            out[c, i] += coef[c] * acc[i]


@numba.njit(cache=True, nogil=True, fastmath=True)
def dipole_normal_field(corner, h, ref, normal, pos, mom, out):
    """out[k, q] = F(corner[k] + h ref[q]) . normal[k], F unscaled."""
    for k in range(corner.shape[0]):
        for q in range(ref.shape[0]):
            fx, fy, fz = _dipole_field(corner[k, 0] + h * ref[q, 0] - pos[0],
                                       corner[k, 1] + h * ref[q, 1] - pos[1],
                                       corner[k, 2] + h * ref[q, 2] - pos[2],
                                       mom[0], mom[1], mom[2])
            out[k, q] = fx * normal[k, 0] + fy * normal[k, 1] + fz * normal[k, 2]


@numba.njit(cache=True, nogil=True)
def embed_apply(cells, M, v, out):
    """out[c, i] = sum_j M[i, j] v[cells[c, j]]."""
    for c in range(cells.shape[0]):
        for i in range(8):
            acc = 0.0
            for j in range(8):
                acc += M[i, j] * v[cells[c, j]]
            out[c, i] = acc


@numba.njit(cache=True, nogil=True)
def embed_adjoint(cells, M, r, out):
    """out[cells[c, j]] += sum_i M[i, j] r[c, i]; ``out`` must be zeroed."""
    for c in range(cells.shape[0]):
        for j in range(8):
            acc = 0.0
            for i in range(8):
                acc += M[i, j] * r[c, i]
            out[cells[c, j]] += acc
