"""Structured hexahedral meshes cut out of label grids, their face skeleton
and legacy VTK export."""
from dataclasses import dataclass
import hashlib

import numpy as np

from .femcore import VERTEX_OFFSETS
from .voxelgeom import AIR


@dataclass
class HexMesh:
    """Axis-aligned cubes of edge ``h`` on a lattice.

    ``cell_ijk`` are lattice indices of each cell; ``cell_index`` maps the
    full lattice back to cell ids (-1 outside the head). ``cells`` lists the
    8 vertex ids per cell in :data:`dgeeg.femcore.VERTEX_OFFSETS` order.
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_labels: np.ndarray
    h: float
    origin: np.ndarray
    cell_ijk: np.ndarray
    cell_index: np.ndarray

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def cell_volume(self):
        return self.h ** 3

    @property
    def lattice_dims(self):
        return self.cell_index.shape

    def cell_origins(self):
        return self.origin + self.h * self.cell_ijk

    def centroids(self):
        return self.origin + self.h * (self.cell_ijk + 0.5)

    def fingerprint(self):
        """Short content hash used to tag exported matrices."""
        m = hashlib.sha1()
        m.update(np.float64(self.h).tobytes())
        m.update(np.asarray(self.origin, dtype=np.float64).tobytes())
        m.update(np.ascontiguousarray(self.cell_ijk, dtype=np.int64).tobytes())
        m.update(np.ascontiguousarray(self.cell_labels, dtype=np.int64).tobytes())
        return m.hexdigest()[:16]

    def locate(self, points, tol=1e-9):
        """Cell id containing each point, -1 if none.

        Points on shared faces, edges or vertices go to the lowest cell id
        among the cells whose closure contains them.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        t = (p - self.origin) / self.h
        base = np.floor(t + tol).astype(np.int64)
        on_plane = np.abs(t - np.rint(t)) <= tol
        dims = np.array(self.lattice_dims)
        best = np.full(len(p), np.iinfo(np.int64).max)
        for off in VERTEX_OFFSETS:
            # offset 1 along an axis means "step back", only legal on a lattice plane
            if np.any(off):
                valid = np.all(on_plane[:, off == 1], axis=1)
            else:
                valid = np.ones(len(p), dtype=bool)
            ijk = base - off
            valid &= np.all((ijk >= 0) & (ijk < dims), axis=1)
            ids = np.full(len(p), -1)
            if valid.any():
                ii = ijk[valid]
                ids[valid] = self.cell_index[ii[:, 0], ii[:, 1], ii[:, 2]]
            ok = ids >= 0
            best[ok] = np.minimum(best[ok], ids[ok])
        best[best == np.iinfo(np.int64).max] = -1
        return best

    def reference_coordinates(self, points, cell_ids):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (p - self.origin - self.h * self.cell_ijk[cell_ids]) / self.h


def build_hex_mesh(grid, mesh_resolution_mm=None):
    """Split every non-air voxel into r^3 cubes, r = spacing / h."""
    h = float(grid.spacing_mm if mesh_resolution_mm is None else mesh_resolution_mm)
    if not h > 0:
        raise ValueError("mesh resolution must be positive")
    ratio = grid.spacing_mm / h
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"mesh resolution {h} mm does not divide voxel size {grid.spacing_mm} mm"
        )
    labels = grid.labels
    if r > 1:
        labels = labels.repeat(r, axis=0).repeat(r, axis=1).repeat(r, axis=2)
    mask = labels != AIR
    if not mask.any():
        raise ValueError("label grid contains no head voxels")

    cell_ijk = np.argwhere(mask)  # C order
    n_cells = len(cell_ijk)
    cell_index = np.full(labels.shape, -1, dtype=np.int64)
    cell_index[mask] = np.arange(n_cells)

    nx, ny, nz = labels.shape
    used = np.zeros((nx + 1, ny + 1, nz + 1), dtype=bool)
    for ox, oy, oz in VERTEX_OFFSETS:
        used[ox:ox + nx, oy:oy + ny, oz:oz + nz] |= mask
    vertex_index = np.full(used.shape, -1, dtype=np.int64)
    vertex_index[used] = np.arange(int(used.sum()))
    vertex_ijk = np.argwhere(used)
    origin = np.asarray(grid.origin_mm, dtype=float)
    vertices = origin + h * vertex_ijk

    cells = np.empty((n_cells, 8), dtype=np.int64)
    for l, off in enumerate(VERTEX_OFFSETS):
        v = cell_ijk + off
        cells[:, l] = vertex_index[v[:, 0], v[:, 1], v[:, 2]]

    return HexMesh(
        vertices=vertices,
        cells=cells,
        cell_labels=labels[mask].astype(np.int64),
        h=h,
        origin=origin,
        cell_ijk=cell_ijk,
        cell_index=cell_index,
    )


@dataclass
class Skeleton:
    """Internal faces (one per face-adjacent cell pair) and boundary faces.

    Internal face ``k`` couples ``e[k]`` and ``f[k]`` through local faces
    ``local_e[k]`` / ``local_f[k]``; ``normal[k]`` points from e to f.
    """

    e: np.ndarray
    f: np.ndarray
    local_e: np.ndarray
    local_f: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    boundary_cell: np.ndarray
    boundary_local: np.ndarray
    boundary_normal: np.ndarray
    boundary_area: np.ndarray

    @property
    def n_internal(self):
        return len(self.e)

    @property
    def n_boundary(self):
        return len(self.boundary_cell)

    def flipped(self, which=None):
        """Copy with the orientation of the selected internal faces reversed."""
        sel = np.ones(self.n_internal, dtype=bool) if which is None else np.asarray(which)
        e = np.where(sel, self.f, self.e)
        f = np.where(sel, self.e, self.f)
        le = np.where(sel, self.local_f, self.local_e)
        lf = np.where(sel, self.local_e, self.local_f)
        n = np.where(sel[:, None], -self.normal, self.normal)
        return Skeleton(e, f, le, lf, n, self.area.copy(), self.boundary_cell,
                        self.boundary_local, self.boundary_normal, self.boundary_area)


def compute_skeleton(mesh):
    ci = mesh.cell_index
    area = mesh.h ** 2
    es, fs, les, lfs, ns = [], [], [], [], []
    bc, bl, bn = [], [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = ci[tuple(lo)]
        b = ci[tuple(hi)]
        both = (a >= 0) & (b >= 0)
        e = a[both]
        f = b[both]
        n = np.zeros((len(e), 3))
        n[:, axis] = 1.0
        es.append(e)
        fs.append(f)
        les.append(np.full(len(e), 2 * axis + 1))
        lfs.append(np.full(len(e), 2 * axis))
        ns.append(n)

        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        padded = np.pad(ci, pad, constant_values=-1)
        for side in (0, 1):
            sl = [slice(None)] * 3
            sl[axis] = slice(0, -2) if side == 0 else slice(2, None)
            neighbour = padded[tuple(sl)]
            cells = ci[(ci >= 0) & (neighbour < 0)]
            bc.append(cells)
            bl.append(np.full(len(cells), 2 * axis + side))
            nn = np.zeros((len(cells), 3))
            nn[:, axis] = 1.0 if side else -1.0
            bn.append(nn)

    e = np.concatenate(es)
    f = np.concatenate(fs)
    le = np.concatenate(les)
    lf = np.concatenate(lfs)
    normal = np.concatenate(ns)
    order = np.lexsort((le, e))
    bcell = np.concatenate(bc)
    blocal = np.concatenate(bl)
    bnormal = np.concatenate(bn)
    border = np.lexsort((blocal, bcell))
    return Skeleton(
        e=e[order], f=f[order], local_e=le[order], local_f=lf[order],
        normal=normal[order], area=np.full(len(e), area),
        boundary_cell=bcell[border], boundary_local=blocal[border],
        boundary_normal=bnormal[border], boundary_area=np.full(len(bcell), area),
    )


def face_centroids(mesh, cells, local_faces):
    """Physical centroids of cell faces."""
    from .femcore import face_to_cell_points
    out = np.empty((len(cells), 3))
    for lf in range(6):
        sel = local_faces == lf
        if sel.any():
            ref = face_to_cell_points(lf, np.array([[0.5, 0.5]]))[0]
            out[sel] = mesh.origin + mesh.h * (mesh.cell_ijk[cells[sel]] + ref)
    return out


# VTK_HEXAHEDRON corner order expressed in local vertex ids
_VTK_HEX_ORDER = np.array([0, 4, 6, 2, 1, 5, 7, 3])


def _fmt(values):
    return " ".join(format(float(v), ".9g") for v in values)


def write_vtk(path, mesh, cell_data=None, title="dgeeg hexahedral mesh"):
    """Legacy ASCII unstructured grid; ``cell_data`` maps names to arrays of
    shape (n_cells,) (scalars) or (n_cells, 3) (vectors). ``label`` is always
    written first."""
    arrays = {"label": mesh.cell_labels}
    arrays.update(cell_data or {})
    n = mesh.n_cells
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title[:255] + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            fh.write(_fmt(p) + "\n")
        fh.write(f"CELLS {n} {9 * n}\n")
        for c in mesh.cells[:, _VTK_HEX_ORDER]:
            fh.write("8 " + " ".join(map(str, c.tolist())) + "\n")
        fh.write(f"CELL_TYPES {n}\n")
        fh.write("12\n" * n)
        fh.write(f"CELL_DATA {n}\n")
        for name, values in arrays.items():
            values = np.asarray(values)
            if len(values) != n:
                raise ValueError(f"cell array {name!r} has {len(values)} entries, mesh has {n} cells")
            if values.ndim == 2:
                fh.write(f"VECTORS {name} double\n")
                for v in values:
                    fh.write(_fmt(v) + "\n")
            elif np.issubdtype(values.dtype, np.integer):
                fh.write(f"SCALARS {name} int 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(map(str, values.tolist())) + "\n")
            else:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(format(float(v), ".9g") for v in values) + "\n")
