"""Voxel segmentations: generation of layered spheres, SEGv1 I/O and the
skin/CSF vertex-leak detector."""
from dataclasses import dataclass, field
import logging
import warnings

import numpy as np

logger = logging.getLogger(__name__)

AIR = 0


class LeakyResolutionWarning(UserWarning):
    """The voxel size is at least as large as the thinnest shell."""


@dataclass(frozen=True)
class Compartment:
    label: int
    name: str
    outer_radius_mm: float | None
    conductivity: float  # S/m


@dataclass(frozen=True)
class CompartmentTable:
    entries: tuple
    skull_label: int | None = None
    skin_label: int | None = None
    inner_labels: tuple = ()  # CSF and brain, the high-conductivity side

    def __post_init__(self):
        labels = [c.label for c in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError("compartment labels must be unique")
        if any(c.label == AIR for c in self.entries):
            raise ValueError("label 0 is reserved for air")
        if any(not c.conductivity > 0 for c in self.entries):
            raise ValueError("conductivities must be positive")

    @property
    def labels(self):
        return [c.label for c in self.entries]

    def conductivity(self, label):
        return self.by_label(label).conductivity

    def by_label(self, label):
        for c in self.entries:
            if c.label == label:
                return c
        raise KeyError(f"label {label} not in table")

    def by_name(self, name):
        for c in self.entries:
            if c.name.lower() == name.lower():
                return c
        raise KeyError(f"no compartment named {name!r}")

    def conductivity_lookup(self):
        """Array indexed by label; air maps to 0."""
        lut = np.zeros(max(self.labels) + 1)
        for c in self.entries:
            lut[c.label] = c.conductivity
        return lut

    def radii(self):
        return [c.outer_radius_mm for c in self.entries]

    def with_radius(self, name, radius_mm):
        entries = tuple(
            Compartment(c.label, c.name, float(radius_mm), c.conductivity)
            if c.name.lower() == name.lower()
            else c
            for c in self.entries
        )
        return CompartmentTable(entries, self.skull_label, self.skin_label, self.inner_labels)


def four_layer_table(brain=78.0, csf=80.0, skull=86.0, skin=92.0,
                     conductivities=(0.33, 1.79, 0.01, 0.43)):
    """Brain / CSF / skull / skin sphere, labels 1..4 from the inside."""
    names = ("brain", "csf", "skull", "skin")
    radii = (brain, csf, skull, skin)
    entries = tuple(
        Compartment(i + 1, n, float(r), float(s))
        for i, (n, r, s) in enumerate(zip(names, radii, conductivities))
    )
    return CompartmentTable(entries, skull_label=3, skin_label=4, inner_labels=(1, 2))


@dataclass
class LabelGrid:
    """Integer tissue labels on a regular grid.

    ``labels`` has shape ``dims`` in C (row-major) order; voxel ``(i, j, k)``
    occupies ``origin + spacing * [i, i+1] x [j, j+1] x [k, k+1]``.
    """

    labels: np.ndarray
    spacing_mm: float
    origin_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError("labels must be a non-empty 3D array")
        if not self.spacing_mm > 0:
            raise ValueError("spacing must be positive")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.origin_mm = np.asarray(self.origin_mm, dtype=float).reshape(3)

    @property
    def dims(self):
        return tuple(int(n) for n in self.labels.shape)

    def voxel_centers(self):
        axes = [self.origin_mm[a] + self.spacing_mm * (np.arange(n) + 0.5)
                for a, n in enumerate(self.dims)]
        return np.meshgrid(*axes, indexing="ij")

    def count(self, label=None):
        if label is None:
            return int(np.count_nonzero(self.labels))
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other):
        if not isinstance(other, LabelGrid):
            return NotImplemented
        return (self.dims == other.dims and self.spacing_mm == other.spacing_mm
                and np.array_equal(self.origin_mm, other.origin_mm)
                and np.array_equal(self.labels, other.labels))


def generate_sphere_segmentation(table, resolution_mm, grid_padding_mm=None):
    """Label voxels of concentric spheres centred at the origin.

    A voxel takes the label of the innermost compartment whose outer radius
    is >= the distance of the voxel centre to the origin. The grid is
    symmetric about the origin (voxel faces on the coordinate planes) and
    padded by ``grid_padding_mm`` of air on each side, one voxel by default.
    """
    h = float(resolution_mm)
    if not h > 0:
        raise ValueError("resolution must be positive")
    radii = table.radii()
    if any(r is None for r in radii):
        raise ValueError("sphere segmentation needs a radius for every compartment")
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ValueError(f"radii must be strictly increasing, got {radii.tolist()}")
    if grid_padding_mm is None:
        grid_padding_mm = h
    thinnest = float(np.min(np.diff(radii, prepend=0.0)))
    messages = []
    if h >= thinnest:
        msg = (f"resolution {h} mm >= thinnest shell ({thinnest} mm); "
               "the segmentation may connect non-adjacent compartments")
        warnings.warn(msg, LeakyResolutionWarning, stacklevel=2)
        messages.append(msg)

    half = int(np.ceil((radii[-1] + grid_padding_mm) / h - 1e-9))
    n = 2 * half
    origin = np.full(3, -half * h)
    c = origin[0] + h * (np.arange(n) + 0.5)
    r = np.sqrt(c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2)
    labels = np.zeros((n, n, n), dtype=np.uint8)
    for comp in sorted(table.entries, key=lambda e: e.outer_radius_mm, reverse=True):
        labels[r <= comp.outer_radius_mm] = comp.label
    grid = LabelGrid(labels, h, origin, messages)
    logger.debug("sphere segmentation %s at %g mm: %d head voxels", grid.dims, h, grid.count())
    return grid


@dataclass
class LeakReport:
    leak_vertex_count: int
    leak_vertices: np.ndarray  # flat indices into the (nx+1, ny+1, nz+1) vertex lattice
    incident_labels: list  # per leak vertex, sorted distinct labels of incident voxels
    vertex_dims: tuple

    def vertex_coordinates(self, grid):
        ijk = np.stack(np.unravel_index(self.leak_vertices, self.vertex_dims), axis=1)
        return grid.origin_mm + grid.spacing_mm * ijk


def _vertex_touch(mask):
    """Vertex-lattice mask of vertices incident to at least one True voxel."""
    nx, ny, nz = mask.shape
    out = np.zeros((nx + 1, ny + 1, nz + 1), dtype=bool)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                out[a:a + nx, b:b + ny, c:c + nz] |= mask
    return out


def detect_leaks(grid, table):
    """Vertices shared by a skin voxel and a CSF-or-brain voxel."""
    if table.skin_label is None or not table.inner_labels:
        raise ValueError("compartment table must designate skin and CSF/brain labels")
    skin = _vertex_touch(grid.labels == table.skin_label)
    inner = _vertex_touch(np.isin(grid.labels, table.inner_labels))
    leaks = np.flatnonzero(skin & inner)
    vdims = skin.shape
    incident = []
    if len(leaks):
        ijk = np.stack(np.unravel_index(leaks, vdims), axis=1)
        padded = np.pad(grid.labels, 1)
        for i, j, k in ijk:
            # voxels around vertex (i,j,k) are (i-1..i, j-1..j, k-1..k); +1 for pad
            block = padded[i:i + 2, j:j + 2, k:k + 2]
            incident.append(sorted(int(v) for v in np.unique(block)))
    return LeakReport(int(len(leaks)), leaks, incident, vdims)


# --- SEGv1 ---------------------------------------------------------------

def write_seg(path, grid, encoding="ascii"):
    if encoding not in ("ascii", "raw8"):
        raise ValueError(f"unknown SEGv1 encoding {encoding!r}")
    if grid.labels.max() > 255:
        raise ValueError("SEGv1 labels must fit in 8 bits")
    nx, ny, nz = grid.dims
    header = (
        f"dims {nx} {ny} {nz}\n"
        f"spacing_mm {float(grid.spacing_mm)!r}\n"
        f"origin_mm {' '.join(repr(float(v)) for v in grid.origin_mm)}\n"
        f"labels {encoding}\n"
    )
    flat = grid.labels.astype(np.uint8).ravel(order="C")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if encoding == "raw8":
            fh.write(flat.tobytes())
        else:
            for row in flat.reshape(-1, nz):
                fh.write((" ".join(map(str, row.tolist())) + "\n").encode("ascii"))


def read_seg(path):
    with open(path, "rb") as fh:
        head = [fh.readline().decode("ascii").split() for _ in range(4)]
        body = fh.read()
    keys = [h[0] if h else "" for h in head]
    if keys != ["dims", "spacing_mm", "origin_mm", "labels"]:
        raise ValueError(f"{path}: not a SEGv1 file (header keys {keys})")
    dims = tuple(int(v) for v in head[0][1:4])
    spacing = float(head[1][1])
    origin = np.array([float(v) for v in head[2][1:4]])
    encoding = head[3][1]
    count = dims[0] * dims[1] * dims[2]
    if encoding == "raw8":
        flat = np.frombuffer(body, dtype=np.uint8)
    elif encoding == "ascii":
        flat = np.array(body.split(), dtype=np.int64)
    else:
        raise ValueError(f"{path}: unknown label encoding {encoding!r}")
    if flat.size != count:
        raise ValueError(f"{path}: expected {count} labels, found {flat.size}")
    return LabelGrid(flat.astype(np.uint8).reshape(dims), spacing, origin)
