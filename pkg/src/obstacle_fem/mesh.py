"""Conforming triangulations of a disk, refinement and edge topology.

Meshes are immutable: both refinement routines return a new :class:`Mesh`.
Triangles are stored counterclockwise and the local edge ``(t[0], t[1])`` is
the refinement edge used by newest-vertex bisection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

#: absolute tolerance for vertex placement and circle membership
VERTEX_TOL = 1e-12

# local edge j joins t[j] and t[(j + 1) % 3]
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class MeshError(ValueError):
    """Raised for invalid mesh input or topology."""


@dataclass(frozen=True, eq=False)
class InteriorEdges:
    """Interior edge table.

    The edge ``vertices[i] = (a, b)`` is traversed a -> b counterclockwise by
    ``left[i]`` and b -> a by ``right[i]``; ``normals[i]`` points from the
    left element into the right one.
    """

    ids: np.ndarray
    vertices: np.ndarray
    left: np.ndarray
    right: np.ndarray
    lengths: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class Mesh:
    """A conforming triangulation.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    boundary : (V,) bool array, True for vertices on the outer boundary
    radius : radius of the disk whose polygonal approximation is meshed
    conform_radius : radius of an interior circle resolved by mesh edges
    generation : (T,) int array, number of bisections since the root element
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    radius: float
    conform_radius: Optional[float] = None
    generation: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=bool))
        if self.generation is None:
            object.__setattr__(self, "generation", np.zeros(len(self.triangles), dtype=np.int64))
        for arr in (self.vertices, self.triangles, self.boundary, self.generation):
            arr.setflags(write=False)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (V, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (T, 3)")
        if len(self.boundary) != len(self.vertices):
            raise MeshError("one boundary flag per vertex required")
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise MeshError("triangle refers to a missing vertex")

    @property
    def nvertices(self) -> int:
        return len(self.vertices)

    @property
    def nelements(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        """(T, 3) lengths of the local edges."""
        p = self.vertices[self.triangles]
        return np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)

    @property
    def diameters(self) -> np.ndarray:
        """Element size h_K, the longest edge of K."""
        return self.edge_lengths.max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        nt = len(t)
        pairs = np.sort(t[:, LOCAL_EDGES].reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(nt, 3)
        if np.any(counts > 2):
            bad = edges[counts > 2]
            raise MeshError(f"non-manifold mesh: {len(bad)} edge(s) shared by more than 2 triangles, e.g. {bad[0].tolist()}")
        e2t = -np.ones((len(edges), 2), dtype=np.int64)
        order = np.argsort(inverse.ravel(), kind="stable")
        flat_edges = inverse.ravel()[order]
        elems = order // 3
        first = np.ones(len(flat_edges), dtype=bool)
        first[1:] = flat_edges[1:] != flat_edges[:-1]
        e2t[flat_edges[first], 0] = elems[first]
        e2t[flat_edges[~first], 1] = elems[~first]
        return edges, inverse, e2t

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def t2e(self) -> np.ndarray:
        """(T, 3) global edge index of each local edge."""
        return self._edge_data[1]

    @property
    def e2t(self) -> np.ndarray:
        """(E, 2) adjacent elements, second entry -1 on the boundary."""
        return self._edge_data[2]

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.e2t[:, 1] < 0)

    @cached_property
    def interior_edges(self) -> InteriorEdges:
        return build_edge_topology(self)

    def audit(self) -> list[str]:
        """Return a list of violated mesh invariants (empty when valid)."""
        problems = []
        if np.any(self.signed_areas <= 0):
            problems.append(f"{int(np.sum(self.signed_areas <= 0))} non-positive triangle(s)")
        try:
            e2t = self.e2t
        except MeshError as exc:
            return problems + [str(exc)]
        bnd = e2t[:, 1] < 0
        ends = self.edges[bnd]
        loose = ~(self.boundary[ends[:, 0]] & self.boundary[ends[:, 1]])
        if np.any(loose):
            problems.append(f"{int(loose.sum())} single-sided edge(s) off the boundary (hanging nodes)")
        r = np.linalg.norm(self.vertices, axis=1)
        if np.any(r > self.radius + VERTEX_TOL):
            problems.append("vertex outside the disk")
        used = np.zeros(self.nvertices, dtype=bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            problems.append(f"{int((~used).sum())} unused vertex(es)")
        return problems

    def on_circle(self, radius: float, tol: float = VERTEX_TOL) -> np.ndarray:
        """Vertex mask for |x| == radius within tol."""
        return np.abs(np.linalg.norm(self.vertices, axis=1) - radius) <= tol

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in radians."""
        L = self.edge_lengths
        a, b, c = L[:, 0], L[:, 1], L[:, 2]
        # angle opposite to each local edge via the law of cosines
        angles = np.stack(
            [
                np.arccos(np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1, 1)),
                np.arccos(np.clip((a**2 + c**2 - b**2) / (2 * a * c), -1, 1)),
                np.arccos(np.clip((a**2 + b**2 - c**2) / (2 * a * b), -1, 1)),
            ]
        )
        return float(angles.min())


def build_edge_topology(mesh: Mesh) -> InteriorEdges:
    """Interior edges with length, unit normal (left -> right) and neighbours.

    Raises
    ------
    MeshError
        If an edge is shared by more than two triangles.
    """
    edges, t2e, e2t = mesh._edge_data
    ids = np.flatnonzero(e2t[:, 1] >= 0)
    left = e2t[ids, 0]
    right = e2t[ids, 1]
    # orient each edge as it is traversed counterclockwise by the left element
    t = mesh.triangles[left]
    loc = np.argmax(t2e[left] == ids[:, None], axis=1)
    a = t[np.arange(len(ids)), loc]
    b = t[np.arange(len(ids)), (loc + 1) % 3]
    d = mesh.vertices[b] - mesh.vertices[a]
    lengths = np.linalg.norm(d, axis=1)
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
    return InteriorEdges(
        ids=ids,
        vertices=np.column_stack([a, b]),
        left=left,
        right=right,
        lengths=lengths,
        normals=normals,
    )


def _label_longest_edge(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Rotate each triangle cyclically so that its longest edge comes first."""
    p = points[triangles]
    lengths = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
    first = np.argmax(lengths, axis=1)
    idx = (first[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def _orient(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = points[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    out = triangles.copy()
    out[neg, 1], out[neg, 2] = triangles[neg, 2], triangles[neg, 1]
    return out


def _stitch_rings(inner: np.ndarray, outer: np.ndarray, points: np.ndarray) -> list:
    """Triangulate the annulus between two closed vertex rings.

    Both rings are index arrays ordered counterclockwise. The diagonal is
    advanced along whichever ring yields the shorter new edge.
    """
    m, n = len(inner), len(outer)
    start_angle = math.atan2(*points[inner[0]][::-1])
    outer_angles = np.arctan2(points[outer, 1], points[outer, 0])
    shift = int(np.argmin(np.abs(np.angle(np.exp(1j * (outer_angles - start_angle))))))
    outer = np.roll(outer, -shift)
    tris = []
    i = j = 0
    while i < m or j < n:
        p_i, p_next = inner[i % m], inner[(i + 1) % m]
        q_j, q_next = outer[j % n], outer[(j + 1) % n]
        if j == n:
            advance_inner = True
        elif i == m:
            advance_inner = False
        else:
            advance_inner = np.linalg.norm(points[p_next] - points[q_j]) < np.linalg.norm(
                points[q_next] - points[p_i]
            )
        if advance_inner:
            tris.append((p_i, q_j, p_next))
            i += 1
        else:
            tris.append((p_i, q_j, q_next))
            j += 1
    return tris


def generate_disk_mesh(
    radius: float, target_h: float, conform_radius: Optional[float] = None
) -> Mesh:
    """Concentric-ring triangulation of the disk ``|x| < radius``.

    Rings are spaced at most ``target_h`` apart with at least six vertices
    each; adjacent rings are stitched into quasi-equilateral triangles. With
    ``conform_radius`` one ring is placed exactly on that circle. A
    ``target_h`` of at least the radius gives a single ring (a fan of
    triangles around the center).
    """
    if not radius > 0:
        raise MeshError("radius must be positive")
    if not target_h > 0:
        raise MeshError("target_h must be positive")
    if conform_radius is not None and not 0 < conform_radius < radius:
        raise MeshError("conform_radius must satisfy 0 < conform_radius < radius")

    if conform_radius is None:
        nr = math.ceil(radius / target_h)
        radii = radius * np.arange(1, nr + 1) / nr
    else:
        n_in = max(1, math.ceil(conform_radius / target_h))
        n_out = max(1, math.ceil((radius - conform_radius) / target_h))
        radii = np.concatenate(
            [
                conform_radius * np.arange(1, n_in + 1) / n_in,
                conform_radius + (radius - conform_radius) * np.arange(1, n_out + 1) / n_out,
            ]
        )
        radii[n_in - 1] = conform_radius
    radii[-1] = radius

    points = [np.zeros((1, 2))]
    rings = [np.array([0])]
    offset = 1
    for k, r in enumerate(radii):
        n = max(6, math.ceil(2 * math.pi * r / target_h))
        theta = (np.arange(n) + 0.5 * (k % 2)) * 2 * math.pi / n
        points.append(r * np.column_stack([np.cos(theta), np.sin(theta)]))
        rings.append(offset + np.arange(n))
        offset += n
    points = np.vstack(points)

    tris = []
    first = rings[1]
    for j in range(len(first)):
        tris.append((0, first[j], first[(j + 1) % len(first)]))
    for inner, outer in zip(rings[1:-1], rings[2:]):
        tris.extend(_stitch_rings(inner, outer, points))
    triangles = _orient(points, np.array(tris, dtype=np.int64))
    triangles = _label_longest_edge(points, triangles)
    boundary = np.zeros(len(points), dtype=bool)
    boundary[rings[-1]] = True
    return Mesh(points, triangles, boundary, float(radius), conform_radius)


def _midpoints(mesh: Mesh, edge_ids: np.ndarray) -> np.ndarray:
    """Edge midpoints, projected onto the boundary or conforming circle."""
    e = mesh.edges[edge_ids]
    pts = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    on_bnd = mesh.e2t[edge_ids, 1] < 0
    if np.any(on_bnd):
        r = np.linalg.norm(pts[on_bnd], axis=1)
        pts[on_bnd] *= (mesh.radius / r)[:, None]
    if mesh.conform_radius is not None:
        ring = mesh.on_circle(mesh.conform_radius, 1e-10)
        on_ring = ring[e[:, 0]] & ring[e[:, 1]] & ~on_bnd
        if np.any(on_ring):
            r = np.linalg.norm(pts[on_ring], axis=1)
            pts[on_ring] *= (mesh.conform_radius / r)[:, None]
    return pts, on_bnd


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four via edge midpoints."""
    nv = mesh.nvertices
    ne = len(mesh.edges)
    mids, on_bnd = _midpoints(mesh, np.arange(ne))
    vertices = np.vstack([mesh.vertices, mids])
    boundary = np.concatenate([mesh.boundary, on_bnd])
    t = mesh.triangles
    m = nv + mesh.t2e  # m[:, j] is the midpoint of local edge j
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack(
        [
            np.column_stack([a, m01, m20]),
            np.column_stack([m01, b, m12]),
            np.column_stack([m20, m12, c]),
            np.column_stack([m01, m12, m20]),
        ],
        axis=1,
    ).reshape(-1, 3)
    children = _label_longest_edge(vertices, children)
    generation = np.repeat(mesh.generation + 2, 4)
    return Mesh(vertices, children, boundary, mesh.radius, mesh.conform_radius, generation)


def refine_adaptive(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Newest-vertex bisection of the marked elements with conformity closure.

    All three edges of a marked element are bisected. The closure marks the
    refinement edge of every element that has any marked edge, until no
    element would be left with a hanging node.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.nelements:
        raise MeshError("marked element id out of range")
    t2e = mesh.t2e
    edge_marked = np.zeros(len(mesh.edges), dtype=bool)
    edge_marked[t2e[marked].ravel()] = True
    while True:
        flags = edge_marked[t2e]
        need = ~flags[:, 0] & (flags[:, 1] | flags[:, 2])
        if not need.any():
            break
        edge_marked[t2e[need, 0]] = True

    new_edges = np.flatnonzero(edge_marked)
    mids, on_bnd = _midpoints(mesh, new_edges)
    nv = mesh.nvertices
    edge_to_vertex = -np.ones(len(mesh.edges), dtype=np.int64)
    edge_to_vertex[new_edges] = nv + np.arange(len(new_edges))
    vertices = np.vstack([mesh.vertices, mids])
    boundary = np.concatenate([mesh.boundary, on_bnd])

    t = mesh.triangles
    gen = mesh.generation
    flags = edge_marked[t2e]
    mid = edge_to_vertex[t2e]
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m0, m1, m2 = mid[:, 0], mid[:, 1], mid[:, 2]

    out_t = []
    out_g = []

    keep = ~flags[:, 0]
    out_t.append(t[keep])
    out_g.append(gen[keep])

    # bisection of (a, b, c) at ab gives (c, a, m0) and (b, c, m0); a child's
    # refinement edge is ca resp. bc, which are bisected again if marked
    sel = flags[:, 0] & ~flags[:, 1] & ~flags[:, 2]
    out_t += [np.column_stack([c, a, m0])[sel], np.column_stack([b, c, m0])[sel]]
    out_g += [gen[sel] + 1] * 2

    sel = flags[:, 0] & flags[:, 1] & ~flags[:, 2]
    out_t += [
        np.column_stack([c, a, m0])[sel],
        np.column_stack([m0, b, m1])[sel],
        np.column_stack([c, m0, m1])[sel],
    ]
    out_g += [gen[sel] + 1, gen[sel] + 2, gen[sel] + 2]

    sel = flags[:, 0] & ~flags[:, 1] & flags[:, 2]
    out_t += [
        np.column_stack([m0, c, m2])[sel],
        np.column_stack([a, m0, m2])[sel],
        np.column_stack([b, c, m0])[sel],
    ]
    out_g += [gen[sel] + 2, gen[sel] + 2, gen[sel] + 1]

    sel = flags[:, 0] & flags[:, 1] & flags[:, 2]
    out_t += [
        np.column_stack([m0, c, m2])[sel],
        np.column_stack([a, m0, m2])[sel],
        np.column_stack([m0, b, m1])[sel],
        np.column_stack([c, m0, m1])[sel],
    ]
    out_g += [gen[sel] + 2] * 4

    triangles = np.vstack(out_t)
    generation = np.concatenate(out_g)
    return Mesh(vertices, triangles, boundary, mesh.radius, mesh.conform_radius, generation)


MESH_HEADER = "obstacle-mesh v1"


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format (17 significant digits)."""
    lines = [MESH_HEADER, str(mesh.nvertices)]
    for (x, y), flag in zip(mesh.vertices, mesh.boundary):
        lines.append(f"{x:.17g} {y:.17g} {int(flag)}")
    lines.append(str(mesh.nelements))
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, radius: Optional[float] = None, conform_radius: Optional[float] = None) -> Mesh:
    """Read the plain-text mesh format written by :func:`write_mesh`.

    The disk radius is not stored in the file; by default it is taken as the
    largest boundary vertex radius.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != MESH_HEADER:
        raise MeshError(f"{path}: missing '{MESH_HEADER}' header")
    try:
        nv = int(lines[1])
        vrows = [ln.split() for ln in lines[2 : 2 + nv]]
        vertices = np.array([[float(x), float(y)] for x, y, _ in vrows])
        boundary = np.array([int(f) != 0 for _, _, f in vrows])
        nt = int(lines[2 + nv])
        triangles = np.array(
            [[int(v) for v in ln.split()] for ln in lines[3 + nv : 3 + nv + nt]], dtype=np.int64
        ).reshape(-1, 3)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed mesh file ({exc})") from exc
    if len(triangles) != nt or len(vertices) != nv:
        raise MeshError(f"{path}: truncated mesh file")
    if radius is None:
        r = np.linalg.norm(vertices[boundary], axis=1) if boundary.any() else np.linalg.norm(vertices, axis=1)
        radius = float(r.max())
    return Mesh(vertices, triangles, boundary, radius, conform_radius)
