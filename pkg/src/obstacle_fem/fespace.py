"""Quadrature, reference bases and degree-of-freedom maps.

Supported families: ``P1``, ``P2``, ``P1_bubble`` and ``P2_bubble`` for the
displacement, ``P0_disc`` (one characteristic function per element) for the
multiplier. The bubble is ``27 l1 l2 l3`` with peak value one at the
barycenter.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np

from .mesh import Mesh


class Family(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P1_bubble = "P1_bubble"
    P2_bubble = "P2_bubble"
    P0_disc = "P0_disc"


@dataclass(frozen=True)
class SpaceSpec:
    family: Family
    dirichlet: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family is Family.P0_disc and self.dirichlet:
            object.__setattr__(self, "dirichlet", False)

    @property
    def degree(self) -> int:
        return {"P1": 1, "P1_bubble": 1, "P2": 2, "P2_bubble": 2, "P0_disc": 0}[self.family.value]

    @property
    def has_bubble(self) -> bool:
        return self.family in (Family.P1_bubble, Family.P2_bubble)

    @property
    def nlocal(self) -> int:
        return {"P1": 3, "P1_bubble": 4, "P2": 6, "P2_bubble": 7, "P0_disc": 1}[self.family.value]


def displacement_space(k: int, bubble: bool = False) -> SpaceSpec:
    if k not in (1, 2):
        raise ValueError(f"degree k must be 1 or 2, got {k}")
    name = f"P{k}_bubble" if bubble else f"P{k}"
    return SpaceSpec(Family(name), dirichlet=True)


MULTIPLIER_SPACE = SpaceSpec(Family.P0_disc, dirichlet=False)


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric rule on the reference triangle (0,0), (1,0), (0,1).

    ``points`` are barycentric (nq, 3); ``weights`` sum to 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, 1:]


def _orbit(coords, weight):
    pts = sorted(set(itertools.permutations(coords)))
    return [list(p) for p in pts], [weight] * len(pts)


def _build(order, orbits):
    pts, wts = [], []
    for coords, w in orbits:
        p, ws = _orbit(coords, w)
        pts += p
        wts += ws
    return QuadratureRule(np.array(pts), np.array(wts), order)


@lru_cache(maxsize=None)
def _rules():
    a4, w4a = 0.44594849091596483, 0.11169079483900568
    b4, w4b = 0.09157621350977077, 0.05497587182766098
    a6, w6a = 0.2492867451708855, 0.05839313786321103
    b6, w6b = 0.06308901449150758, 0.025422453185107125
    c6, d6, w6c = 0.05314504984479894, 0.3103524510338034, 0.041425537809174254
    return {
        1: _build(1, [((1 / 3, 1 / 3, 1 / 3), 0.5)]),
        2: _build(2, [((2 / 3, 1 / 6, 1 / 6), 1 / 6)]),
        4: _build(4, [((1 - 2 * a4, a4, a4), w4a), ((1 - 2 * b4, b4, b4), w4b)]),
        6: _build(
            6,
            [
                ((1 - 2 * a6, a6, a6), w6a),
                ((1 - 2 * b6, b6, b6), w6b),
                ((c6, d6, 1 - c6 - d6), w6c),
            ],
        ),
    }


def quadrature_rule(order: int) -> QuadratureRule:
    """Positive-weight rule exact for polynomials of total degree <= order.

    Orders 3 and 5 are served by the degree 4 and 6 rules.
    """
    if not 1 <= order <= 6:
        raise ValueError(f"unsupported quadrature order {order}; expected 1..6")
    rules = _rules()
    return rules[min(k for k in rules if k >= order)]


def gauss_line(npoints: int = 3):
    """Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w


# --------------------------------------------------------------------------
# element geometry and bases


@dataclass(frozen=True)
class Geometry:
    """Affine maps of a set of triangles.

    ``grad_lam[k, i]`` is the constant gradient of barycentric coordinate i
    on element k; ``detj`` equals twice the element area.
    """

    corners: np.ndarray
    grad_lam: np.ndarray
    detj: np.ndarray

    @classmethod
    def from_corners(cls, corners: np.ndarray) -> "Geometry":
        corners = np.asarray(corners, dtype=float)
        if corners.ndim == 2:
            corners = corners[None]
        d1 = corners[:, 1] - corners[:, 0]
        d2 = corners[:, 2] - corners[:, 0]
        detj = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        # gradient of l_i is the rotated opposite edge over detj
        opp = corners[:, [2, 0, 1]] - corners[:, [1, 2, 0]]
        grad = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / detj[:, None, None]
        return cls(corners, grad, detj)

    @classmethod
    def from_mesh(cls, mesh: Mesh, elements: Optional[np.ndarray] = None) -> "Geometry":
        t = mesh.triangles if elements is None else mesh.triangles[elements]
        return cls.from_corners(mesh.vertices[t])

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * np.abs(self.detj)

    def to_physical(self, lam: np.ndarray) -> np.ndarray:
        """Map barycentric points (nq, 3) to (nt, nq, 2)."""
        return np.einsum("qi,kid->kqd", lam, self.corners)


def basis(family, lam: np.ndarray, geom: Geometry):
    """Values, gradients and Laplacians of all local basis functions.

    Parameters
    ----------
    family : Family or str
    lam : (nq, 3) barycentric coordinates of the evaluation points
    geom : Geometry of nt elements

    Returns
    -------
    values : (nb, nq)
    grads : (nt, nb, nq, 2)
    laps : (nt, nb, nq)

    The local ordering is vertices, then edges (01, 12, 20), then the bubble.
    """
    family = Family(family)
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    nq = lam.shape[0]
    G = geom.grad_lam  # (nt, 3, 2)
    nt = G.shape[0]
    if family is Family.P0_disc:
        return np.ones((1, nq)), np.zeros((nt, 1, nq, 2)), np.zeros((nt, 1, nq))

    gg = np.einsum("kid,kjd->kij", G, G)  # grad l_i . grad l_j
    vals, grads, laps = [], [], []
    if family in (Family.P1, Family.P1_bubble):
        for i in range(3):
            vals.append(lam[:, i])
            grads.append(np.broadcast_to(G[:, i, None, :], (nt, nq, 2)))
            laps.append(np.zeros((nt, nq)))
    else:
        for i in range(3):
            vals.append(lam[:, i] * (2 * lam[:, i] - 1))
            grads.append((4 * lam[None, :, i, None] - 1) * G[:, i, None, :])
            laps.append(np.broadcast_to(4 * gg[:, i, i, None], (nt, nq)))
        for i, j in ((0, 1), (1, 2), (2, 0)):
            vals.append(4 * lam[:, i] * lam[:, j])
            grads.append(4 * (lam[None, :, j, None] * G[:, i, None, :] + lam[None, :, i, None] * G[:, j, None, :]))
            laps.append(np.broadcast_to(8 * gg[:, i, j, None], (nt, nq)))
    if family in (Family.P1_bubble, Family.P2_bubble):
        l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
        vals.append(27 * l0 * l1 * l2)
        grads.append(
            27
            * (
                (l1 * l2)[None, :, None] * G[:, 0, None, :]
                + (l0 * l2)[None, :, None] * G[:, 1, None, :]
                + (l0 * l1)[None, :, None] * G[:, 2, None, :]
            )
        )
        laps.append(
            54
            * (
                gg[:, 0, 1, None] * l2[None, :]
                + gg[:, 0, 2, None] * l1[None, :]
                + gg[:, 1, 2, None] * l0[None, :]
            )
        )
    return np.array(vals), np.stack(grads, axis=1), np.stack(laps, axis=1)


def eval_basis(spec: SpaceSpec, corners, point):
    """Evaluate the local basis of one element at a reference point.

    Parameters
    ----------
    spec : SpaceSpec
    corners : (3, 2) vertex coordinates of the element
    point : (x, y) on the reference triangle

    Returns
    -------
    values (nb,), gradients (nb, 2), laplacians (nb,)
    """
    x, y = point
    lam = np.array([[1.0 - x - y, x, y]])
    geom = Geometry.from_corners(np.asarray(corners, dtype=float))
    v, g, l = basis(spec.family, lam, geom)
    return v[:, 0], g[0, :, 0, :], l[0, :, 0]


# --------------------------------------------------------------------------
# dof maps


class DofKind(int, Enum):
    VERTEX = 0
    EDGE = 1
    BUBBLE = 2
    ELEMENT = 3


@dataclass(frozen=True, eq=False)
class DofMap:
    """Global numbering of a space on a mesh.

    ``cell_dofs[k]`` lists the global dofs of element k in local order;
    ``free`` lists unconstrained dofs and ``free_index`` maps global dofs to
    their position among the free ones (-1 if constrained).
    """

    spec: SpaceSpec
    ndofs: int
    cell_dofs: np.ndarray
    kind: np.ndarray
    constrained: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)

    @property
    def nfree(self) -> int:
        return int(np.count_nonzero(~self.constrained))

    @property
    def free_index(self) -> np.ndarray:
        idx = -np.ones(self.ndofs, dtype=np.int64)
        idx[self.free] = np.arange(self.nfree)
        return idx

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        """Full coefficient vector with zeros on constrained dofs."""
        full = np.zeros(self.ndofs)
        full[self.free] = free_values
        return full


def build_dofmap(mesh: Mesh, spec: SpaceSpec) -> DofMap:
    family = spec.family
    nv, ne, nt = mesh.nvertices, len(mesh.edges), mesh.nelements
    if family is Family.P0_disc:
        return DofMap(
            spec,
            nt,
            np.arange(nt)[:, None],
            np.full(nt, DofKind.ELEMENT),
            np.zeros(nt, dtype=bool),
        )
    blocks = [mesh.triangles]
    kinds = [np.full(nv, DofKind.VERTEX)]
    constrained = [mesh.boundary.copy()]
    n = nv
    if spec.degree == 2:
        blocks.append(n + mesh.t2e)
        kinds.append(np.full(ne, DofKind.EDGE))
        constrained.append(mesh.e2t[:, 1] < 0)
        n += ne
    if spec.has_bubble:
        blocks.append(n + np.arange(nt)[:, None])
        kinds.append(np.full(nt, DofKind.BUBBLE))
        constrained.append(np.zeros(nt, dtype=bool))
        n += nt
    constrained = np.concatenate(constrained)
    if not spec.dirichlet:
        constrained[:] = False
    return DofMap(spec, n, np.hstack(blocks), np.concatenate(kinds), constrained)
