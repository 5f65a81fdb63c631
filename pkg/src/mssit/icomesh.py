"""Icosahedral sphere tessellations and barycentric resampling on them.

Meshes are built by repeated 4-to-1 midpoint subdivision of a fixed base
icosahedron. The ordering is canonical:

* the first ``|V_{n-1}|`` vertices of level ``n`` are the parent vertices,
  followed by one midpoint per parent edge, in lexicographic order of the
  sorted ``(i, j)`` endpoint pair;
* parent face ``f = (a, b, c)`` with midpoints ``ab, bc, ca`` produces the
  four children ``4f .. 4f + 3`` as ``(a, ab, ca)``, ``(ab, b, bc)``,
  ``(ca, bc, c)`` and the centre ``(ab, bc, ca)``.

Every face is wound counter-clockwise when seen from outside the sphere.
Because children are contiguous, all descendants of a level-``n`` face at
level ``n + k`` occupy the index range ``[4**k * f, 4**k * (f + 1))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

MAX_LEVEL = 7

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

# Base vertex order is part of the file/checkpoint contract, do not reorder.
_BASE_VERTICES = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ]
)

_BASE_FACES = np.array(
    [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ],
    dtype=np.int64,
)

# Targets closer than this to a source vertex take the exact one-hot weight.
_COINCIDENCE_TOL = 1e-10
_INSIDE_TOL = 1e-12


def vertex_count(level: int) -> int:
    return 10 * 4**level + 2


def face_count(level: int) -> int:
    return 20 * 4**level


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Icosphere:
    """One level of the icosahedral hierarchy.

    Attributes:
        level: Subdivision level (0 is the icosahedron).
        vertices: ``(|V|, 3)`` float64 unit vectors.
        faces: ``(|F|, 3)`` int64 vertex indices, outward (CCW) winding.
        face_parent: ``(|F|,)`` index of the parent face one level up, or
            ``None`` at level 0.
    """

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    face_parent: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` rows, lexicographic."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        return np.unique(np.sort(e, axis=1), axis=0)

    def face_centroids(self, normalise: bool = True) -> np.ndarray:
        c = self.vertices[self.faces].mean(axis=1)
        if normalise:
            c /= np.linalg.norm(c, axis=1, keepdims=True)
        return c


def _base_icosphere() -> Icosphere:
    v = _BASE_VERTICES / np.linalg.norm(_BASE_VERTICES, axis=1, keepdims=True)
    f = _BASE_FACES.copy()
    # enforce outward winding
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return Icosphere(0, _frozen(v), _frozen(f), None)


def subdivide(parent: Icosphere) -> Icosphere:
    """Split every face of ``parent`` into four, projecting midpoints onto the sphere."""
    nv = parent.n_vertices
    f = parent.faces
    # directed edges per face: ab, bc, ca
    e = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
    edges, inverse = np.unique(np.sort(e, axis=1), axis=0, return_inverse=True)
    mid = (nv + inverse.reshape(-1, 3)).astype(np.int64)
    ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]

    midpoints = parent.vertices[edges[:, 0]] + parent.vertices[edges[:, 1]]
    midpoints /= np.linalg.norm(midpoints, axis=1, keepdims=True)
    vertices = np.concatenate([parent.vertices, midpoints])

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    children = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    face_parent = np.repeat(np.arange(parent.n_faces, dtype=np.int64), 4)
    return Icosphere(
        parent.level + 1, _frozen(vertices), _frozen(children), _frozen(face_parent)
    )


@lru_cache(maxsize=None)
def build_icosphere(level: int) -> Icosphere:
    """Return the level-``level`` icosphere (cached; the result is immutable).

    Raises:
        ValueError: If ``level`` lies outside ``0..MAX_LEVEL``.
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"icosphere level must be in 0..{MAX_LEVEL}, got {level!r}")
    level = int(level)
    if level == 0:
        return _base_icosphere()
    return subdivide(build_icosphere(level - 1))


def build_hierarchy(max_level: int = 6) -> list[Icosphere]:
    """All levels ``0..max_level``; index ``n`` holds ico-n."""
    return [build_icosphere(n) for n in range(max_level + 1)]


@dataclass(frozen=True, eq=False)
class BarycentricMap:
    """Interpolation weights of ``target_points`` inside faces of a source mesh.

    Attributes:
        source_level: Level of the source icosphere.
        target_points: ``(P, 3)`` unit vectors.
        face_hits: ``(P,)`` containing source face per target.
        weights: ``(P, 3)`` non-negative weights summing to one, ordered like
            the face's vertices.
        vertex_indices: ``(P, 3)`` source vertex indices, ``faces[face_hits]``.
    """

    source_level: int
    target_points: np.ndarray
    face_hits: np.ndarray
    weights: np.ndarray
    vertex_indices: np.ndarray

    @property
    def n_targets(self) -> int:
        return self.target_points.shape[0]


def _edge_normals(tri: np.ndarray) -> np.ndarray:
    """``(..., 3, 3)`` rows ``b x c, c x a, a x b`` of each triangle ``(a, b, c)``."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    return np.stack([np.cross(b, c), np.cross(c, a), np.cross(a, b)], axis=-2)


def _gnomonic_weights(normals: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric weights of the central projection of ``p`` onto triangle planes.

    The unnormalised weights are the signed volumes ``det(p,b,c)``,
    ``det(a,p,c)``, ``det(a,b,p)``, i.e. ``p`` dotted with the edge normals.
    All three are non-negative exactly when ``p`` lies in the spherical
    triangle (and the triangle faces ``p``).
    """
    w = np.einsum("...jd,...d->...j", normals, p)
    s = (w[..., 0] + w[..., 1] + w[..., 2])[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = w / s
    # far-side faces have all volumes negative; mark them as outside
    return np.where(s > 0, w, -1.0)


def _min3(w: np.ndarray) -> np.ndarray:
    return np.minimum(np.minimum(w[..., 0], w[..., 1]), w[..., 2])


def _first_inside(w: np.ndarray) -> np.ndarray:
    """Per row, the first candidate containing the point, else the least-outside one."""
    m = _min3(w)
    inside = m >= -_INSIDE_TOL
    return np.where(inside.any(axis=1), np.argmax(inside, axis=1), np.argmax(m, axis=1))


class _Locator:
    """Coarse-to-fine point location on the canonical hierarchy.

    Children of face ``f`` are ``4f .. 4f+3``, so a point found in an
    ico-k face only needs four tests at level k+1.
    """

    def __init__(self, src: Icosphere):
        self.src = src
        levels = build_hierarchy(src.level)
        if levels[-1].n_faces != src.n_faces or not np.array_equal(levels[-1].faces, src.faces):
            raise ValueError("source mesh is not a canonical icosphere")
        self.normals = [_edge_normals(m.vertices[m.faces]) for m in levels]
        self.base_centroids = levels[0].face_centroids()
        # faces around each vertex, padded by repetition (valence 5 or 6)
        nv = src.n_vertices
        owner = src.faces.reshape(-1)
        order = np.argsort(owner, kind="stable")
        face_of = order // 3
        counts = np.bincount(owner, minlength=nv)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.minimum(np.arange(6)[None, :], counts[:, None] - 1)
        self.vertex_faces = face_of[starts[:, None] + slot]
        self._vertex_tree: cKDTree | None = None

    @property
    def vertex_tree(self) -> cKDTree:
        if self._vertex_tree is None:
            self._vertex_tree = cKDTree(self.src.vertices)
        return self._vertex_tree

    def locate(self, p: np.ndarray) -> np.ndarray:
        n = len(p)
        # on the regular icosahedron each face is the Voronoi cell of its centroid
        face = np.argmax(p @ self.base_centroids.T, axis=1)
        four = np.arange(4)
        for normals in self.normals[1:]:
            cand = 4 * face[:, None] + four
            w = _gnomonic_weights(normals[cand], p[:, None, :])
            face = cand[np.arange(n), _first_inside(w)]
        return face


_LOCATORS: dict[int, _Locator] = {}


def _locator(src: Icosphere) -> _Locator:
    loc = _LOCATORS.get(id(src))
    if loc is None or loc.src is not src:
        loc = _LOCATORS[id(src)] = _Locator(src)
    return loc


def barycentric_map(src: Icosphere, targets: np.ndarray) -> BarycentricMap:
    """Locate each target point in a face of ``src`` and compute its weights.

    Faces are found by descending the hierarchy from the icosahedron. Points
    on or near a face boundary are re-tested against every face sharing a
    vertex with the hit, and the lowest-index containing face wins. Targets
    within ``1e-10`` of a source vertex take an exact one-hot weight.

    Raises:
        ValueError: If targets are not ``(P, 3)`` unit vectors.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != 3:
        raise ValueError(f"targets must have shape (P, 3), got {targets.shape}")
    norms = np.linalg.norm(targets, axis=1)
    if not np.all(np.abs(norms - 1.0) <= 1e-9):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"target {bad} is not unit norm (|p| = {norms[bad]!r})")

    loc = _locator(src)
    normals = loc.normals[-1]
    face_hits = loc.locate(targets)
    weights = _gnomonic_weights(normals[face_hits], targets)

    edge = np.flatnonzero(_min3(weights) < 1e-9)
    if edge.size:
        cand = np.sort(loc.vertex_faces[src.faces[face_hits[edge]]].reshape(edge.size, -1), axis=1)
        w = _gnomonic_weights(normals[cand], targets[edge, None, :])
        pick = _first_inside(w)
        face_hits[edge] = cand[np.arange(edge.size), pick]
        weights[edge] = w[np.arange(edge.size), pick]

    weights = np.clip(weights, 0.0, 1.0)
    weights /= weights.sum(axis=1, keepdims=True)

    vertex_indices = src.faces[face_hits]
    corner = np.argmax(weights, axis=1)
    rows = np.arange(len(targets))
    dist = np.linalg.norm(src.vertices[vertex_indices[rows, corner]] - targets, axis=1)
    snap = np.flatnonzero(dist < _COINCIDENCE_TOL)
    weights[snap] = 0.0
    weights[snap, corner[snap]] = 1.0

    return BarycentricMap(
        src.level,
        _frozen(targets.copy()),
        _frozen(face_hits.astype(np.int64)),
        _frozen(weights),
        _frozen(vertex_indices),
    )


def resample(data: np.ndarray, bmap: BarycentricMap) -> np.ndarray:
    """Interpolate per-vertex ``data`` (rows = source vertices) at the map's targets.

    Works on ``(|V|,)`` or ``(|V|, C)`` input; channels are independent.
    """
    data = np.asarray(data)
    n_src = vertex_count(bmap.source_level)
    if data.ndim not in (1, 2) or data.shape[0] != n_src:
        raise ValueError(
            f"data must have {n_src} rows for a level-{bmap.source_level} source, "
            f"got shape {data.shape}"
        )
    idx, w = bmap.vertex_indices, bmap.weights
    if data.ndim == 1:
        return (data[idx] * w).sum(axis=1)
    return np.einsum("pk,pkc->pc", w, data[idx])


def nearest_vertex(src: Icosphere, targets: np.ndarray) -> np.ndarray:
    """Index of the closest source vertex to every target point."""
    _, idx = _locator(src).vertex_tree.query(np.asarray(targets, dtype=np.float64), k=1)
    return idx.astype(np.int64)


def mean_edge_length(ico: Icosphere) -> float:
    e = ico.edges()
    return float(np.linalg.norm(ico.vertices[e[:, 0]] - ico.vertices[e[:, 1]], axis=1).mean())
