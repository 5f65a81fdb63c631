"""Index tables turning ico6 vertex data into token sequences.

Tokens at encoder level ``l`` are the faces of ico(6 - l) in canonical
order, so every attention window, merge group and shift is a contiguous
range or a 1-D roll of the sequence:

========  ==========  =========  ============
level     tokens      windows    window size
========  ==========  =========  ============
1         20480       320        64
2         5120        80         64
3         1280        20         64
4         320         1          320
========  ==========  =========  ============

A token's feature vector is channel-major: the six patch values of
channel 0, then the six values of channel 1, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .icomesh import Icosphere, build_hierarchy, vertex_count

LEVELS = (1, 2, 3, 4)
WINDOW_DEPTH = 3  # windows live three subdivision levels above the tokens
SHIFT_FRACTIONS = (Fraction(0), Fraction(1, 16), Fraction(1, 4), Fraction(1, 2))


def sequence_level(level: int) -> int:
    """Icosphere order whose faces are the tokens of encoder ``level``."""
    return 6 - level


@dataclass(frozen=True, eq=False)
class PatchMaps:
    """Precomputed gathers for the MS-SiT token hierarchy.

    Attributes:
        patch_vertices: ``(20480, 6)`` ico6 vertices of each ico5 face: the
            three corners followed by the midpoints of edges ab, bc, ca.
        window_id: per level, the window of every token.
        window_size: per level, tokens per attention window.
        shift_offset: per level, how many rows the shifted blocks roll by
            (0 at level 4, where the window is the whole sequence).
        merge_gather: for levels 1-3, ``(M, 4)`` child-token rows merged into
            each parent token of the next level.
        level_lengths: per level, the sequence length.
        shift_fraction: the shift factor the offsets were derived from.
    """

    patch_vertices: np.ndarray
    window_id: dict[int, np.ndarray]
    window_size: dict[int, int]
    shift_offset: dict[int, int]
    merge_gather: dict[int, np.ndarray]
    level_lengths: dict[int, int]
    shift_fraction: Fraction = Fraction(1, 2)
    _vertex_scatter: list = field(default_factory=list, repr=False)

    @property
    def n_vertices(self) -> int:
        return vertex_count(6)

    def n_windows(self, level: int) -> int:
        return self.level_lengths[level] // self.window_size[level]

    def vertex_scatter(self) -> sp.csr_matrix:
        """``(40962, 20480)`` row-stochastic matrix averaging covering patches per vertex."""
        if not self._vertex_scatter:
            self._vertex_scatter.append(patch_to_vertex_matrix(self.patch_vertices))
        return self._vertex_scatter[0]


def _as_fraction(w_s) -> Fraction:
    frac = Fraction(w_s).limit_denominator(1024)
    if frac not in SHIFT_FRACTIONS:
        allowed = ", ".join(str(f) for f in SHIFT_FRACTIONS)
        raise ValueError(f"shift fraction must be one of {{{allowed}}}, got {w_s!r}")
    return frac


def build_patch_maps(hierarchy: list[Icosphere] | None = None, w_s=Fraction(1, 2)) -> PatchMaps:
    """Build every index table from a canonical ico0..ico6 hierarchy.

    Args:
        hierarchy: Icospheres indexed by level; levels 2..6 (and their
            ``face_parent`` links) must be present. Defaults to the cached
            canonical hierarchy.
        w_s: Shift factor, a fraction of the window size in
            ``{0, 1/16, 1/4, 1/2}``.

    Raises:
        ValueError: On a missing or inconsistent hierarchy level, or an
            unsupported shift factor.
    """
    frac = _as_fraction(w_s)
    if hierarchy is None:
        hierarchy = build_hierarchy(6)
    for n in range(2, 7):
        if len(hierarchy) <= n or hierarchy[n] is None or hierarchy[n].level != n:
            raise ValueError(f"hierarchy is missing icosphere level {n}")
        if hierarchy[n].face_parent is None:
            raise ValueError(f"icosphere level {n} has no face_parent links")

    ico6 = hierarchy[6]
    children = ico6.faces.reshape(-1, 4, 3)  # canonical 4f..4f+3 grouping
    corners = np.stack([children[:, 0, 0], children[:, 1, 1], children[:, 2, 2]], axis=1)
    patch_vertices = np.concatenate([corners, children[:, 3, :]], axis=1)
    # corners must be the ico5 face itself
    if not np.array_equal(corners, hierarchy[5].faces):
        raise ValueError("ico6 faces are not in canonical child order of ico5")

    window_id, window_size, shift_offset, merge_gather, lengths = {}, {}, {}, {}, {}
    for level in LEVELS:
        n_tokens = hierarchy[sequence_level(level)].n_faces
        lengths[level] = n_tokens
        if level < 4:
            w = 4**WINDOW_DEPTH
            window_size[level] = w
            shift_offset[level] = int(frac * w)
            window_id[level] = np.arange(n_tokens, dtype=np.int64) // w
            merge_gather[level] = np.arange(n_tokens, dtype=np.int64).reshape(-1, 4)
        else:
            window_size[level] = n_tokens
            shift_offset[level] = 0
            window_id[level] = np.zeros(n_tokens, dtype=np.int64)
    for arr in (patch_vertices, *window_id.values(), *merge_gather.values()):
        arr.setflags(write=False)
    return PatchMaps(
        patch_vertices, window_id, window_size, shift_offset, merge_gather, lengths, frac
    )


@lru_cache(maxsize=None)
def default_patch_maps(w_s=Fraction(1, 2)) -> PatchMaps:
    return build_patch_maps(None, _as_fraction(w_s))


def patch_to_vertex_matrix(patch_vertices: np.ndarray) -> sp.csr_matrix:
    n_patches = patch_vertices.shape[0]
    rows = patch_vertices.reshape(-1)
    cols = np.repeat(np.arange(n_patches), patch_vertices.shape[1])
    m = sp.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(vertex_count(6), n_patches)
    )
    counts = np.asarray(m.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / counts) @ m)


def sequence_from_surface(data: np.ndarray, maps: PatchMaps) -> np.ndarray:
    """Flatten ``(40962, C)`` vertex data into the ``(20480, 6C)`` level-1 sequence."""
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[0] != maps.n_vertices:
        raise ValueError(f"expected ({maps.n_vertices}, C) vertex data, got {data.shape}")
    if data.shape[1] < 1:
        raise ValueError("vertex data needs at least one channel")
    patches = data[maps.patch_vertices]  # (F5, 6, C)
    return np.ascontiguousarray(patches.transpose(0, 2, 1).reshape(len(patches), -1))


def shift_index(n: int, offset: int) -> np.ndarray:
    """Gather index of :func:`cyclic_shift`: output row i reads row (i + offset) mod n."""
    if not 0 <= offset < n:
        raise ValueError(f"shift offset must be in [0, {n}), got {offset}")
    return (np.arange(n, dtype=np.int64) + offset) % n


def cyclic_shift(tokens: np.ndarray, offset: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    return tokens[..., shift_index(tokens.shape[-2], offset), :]


def merge_tokens(tokens: np.ndarray) -> np.ndarray:
    """Concatenate rows ``4f..4f+3`` into row ``f``: ``(..., 4M, D) -> (..., M, 4D)``."""
    tokens = np.asarray(tokens)
    *lead, n, d = tokens.shape
    if n % 4:
        raise ValueError(f"token count {n} is not divisible by 4")
    return tokens.reshape(*lead, n // 4, 4 * d)


def partition_tokens(tokens: np.ndarray) -> np.ndarray:
    """Inverse of :func:`merge_tokens`: ``(..., M, 4D) -> (..., 4M, D)``."""
    tokens = np.asarray(tokens)
    *lead, m, d = tokens.shape
    if d % 4:
        raise ValueError(f"channel width {d} is not divisible by 4")
    return tokens.reshape(*lead, 4 * m, d // 4)


def token_ancestor(token: np.ndarray | int, level: int, target_level: int) -> np.ndarray:
    """Index of the level-``target_level`` token that contains a level-``level`` token."""
    if target_level < level:
        raise ValueError("target level must be coarser (larger) than the source level")
    return np.asarray(token) // 4 ** (target_level - level)
