"""Spherical data augmentation: random rotations and smooth non-linear warps.

Both transforms move the sampling positions and re-read the data there by
barycentric interpolation on ico6. Categorical label maps are moved with
a nearest-vertex lookup instead, so they stay valid class indices.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .icomesh import Icosphere, barycentric_map, build_icosphere, mean_edge_length, nearest_vertex, resample


@dataclass
class AugmentConfig:
    """Augmentation settings.

    Attributes:
        probability: Chance that a sample is transformed at all.
        rotation_range_deg: Per-axis rotation angles are drawn uniformly from
            ``[-range, +range]`` (30 for regression, 15 for segmentation).
        warp_coarse_level: Icosphere whose vertices carry the random
            displacements.
        warp_max_fraction: Maximum displacement as a fraction of the mean
            edge length of the coarse grid.
    """

    probability: float = 0.8
    rotation_range_deg: float = 30.0
    warp_coarse_level: int = 2
    warp_max_fraction: float = 1.0 / 8.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"augmentation probability must be in [0, 1], got {self.probability}")
        if self.rotation_range_deg <= 0:
            raise ValueError("rotation_range_deg must be positive")
        if not 0.0 < self.warp_max_fraction < 1.0:
            raise ValueError("warp_max_fraction must be in (0, 1)")
        if not 0 <= self.warp_coarse_level < 6:
            raise ValueError("warp_coarse_level must be coarser than ico6")


@dataclass
class SurfaceSample:
    """Per-vertex ico6 data with a target.

    ``target`` is a float for regression; ``labels`` holds per-vertex class
    indices for segmentation.
    """

    data: np.ndarray
    target: float | None = None
    labels: np.ndarray | None = None
    sample_id: str = ""


def rotation_matrix(angles_deg) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles (about x, y, z) in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _check_data(data: np.ndarray, ico: Icosphere) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim not in (1, 2) or data.shape[0] != ico.n_vertices:
        raise ValueError(f"expected {ico.n_vertices} vertex rows, got shape {data.shape}")
    return data


def resample_at(data: np.ndarray, positions: np.ndarray, ico: Icosphere) -> np.ndarray:
    """Read vertex ``data`` at arbitrary unit ``positions`` by barycentric interpolation."""
    out = resample(data, barycentric_map(ico, positions))
    return out.astype(np.asarray(data).dtype, copy=False)


def random_rotation(data, angles_deg, ico: Icosphere | None = None, labels=None):
    """Rotate a surface signal by ``R = Rz Ry Rx``.

    Output vertex ``v`` takes the input value at ``R^T p_v``. If ``labels``
    is given, the rotated labels (nearest-vertex) are returned as well.
    """
    ico = ico or build_icosphere(6)
    data = _check_data(data, ico)
    r = rotation_matrix(angles_deg)
    src = ico.vertices @ r  # rows are R^T p
    src /= np.linalg.norm(src, axis=1, keepdims=True)
    out = resample_at(data, src, ico)
    if labels is None:
        return out
    return out, np.asarray(labels)[nearest_vertex(ico, src)]


def tangent_basis(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal tangent vectors at each unit vector in ``p``."""
    helper = np.where(np.abs(p[:, [2]]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(p, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(p, e1)


def sample_coarse_displacements(
    config: AugmentConfig, rng: np.random.Generator, coarse: Icosphere | None = None
) -> np.ndarray:
    """Tangent displacements of the coarse vertices, uniform in a disc.

    The disc radius is ``warp_max_fraction`` times the mean coarse edge length.
    """
    coarse = coarse or build_icosphere(config.warp_coarse_level)
    radius = config.warp_max_fraction * mean_edge_length(coarse)
    n = coarse.n_vertices
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    e1, e2 = tangent_basis(coarse.vertices)
    return (r * np.cos(theta))[:, None] * e1 + (r * np.sin(theta))[:, None] * e2


def _upsample_map(coarse_level: int):
    cached = _UPSAMPLE.get(coarse_level)
    if cached is None:
        cached = _UPSAMPLE[coarse_level] = barycentric_map(
            build_icosphere(coarse_level), build_icosphere(6).vertices
        )
    return cached


_UPSAMPLE: dict = {}


def warp_positions(coarse_displacement: np.ndarray, coarse_level: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Upsample coarse displacements to ico6 and return ``(warped, fine_displacement)``.

    Warped positions are the ico6 vertices plus the interpolated
    displacement, projected back onto the unit sphere.
    """
    fine = resample(coarse_displacement, _upsample_map(coarse_level))
    warped = build_icosphere(6).vertices + fine
    warped /= np.linalg.norm(warped, axis=1, keepdims=True)
    return warped, fine


def random_warp(data, config: AugmentConfig, rng: np.random.Generator, labels=None, displacements=None):
    """Elastic deformation driven by random displacements of a coarse icosphere.

    Args:
        data: ``(40962, C)`` or ``(40962,)`` vertex data.
        config: Warp amplitude and coarse level.
        rng: Random stream (unused when ``displacements`` is given).
        labels: Optional per-vertex labels, moved by nearest-vertex lookup.
        displacements: Explicit coarse displacements, overriding the draw.
    """
    ico = build_icosphere(6)
    data = _check_data(data, ico)
    if displacements is None:
        displacements = sample_coarse_displacements(config, rng)
    warped, _ = warp_positions(np.asarray(displacements, dtype=np.float64), config.warp_coarse_level)
    out = resample_at(data, warped, ico)
    if labels is None:
        return out
    return out, np.asarray(labels)[nearest_vertex(ico, warped)]


def draw_augmentation(config: AugmentConfig, rng: np.random.Generator) -> str:
    """Choose ``"none"``, ``"rotation"`` or ``"warp"`` (the latter two 50/50)."""
    if rng.random() >= config.probability:
        return "none"
    return "rotation" if rng.random() < 0.5 else "warp"


def apply_augmentation(sample: SurfaceSample, config: AugmentConfig, rng: np.random.Generator) -> SurfaceSample:
    """Return ``sample`` untouched or with exactly one random transform applied."""
    kind = draw_augmentation(config, rng)
    if kind == "none":
        return sample
    if kind == "rotation":
        r = config.rotation_range_deg
        angles = rng.uniform(-r, r, 3)
        res = random_rotation(sample.data, angles, labels=sample.labels)
    else:
        res = random_warp(sample.data, config, rng, labels=sample.labels)
    if sample.labels is None:
        return replace(sample, data=res)
    return replace(sample, data=res[0], labels=res[1])


def face_orientations(positions: np.ndarray, ico: Icosphere | None = None) -> np.ndarray:
    """Signed volume ``det(a, b, c)`` of every face for moved vertex positions."""
    ico = ico or build_icosphere(6)
    tri = positions[ico.faces]
    return np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
