"""Synthetic stand-ins for cortical surface datasets.

Regression samples are four smooth channels built from random real
spherical-harmonic mixtures. Their target mixes the per-channel surface
means with a left/right hemisphere contrast, so both a global and a
spatial signal have to be picked up.

Segmentation samples partition the sphere into ``K`` geodesic Voronoi
cells around jittered seeds; each channel is a per-region level plus
smooth noise, and the cell index is the label.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import sph_harm_y

from .formats import write_labels, write_surface
from .icomesh import build_icosphere

N_CHANNELS = 4
MAX_DEGREE = 4
TARGET_MEAN, TARGET_SCALE = 35.0, 3.0  # roughly a postmenstrual age in weeks
# offset / scale per channel, loosely: sulcal depth, curvature, thickness, myelin
CHANNEL_OFFSET = np.array([0.0, 0.0, 2.5, 1.5])
CHANNEL_SCALE = np.array([1.0, 0.3, 0.5, 0.2])


@lru_cache(maxsize=4)
def real_sh_basis(max_degree: int = MAX_DEGREE, level: int = 6) -> np.ndarray:
    """Orthonormal real spherical harmonics up to ``max_degree`` on icosphere vertices.

    Returns:
        ``(V, (max_degree + 1) ** 2)`` array, columns ordered by ``(l, m)``
        with ``m`` running ``-l..l``.
    """
    v = build_icosphere(level).vertices
    theta = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
    phi = np.arctan2(v[:, 1], v[:, 0])
    cols = []
    for l in range(max_degree + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(np.sqrt(2.0) * (-1) ** m * y.imag)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2.0) * (-1) ** m * y.real)
    out = np.stack(cols, axis=1)
    out.setflags(write=False)
    return out


def smooth_field(rng: np.random.Generator, n_channels: int, max_degree: int = MAX_DEGREE) -> np.ndarray:
    """Random band-limited field ``(40962, n_channels)`` with a decaying spectrum."""
    basis = real_sh_basis(max_degree)
    degrees = np.repeat(np.arange(max_degree + 1), 2 * np.arange(max_degree + 1) + 1)
    coef = rng.standard_normal((basis.shape[1], n_channels)) / (1.0 + degrees)[:, None]
    return basis @ coef


@lru_cache(maxsize=1)
def _hemisphere_sign() -> np.ndarray:
    x = build_icosphere(6).vertices[:, 0]
    return np.where(x > 0, 1.0, np.where(x < 0, -1.0, 0.0))


def regression_functional(data: np.ndarray, weights: np.ndarray) -> float:
    """Unscaled target: ``w_mean . channel_means + w_contrast . hemisphere_contrast``."""
    sign = _hemisphere_sign()
    means = data.mean(axis=0)
    contrast = (sign @ data) / np.abs(sign).sum()
    return float(weights[0] @ means + weights[1] @ contrast)


FUNCTIONAL_WEIGHTS = np.array([[0.6, -0.4, 0.8, 0.5], [1.0, 0.5, -0.7, 0.8]])


@dataclass
class SyntheticSample:
    sample_id: str
    data: np.ndarray
    target: float | None = None
    labels: np.ndarray | None = None


def regression_samples(n: int, seed: int, noise: float = 0.05) -> list[SyntheticSample]:
    """``n`` regression samples with targets on a week-like scale."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    raw, fields = [], []
    for _ in range(n):
        f = smooth_field(rng, N_CHANNELS)
        fields.append(f)
        raw.append(regression_functional(f, FUNCTIONAL_WEIGHTS))
    raw = np.asarray(raw)
    # fixed standardisation so a sample's target does not depend on n
    z = raw / 0.35
    targets = TARGET_MEAN + TARGET_SCALE * (z + noise * rng.standard_normal(n))
    out = []
    for i, (f, t) in enumerate(zip(fields, targets)):
        data = CHANNEL_OFFSET + CHANNEL_SCALE * f
        out.append(SyntheticSample(f"sub-{i:04d}", data.astype(np.float32), float(t)))
    return out


def voronoi_labels(seeds: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Index of the geodesically nearest seed (largest dot product) per vertex."""
    return np.argmax(vertices @ seeds.T, axis=1)


def segmentation_samples(
    n: int, seed: int, n_classes: int = 8, jitter: float = 0.15, noise: float = 0.3
) -> list[SyntheticSample]:
    """``n`` samples whose labels are Voronoi cells of ``n_classes`` jittered seeds.

    Seeds sit on distinct ico6 vertices, so every cell contains at least
    its own seed vertex and all classes are present in every sample.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    ico = build_icosphere(6)
    rng = np.random.default_rng(seed)
    atlas = ico.vertices[rng.choice(ico.n_vertices, n_classes, replace=False)]
    levels = rng.normal(0.0, 1.0, (n_classes, N_CHANNELS))
    out = []
    for i in range(n):
        moved = atlas + jitter * rng.standard_normal(atlas.shape)
        moved /= np.linalg.norm(moved, axis=1, keepdims=True)
        seed_idx = np.unique(np.argmax(moved @ ico.vertices.T, axis=1))
        while seed_idx.size < n_classes:  # two seeds snapped to one vertex: redraw
            moved = atlas + jitter * rng.standard_normal(atlas.shape)
            moved /= np.linalg.norm(moved, axis=1, keepdims=True)
            seed_idx = np.unique(np.argmax(moved @ ico.vertices.T, axis=1))
        seed_idx = np.argmax(moved @ ico.vertices.T, axis=1)
        labels = voronoi_labels(ico.vertices[seed_idx], ico.vertices)
        data = levels[labels] + noise * smooth_field(rng, N_CHANNELS)
        out.append(SyntheticSample(f"sub-{i:04d}", data.astype(np.float32), labels=labels.astype(np.int64)))
    return out


def assign_splits(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Deterministic shuffled train/val/test tags; train always gets at least one sample."""
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_val = min(n_val, max(n - 1, 0))
    n_test = min(n_test, max(n - 1 - n_val, 0))
    tags = ["train"] * n
    for j, idx in enumerate(order):
        if j < n_val:
            tags[idx] = "val"
        elif j < n_val + n_test:
            tags[idx] = "test"
    return tags


MANIFEST_COLUMNS = ("id", "data_path", "target", "split")


def write_dataset(out_dir, samples: list[SyntheticSample], splits: list[str]) -> Path:
    """Write SURF (and LABL) files plus ``manifest.csv``; returns the manifest path.

    Paths in the manifest are relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    (out_dir / "data").mkdir(parents=True, exist_ok=True)
    rows = []
    for s, split in zip(samples, splits):
        data_rel = f"data/{s.sample_id}.surf"
        write_surface(out_dir / data_rel, s.data)
        if s.labels is not None:
            target = f"data/{s.sample_id}.labl"
            write_labels(out_dir / target, s.labels)
        else:
            target = repr(float(s.target))
        rows.append((s.sample_id, data_rel, target, split))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


def synthesise(kind: str, n: int, seed: int, out_dir, n_classes: int = 8) -> Path:
    if kind == "regression":
        samples = regression_samples(n, seed)
    elif kind == "segmentation":
        samples = segmentation_samples(n, seed, n_classes)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return write_dataset(out_dir, samples, assign_splits(n, seed))
