"""Training data for the shape decoder and the physics surrogate.

SDF samples follow the near-boundary recipe: arc-length uniform boundary
points jittered by two Gaussian noise levels, plus a regular grid slightly
larger than the working frame. Physics samples are interior points carrying
the distance to the physical boundary and the reference solution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .geometry import RESAMPLE_LIMIT, Shape

DEFAULT_NOISE_SDS = (float(np.sqrt(0.033)), float(np.sqrt(0.0033)))
GRID_HALF_WIDTH = 1.1


class OutOfDomainError(ValueError):
    """A query point has no valid interpolation cell."""


@dataclass
class SdfDataset:
    shape_id: int
    points: np.ndarray
    sdf: np.ndarray
    centroid: np.ndarray

    def __len__(self):
        return len(self.sdf)

    def subset(self, idx) -> "SdfDataset":
        return SdfDataset(self.shape_id, self.points[idx], self.sdf[idx], self.centroid)


@dataclass
class PhysSamples:
    """All physics samples of one shape, stored column-wise."""

    shape_id: int
    points: np.ndarray
    df: np.ndarray
    u: np.ndarray

    def __len__(self):
        return len(self.df)


def build_sdf_dataset(
    shape: Shape,
    n_boundary: int = 8000,
    n_grid_per_axis: int = 30,
    noise_sds: tuple[float, float] = DEFAULT_NOISE_SDS,
    seed: int = 0,
    include_outer: bool = True,
) -> SdfDataset:
    if n_boundary % 2:
        raise ValueError("n_boundary must be even")
    if min(noise_sds) < 0:
        raise ValueError("noise standard deviations must be non-negative")
    rng = np.random.default_rng([seed, shape.shape_id])
    base = geometry.sample_boundary(shape, n_boundary, rng, include_outer=include_outer)
    half = n_boundary // 2
    big, small = max(noise_sds), min(noise_sds)
    sds = np.concatenate([np.full(half, big), np.full(half, small)])
    near = base + rng.standard_normal((n_boundary, 2)) * sds[:, None]
    g = np.linspace(-GRID_HALF_WIDTH, GRID_HALF_WIDTH, n_grid_per_axis)
    gx, gy = np.meshgrid(g, g, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    points = np.concatenate([near, grid])
    sdf = geometry.exact_sdf(shape, points, include_outer=include_outer)
    centroid = geometry.shape_centroid(shape, include_outer=include_outer)
    return SdfDataset(shape.shape_id, points, sdf, centroid)


def nearest_boundary_distance(boundary_points, query) -> np.ndarray | float:
    """Exact nearest-neighbour distance from queries to a point set (KD-tree)."""
    P = np.atleast_2d(np.asarray(boundary_points, dtype=float))
    if len(P) == 0:
        raise ValueError("boundary point set is empty")
    q = np.asarray(query, dtype=float)
    dist, _ = cKDTree(P).query(np.atleast_2d(q), k=1)
    return float(dist[0]) if q.ndim == 1 else dist


def distance_feature(shape: Shape, points: np.ndarray, gamma: str = "ALL") -> np.ndarray:
    """Distance from points to the boundary subset selected by ``gamma``."""
    a, b = geometry.gamma_segments(shape, gamma)
    return geometry.segment_distance(points, a, b)


def sample_interior(shape: Shape, n: int, rng: np.random.Generator, accept=None) -> np.ndarray:
    """Uniform interior points by rejection from the outer loop's bounding box.

    ``accept`` optionally filters candidates further (vectorised predicate).
    Each slot gets at most RESAMPLE_LIMIT rounds of candidates.
    """
    lo = shape.outer_loop.min(axis=0)
    hi = shape.outer_loop.max(axis=0)
    out = np.empty((n, 2))
    filled = 0
    rounds = 0
    while filled < n:
        rounds += 1
        if rounds > RESAMPLE_LIMIT:
            raise OutOfDomainError(
                f"shape {shape.shape_id}: interior sampling exceeded {RESAMPLE_LIMIT} attempts"
            )
        need = n - filled
        cand = rng.uniform(lo, hi, size=(max(2 * need, 16), 2))
        ok = geometry.contains(shape, cand)
        if accept is not None and ok.any():
            ok[ok] = accept(cand[ok])
        good = cand[ok][:need]
        out[filled : filled + len(good)] = good
        filled += len(good)
    return out


def build_phys_points(
    shape: Shape,
    fom_field,
    n_points: int = 1000,
    gamma: str = "ALL",
    seed: int = 0,
) -> PhysSamples:
    """Interior training samples with distance feature and interpolated solution."""
    rng = np.random.default_rng([seed, shape.shape_id, 1])
    points = sample_interior(shape, n_points, rng, accept=fom_field.valid)
    u = fom_field.interpolate(points)
    df = distance_feature(shape, points, gamma)
    return PhysSamples(shape.shape_id, points, df, np.asarray(u).reshape(n_points, -1))


# ---------------------------------------------------------------------------
# CSV persistence


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_sdf_csv(path: str | Path, datasets: Sequence[SdfDataset]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("shape_id,x,y,sdf\n")
        for ds in datasets:
            for (x, y), s in zip(ds.points, ds.sdf):
                fh.write(f"{ds.shape_id},{_fmt(x)},{_fmt(y)},{_fmt(s)}\n")


def read_sdf_csv(path: str | Path, centroids: dict[int, np.ndarray] | None = None) -> list[SdfDataset]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["shape_id", "x", "y", "sdf"]:
            raise ValueError(f"unexpected sdf csv header {header}")
        for sid, x, y, s in reader:
            rows.setdefault(int(sid), []).append((float(x), float(y), float(s)))
    out = []
    for sid, vals in rows.items():
        arr = np.array(vals)
        c = np.zeros(2) if centroids is None else np.asarray(centroids[sid], dtype=float)
        out.append(SdfDataset(sid, arr[:, :2], arr[:, 2], c))
    return out


def write_phys_csv(path: str | Path, sets: Sequence[PhysSamples]) -> None:
    d_u = sets[0].u.shape[1] if sets else 1
    with open(path, "w", newline="") as fh:
        fh.write("shape_id,x,y,df," + ",".join(f"u{i + 1}" for i in range(d_u)) + "\n")
        for ps in sets:
            for (x, y), d, u in zip(ps.points, ps.df, ps.u):
                vals = ",".join(_fmt(v) for v in u)
                fh.write(f"{ps.shape_id},{_fmt(x)},{_fmt(y)},{_fmt(d)},{vals}\n")


def read_phys_csv(path: str | Path) -> list[PhysSamples]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["shape_id", "x", "y", "df"] or len(header) < 5:
            raise ValueError(f"unexpected phys csv header {header}")
        for rec in reader:
            rows.setdefault(int(rec[0]), []).append([float(v) for v in rec[1:]])
    out = []
    for sid, vals in rows.items():
        arr = np.array(vals)
        out.append(PhysSamples(sid, arr[:, :2], arr[:, 2], arr[:, 3:]))
    return out
