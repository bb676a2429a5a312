"""Zero level-set extraction and Chamfer scoring of reconstructed shapes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .autodecoder import TrainedSdfModel, predict_sdf

log = logging.getLogger(__name__)


class EmptyReconstruction(RuntimeError):
    """No sign change on the grid: the level set collapsed."""


@dataclass
class LevelSetGrid:
    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray  # shape (n_x, n_y), values[i, j] at origin + (i*dx, j*dy)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (2,)).copy()
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def spanning(cls, lo, hi, n_x: int, n_y: int | None = None, values=None) -> "LevelSetGrid":
        n_y = n_x if n_y is None else n_y
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        spacing = (hi - lo) / (np.array([n_x, n_y]) - 1)
        vals = np.zeros((n_x, n_y)) if values is None else values
        return cls(lo, spacing, vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def nodes(self) -> np.ndarray:
        n_x, n_y = self.shape
        xs = self.origin[0] + self.spacing[0] * np.arange(n_x)
        ys = self.origin[1] + self.spacing[1] * np.arange(n_y)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])


def _edge_crossings(grid: LevelSetGrid, iso: float, axis: int) -> np.ndarray:
    v = grid.values
    if axis == 0:
        a, b = v[:-1, :], v[1:, :]
    else:
        a, b = v[:, :-1], v[:, 1:]
    straddle = (a < iso) != (b < iso)
    i, j = np.nonzero(straddle)
    va, vb = a[i, j], b[i, j]
    t = (iso - va) / (vb - va)
    x = grid.origin[0] + grid.spacing[0] * i
    y = grid.origin[1] + grid.spacing[1] * j
    if axis == 0:
        x = x + t * grid.spacing[0]
    else:
        y = y + t * grid.spacing[1]
    return np.column_stack([x, y])


def marching_squares(grid: LevelSetGrid, iso: float = 0.0) -> np.ndarray:
    """Unordered level-set points: one linear-interpolation crossing per straddling edge."""
    pts = np.concatenate([_edge_crossings(grid, iso, 0), _edge_crossings(grid, iso, 1)])
    if len(pts) == 0:
        raise EmptyReconstruction("no sign change on the grid")
    return np.unique(pts, axis=0)


def marching_squares_segments(grid: LevelSetGrid, iso: float = 0.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contour segments per cell. Saddle cells are split by the sign of the
    cell-centre average (average above iso connects the above-iso corners)."""
    v = grid.values
    ox, oy = grid.origin
    dx, dy = grid.spacing
    segments = []

    def lerp(p, q, fp, fq):
        t = (iso - fp) / (fq - fp)
        return p + t * (q - p)

    n_x, n_y = v.shape
    for i in range(n_x - 1):
        for j in range(n_y - 1):
            # corners counter-clockwise from (i, j)
            c = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            f = [v[p] for p in c]
            above = [fv >= iso for fv in f]
            if all(above) or not any(above):
                continue
            P = [np.array([ox + dx * p[0], oy + dy * p[1]]) for p in c]
            cross = {}
            for e in range(4):
                s, t = e, (e + 1) % 4
                if above[s] != above[t]:
                    cross[e] = lerp(P[s], P[t], f[s], f[t])
            edges = sorted(cross)
            if len(edges) == 2:
                segments.append((cross[edges[0]], cross[edges[1]]))
                continue
            centre_above = np.mean(f) >= iso
            if above[0] == centre_above:
                # corner 0 joins the centre region: cut off corners 1 and 3
                segments.append((cross[0], cross[1]))
                segments.append((cross[2], cross[3]))
            else:
                segments.append((cross[3], cross[0]))
                segments.append((cross[1], cross[2]))
    return segments


def chamfer_distance(S1, S2) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    if len(S1) == 0 or len(S2) == 0:
        raise ValueError("Chamfer distance needs non-empty point sets")
    d12, _ = cKDTree(S2).query(S1)
    d21, _ = cKDTree(S1).query(S2)
    return float(np.mean(d12**2) + np.mean(d21**2))


@dataclass
class GridSpec:
    lo: tuple[float, float] = (-1.0, -1.0)
    hi: tuple[float, float] = (1.0, 1.0)
    n: int = 201


def predicted_grid(model: TrainedSdfModel, code, grid_spec: GridSpec, centroid=None) -> LevelSetGrid:
    grid = LevelSetGrid.spanning(grid_spec.lo, grid_spec.hi, grid_spec.n)
    vals = predict_sdf(model, code, grid.nodes(), centroid)
    grid.values = vals.reshape(grid.shape)
    return grid


def evaluate_reconstruction(
    model: TrainedSdfModel, code, reference_boundary, grid_spec: GridSpec | None = None, centroid=None
) -> tuple[float, np.ndarray]:
    """Chamfer distance between the decoded zero level set and a reference boundary."""
    grid = predicted_grid(model, code, grid_spec or GridSpec(), centroid)
    pts = marching_squares(grid)
    return chamfer_distance(pts, reference_boundary), pts


def count_negative_components(grid: LevelSetGrid) -> int:
    """Number of 4-connected regions where the grid values are negative."""
    _, n = ndimage.label(grid.values < 0)
    return int(n)


@dataclass
class CdReport:
    shape_ids: list[int]
    cd: list[float]
    failed: list[bool]

    @property
    def mean_cd(self) -> float:
        ok = [c for c, f in zip(self.cd, self.failed) if not f]
        return float(np.mean(ok)) if ok else float("nan")

    @property
    def n_failed(self) -> int:
        return int(sum(self.failed))


def evaluate_dataset(model, codes: Sequence, references: Sequence, shape_ids: Sequence[int],
                     grid_spec: GridSpec | None = None, centroids=None) -> CdReport:
    """Per-shape Chamfer distances; empty reconstructions are flagged and left out of the mean."""
    cds, failed = [], []
    centroids = centroids if centroids is not None else [None] * len(codes)
    for sid, z, ref, c in zip(shape_ids, codes, references, centroids):
        try:
            cd, _ = evaluate_reconstruction(model, z, ref, grid_spec, c)
            cds.append(cd)
            failed.append(False)
        except EmptyReconstruction:
            cds.append(float("nan"))
            failed.append(True)
    report = CdReport(list(shape_ids), cds, failed)
    if report.n_failed:
        log.warning("%d of %d reconstructions failed", report.n_failed, len(cds))
    return report


def write_points_csv(path, pts: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("x,y\n")
        for x, y in pts:
            fh.write(f"{format(x, '.17g')},{format(y, '.17g')}\n")


def write_cd_report(path, report: CdReport) -> None:
    with open(path, "w") as fh:
        fh.write("shape_id,cd,failed\n")
        for sid, cd, f in zip(report.shape_ids, report.cd, report.failed):
            fh.write(f"{sid},{format(cd, '.17g')},{int(f)}\n")
