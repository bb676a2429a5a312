"""Finite-difference reference solver on a masked Cartesian grid.

The grid covers [-1, 1]^2 with spacing h. Nodes inside the shape are
unknowns of a 5-point Laplacian; outside neighbours act as zero ghosts, which
gives a first-order (staircase) treatment of curved boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import geometry
from .geometry import Shape
from .sdf_dataset import OutOfDomainError

log = logging.getLogger(__name__)

DEFAULT_H = 1.0 / 128


class Problem(str, Enum):
    POISSON_UNIT_SOURCE = "POISSON_UNIT_SOURCE"
    DIFFUSION_LEFT_RIGHT = "DIFFUSION_LEFT_RIGHT"


class SolverError(RuntimeError):
    pass


@dataclass
class MaskedGrid:
    h: float
    n: int
    mask: np.ndarray  # (n, n) bool, node (i, j) at (-1 + i h, -1 + j h)
    dirichlet: np.ndarray  # (n, n) bool subset of mask
    boundary_values: np.ndarray  # (n, n), meaningful where dirichlet

    def coords(self, i, j):
        return -1.0 + self.h * np.asarray(i), -1.0 + self.h * np.asarray(j)


def build_grid(shape: Shape, problem: Problem, h: float = DEFAULT_H) -> MaskedGrid:
    n = int(round(2.0 / h)) + 1
    h = 2.0 / (n - 1)
    xs = -1.0 + h * np.arange(n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    mask = geometry.contains(shape, np.column_stack([gx.ravel(), gy.ravel()])).reshape(n, n)
    # prune nodes without a masked-in neighbour
    padded = np.pad(mask, 1)
    neighbours = padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
    mask &= neighbours
    frame = np.zeros_like(mask)
    frame[0, :] = frame[-1, :] = frame[:, 0] = frame[:, -1] = True
    dirichlet = np.zeros_like(mask)
    values = np.zeros((n, n))
    if problem is Problem.POISSON_UNIT_SOURCE:
        dirichlet = mask & frame
    else:
        dirichlet[0, :] = mask[0, :]
        dirichlet[-1, :] = mask[-1, :]
        values[0, :] = 1.0
    return MaskedGrid(h, n, mask, dirichlet, values)


def _assemble(grid: MaskedGrid, problem: Problem, source: float):
    """Symmetric system for the unknown nodes. Neumann frame rows are halved."""
    n, h = grid.n, grid.h
    unknown = grid.mask & ~grid.dirichlet
    index = -np.ones((n, n), dtype=np.int64)
    ii, jj = np.nonzero(unknown)
    index[ii, jj] = np.arange(len(ii))
    m = len(ii)
    rhs = np.full(m, source if problem is Problem.POISSON_UNIT_SOURCE else 0.0)
    diag = np.full(m, 4.0)
    rows, cols, vals = [], [], []
    neumann_row = (jj == 0) | (jj == n - 1)  # only reachable for the diffusion problem
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        inside_grid = (ni >= 0) & (ni < n) & (nj >= 0) & (nj < n)
        ci = np.clip(ni, 0, n - 1)
        cj = np.clip(nj, 0, n - 1)
        if problem is Problem.DIFFUSION_LEFT_RIGHT:
            # mirror ghost across y = -1 and y = +1
            mirrored = ~inside_grid & (dj != 0)
            cj = np.where(mirrored, jj - dj, cj)
            inside_grid = inside_grid | mirrored
        nbr_unknown = inside_grid & unknown[ci, cj]
        nbr_dir = inside_grid & grid.dirichlet[ci, cj]
        weight = np.ones(m)
        rows.append(np.nonzero(nbr_unknown)[0])
        cols.append(index[ci, cj][nbr_unknown])
        vals.append(-weight[nbr_unknown])
        rhs += np.where(nbr_dir, grid.boundary_values[ci, cj], 0.0) / h**2
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    A = (A + sp.diags(diag)) / h**2
    scale = np.where(neumann_row, 0.5, 1.0)
    A = sp.diags(scale) @ A
    rhs = scale * rhs
    return A.tocsr(), rhs, (ii, jj)


def conjugate_gradient(A, b: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None):
    """Jacobi-preconditioned CG. Returns ``(x, converged, iterations)``."""
    n = len(b)
    max_iter = 50 * n if max_iter is None else max_iter
    inv_d = 1.0 / A.diagonal()
    x = np.zeros(n)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, True, 0
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, True, it
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, False, max_iter


@dataclass
class FomField:
    grid: MaskedGrid
    values: np.ndarray  # (n, n), nan outside the mask
    problem: Problem

    @property
    def h(self) -> float:
        return self.grid.h

    def _cells(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n, h = self.grid.n, self.grid.h
        fi = np.clip(np.floor((pts[:, 0] + 1.0) / h).astype(int), 0, n - 2)
        fj = np.clip(np.floor((pts[:, 1] + 1.0) / h).astype(int), 0, n - 2)
        ok = self._cell_ok[fi, fj]
        bad = np.flatnonzero(~ok)
        if len(bad):
            # nearest fully-interior cell whose centre lies within 2h
            offs = np.arange(-3, 4)
            oi, oj = np.meshgrid(offs, offs, indexing="ij")
            oi, oj = oi.ravel(), oj.ravel()
            for b in bad:
                ci = np.clip(fi[b] + oi, 0, n - 2)
                cj = np.clip(fj[b] + oj, 0, n - 2)
                good = self._cell_ok[ci, cj]
                if not good.any():
                    continue
                cx = -1.0 + h * (ci + 0.5)
                cy = -1.0 + h * (cj + 0.5)
                d = np.hypot(cx - pts[b, 0], cy - pts[b, 1])
                d[~good] = np.inf
                best = int(np.argmin(d))
                if d[best] <= 2.0 * h:
                    fi[b], fj[b], ok[b] = ci[best], cj[best], True
        return pts, fi, fj, ok

    @property
    def _cell_ok(self):
        m = self.grid.mask
        return m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]

    def valid(self, points) -> np.ndarray:
        return self._cells(points)[3]

    def interpolate(self, points) -> np.ndarray:
        """Bilinear interpolation over the containing (or nearest interior) cell."""
        single = np.asarray(points).ndim == 1
        pts, fi, fj, ok = self._cells(points)
        if not np.all(ok):
            bad = np.flatnonzero(~ok)[0]
            raise OutOfDomainError(f"point {pts[bad].tolist()} has no interior cell within 2h")
        h = self.grid.h
        tx = (pts[:, 0] - (-1.0 + h * fi)) / h
        ty = (pts[:, 1] - (-1.0 + h * fj)) / h
        v = self.values
        out = (
            v[fi, fj] * (1 - tx) * (1 - ty)
            + v[fi + 1, fj] * tx * (1 - ty)
            + v[fi, fj + 1] * (1 - tx) * ty
            + v[fi + 1, fj + 1] * tx * ty
        )
        return out[0] if single else out

    def node_points(self) -> tuple[np.ndarray, np.ndarray]:
        ii, jj = np.nonzero(self.grid.mask)
        x, y = self.grid.coords(ii, jj)
        return np.column_stack([x, y]), self.values[ii, jj]


def solve_fom(shape: Shape, problem: Problem | str = Problem.POISSON_UNIT_SOURCE,
              h: float = DEFAULT_H, source: float = 1.0, rtol: float = 1e-10) -> FomField:
    problem = Problem(problem)
    grid = build_grid(shape, problem, h)
    A, rhs, (ii, jj) = _assemble(grid, problem, source)
    values = np.full((grid.n, grid.n), np.nan)
    values[grid.dirichlet] = grid.boundary_values[grid.dirichlet]
    if len(rhs):
        x, converged, iters = conjugate_gradient(A, rhs, rtol)
        if not converged:
            log.warning("shape %d: CG did not converge; solving connected components separately",
                        shape.shape_id)
            labels, n_comp = ndimage.label(grid.mask & ~grid.dirichlet)
            comp = labels[ii, jj]
            x = np.zeros(len(rhs))
            for c in range(1, n_comp + 1):
                sel = np.flatnonzero(comp == c)
                xc, ok, _ = conjugate_gradient(A[sel][:, sel], rhs[sel], rtol)
                if not ok:
                    raise SolverError(f"shape {shape.shape_id}: CG failed on component {c}")
                x[sel] = xc
        else:
            log.debug("shape %d: CG converged in %d iterations", shape.shape_id, iters)
        values[ii, jj] = x
    return FomField(grid, values, problem)


def write_fom_csv(path: str | Path, field: FomField) -> None:
    pts, vals = field.node_points()
    with open(path, "w") as fh:
        fh.write(f"# problem={field.problem.value} h={format(field.h, '.17g')} n={field.grid.n}\n")
        fh.write("x,y,u\n")
        for (x, y), u in zip(pts, vals):
            fh.write(f"{format(x, '.17g')},{format(y, '.17g')},{format(u, '.17g')}\n")


def read_fom_csv(path: str | Path) -> FomField:
    """Rebuild a field from its node dump (Dirichlet flags are not recoverable)."""
    with open(path) as fh:
        meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
        header = fh.readline().strip()
        if header != "x,y,u":
            raise ValueError(f"unexpected fom csv header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = int(meta["n"])
    h = 2.0 / (n - 1)
    ii = np.rint((data[:, 0] + 1.0) / h).astype(int)
    jj = np.rint((data[:, 1] + 1.0) / h).astype(int)
    mask = np.zeros((n, n), dtype=bool)
    mask[ii, jj] = True
    values = np.full((n, n), np.nan)
    values[ii, jj] = data[:, 2]
    grid = MaskedGrid(h, n, mask, np.zeros_like(mask), np.zeros((n, n)))
    return FomField(grid, values, Problem(meta["problem"]))
