"""Parametric 2D shape families, point membership and exact signed distances.

Shapes live in the [-1, 1]^2 working frame. A shape is an outer polygon plus
zero or more hole polygons; the domain is the region inside the outer loop
and outside every hole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

N_CIRCLE_VERTICES = 256
BOUNDARY_TOL = 1e-12
RESAMPLE_LIMIT = 100


class GeometryError(ValueError):
    pass


class ResampleLimitError(GeometryError):
    """Raised when too many consecutive candidates violate the shape invariants."""


class Family(str, Enum):
    PLATE_WITH_HOLES = "PlateWithHoles"
    BLOB_FOURIER = "BlobFourier"
    DISK = "Disk"


@dataclass(frozen=True, eq=False)
class Shape:
    outer_loop: np.ndarray
    hole_loops: tuple[np.ndarray, ...] = ()
    params: np.ndarray | None = None
    shape_id: int = 0
    family: Family | None = None

    def __post_init__(self):
        outer = np.ascontiguousarray(self.outer_loop, dtype=float)
        holes = tuple(np.ascontiguousarray(h, dtype=float) for h in self.hole_loops)
        outer.setflags(write=False)
        for h in holes:
            h.setflags(write=False)
        object.__setattr__(self, "outer_loop", outer)
        object.__setattr__(self, "hole_loops", holes)
        if self.params is not None:
            p = np.array(self.params, dtype=float)
            p.setflags(write=False)
            object.__setattr__(self, "params", p)

    @property
    def loops(self) -> tuple[np.ndarray, ...]:
        return (self.outer_loop,) + self.hole_loops

    @property
    def n_holes(self) -> int:
        return len(self.hole_loops)


@dataclass
class ShapeFamilySpec:
    """Sampling recipe for one shape family.

    ``ranges`` maps parameter names to ``(min, max)``. Unlisted parameters
    take the family defaults from :data:`DEFAULT_RANGES`.
    """

    family: Family = Family.PLATE_WITH_HOLES
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    hole_count_choices: tuple[int, ...] = (2,)
    hole_count_weights: tuple[float, ...] | None = None
    min_gap: float = 0.1
    n_vertices: int = N_CIRCLE_VERTICES
    seed: int = 0

    def __post_init__(self):
        self.family = Family(self.family)
        merged = dict(DEFAULT_RANGES[self.family])
        merged.update({k: tuple(v) for k, v in self.ranges.items()})
        unknown = set(merged) - set(DEFAULT_RANGES[self.family])
        if unknown:
            raise GeometryError(f"unknown range keys for {self.family.value}: {sorted(unknown)}")
        for name, (lo, hi) in merged.items():
            if not hi > lo:
                raise GeometryError(f"degenerate range for {name}: [{lo}, {hi}]")
        self.ranges = merged
        self.hole_count_choices = tuple(int(c) for c in self.hole_count_choices)
        if self.hole_count_weights is not None:
            w = np.asarray(self.hole_count_weights, dtype=float)
            if len(w) != len(self.hole_count_choices) or np.any(w < 0) or w.sum() <= 0:
                raise GeometryError("hole_count_weights must match hole_count_choices")
            self.hole_count_weights = tuple(float(x) for x in w / w.sum())

    @property
    def max_holes(self) -> int:
        return max(self.hole_count_choices)

    @property
    def param_length(self) -> int:
        if self.family is Family.PLATE_WITH_HOLES:
            return 3 * self.max_holes + 1
        if self.family is Family.DISK:
            return 3
        return 1 + 2 * BLOB_HARMONICS


BLOB_HARMONICS = 5

DEFAULT_RANGES: dict[Family, dict[str, tuple[float, float]]] = {
    Family.PLATE_WITH_HOLES: {"radius": (0.15, 0.3), "center": (-0.5, 0.5)},
    Family.DISK: {"cx": (-0.3, 0.3), "cy": (-0.3, 0.3), "radius": (0.3, 0.6)},
    Family.BLOB_FOURIER: {"r0": (0.5, 0.7), "coef": (-0.06, 0.06)},
}


# ---------------------------------------------------------------------------
# constructors


def circle_loop(cx: float, cy: float, r: float, n: int = N_CIRCLE_VERTICES) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([cx + r * np.cos(phi), cy + r * np.sin(phi)])


def square_loop(half: float = 1.0) -> np.ndarray:
    return np.array([[-half, -half], [half, -half], [half, half], [-half, half]], dtype=float)


def blob_radius(params: np.ndarray, phi: np.ndarray) -> np.ndarray:
    r0 = params[0]
    a = params[1 : 1 + BLOB_HARMONICS]
    b = params[1 + BLOB_HARMONICS :]
    n = np.arange(1, BLOB_HARMONICS + 1)
    ang = np.multiply.outer(phi, n)
    return r0 + np.cos(ang) @ a + np.sin(ang) @ b


def shape_from_params(
    family: Family | str,
    params: Sequence[float],
    shape_id: int = 0,
    n_vertices: int = N_CIRCLE_VERTICES,
) -> Shape:
    """Build the shape encoded by an explicit parameter vector."""
    family = Family(family)
    params = np.asarray(params, dtype=float)
    if family is Family.PLATE_WITH_HOLES:
        n_holes = int(round(params[-1]))
        holes = tuple(
            circle_loop(*params[3 * i : 3 * i + 3], n=n_vertices) for i in range(n_holes)
        )
        return Shape(square_loop(), holes, params, shape_id, family)
    if family is Family.DISK:
        return Shape(circle_loop(*params, n=n_vertices), (), params, shape_id, family)
    phi = 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    r = blob_radius(params, phi)
    outer = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    return Shape(outer, (), params, shape_id, family)


def _draw_hole_count(spec: ShapeFamilySpec, rng: np.random.Generator) -> int:
    if spec.hole_count_weights is None:
        return int(rng.choice(spec.hole_count_choices))
    return int(rng.choice(spec.hole_count_choices, p=spec.hole_count_weights))


def _draw_params(spec: ShapeFamilySpec, rng: np.random.Generator, n_holes: int = 0) -> np.ndarray:
    rg = spec.ranges
    if spec.family is Family.PLATE_WITH_HOLES:
        holes = []
        for _ in range(n_holes):
            cx, cy = rng.uniform(*rg["center"], size=2)
            holes.append((cx, cy, rng.uniform(*rg["radius"])))
        # canonical order so explicit parameters are well defined
        holes.sort(key=lambda h: (h[0], h[1]))
        params = np.zeros(spec.param_length)
        for i, h in enumerate(holes):
            params[3 * i : 3 * i + 3] = h
        params[-1] = n_holes
        return params
    if spec.family is Family.DISK:
        return np.array(
            [rng.uniform(*rg["cx"]), rng.uniform(*rg["cy"]), rng.uniform(*rg["radius"])]
        )
    r0 = rng.uniform(*rg["r0"])
    coef = rng.uniform(*rg["coef"], size=2 * BLOB_HARMONICS)
    return np.concatenate([[r0], coef])


def _params_admissible(spec: ShapeFamilySpec, params: np.ndarray) -> bool:
    if spec.family is Family.PLATE_WITH_HOLES:
        n = int(params[-1])
        for i in range(n):
            for j in range(i + 1, n):
                xi, yi, ri = params[3 * i : 3 * i + 3]
                xj, yj, rj = params[3 * j : 3 * j + 3]
                if math.hypot(xi - xj, yi - yj) <= ri + rj + spec.min_gap:
                    return False
        return True
    if spec.family is Family.BLOB_FOURIER:
        phi = np.linspace(0.0, 2.0 * np.pi, 2048, endpoint=False)
        r = blob_radius(params, phi)
        return bool(r.min() > 0.05 and r.max() < 1.0)
    return True


def sample_shape(spec: ShapeFamilySpec, index: int) -> Shape:
    """Draw shape number ``index`` of a family; deterministic in ``(spec.seed, index)``."""
    if index < 0:
        raise GeometryError("index must be non-negative")
    rng = np.random.default_rng([spec.seed, index])
    # the hole count is fixed before rejection so the requested mix is preserved
    n_holes = _draw_hole_count(spec, rng) if spec.family is Family.PLATE_WITH_HOLES else 0
    for _ in range(RESAMPLE_LIMIT):
        params = _draw_params(spec, rng, n_holes)
        if not _params_admissible(spec, params):
            continue
        shape = shape_from_params(spec.family, params, shape_id=index, n_vertices=spec.n_vertices)
        if not validate_shape(shape, raise_on_error=False):
            continue
        return shape
    raise ResampleLimitError(
        f"{RESAMPLE_LIMIT} consecutive candidates violated shape invariants "
        f"(family={spec.family.value}, seed={spec.seed}, index={index})"
    )


# ---------------------------------------------------------------------------
# segments and invariants


def loop_segments(loop: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return loop, np.roll(loop, -1, axis=0)


def boundary_segments(
    shape: Shape, include_outer: bool = True, include_holes: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every boundary edge, stacked over loops."""
    loops = []
    if include_outer:
        loops.append(shape.outer_loop)
    if include_holes:
        loops.extend(shape.hole_loops)
    if not loops:
        raise GeometryError("no boundary loops selected")
    a = np.concatenate([l for l in loops])
    b = np.concatenate([np.roll(l, -1, axis=0) for l in loops])
    return a, b


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
        c[..., 0] - a[..., 0]
    )


def segments_intersect(a1, b1, a2, b2) -> np.ndarray:
    """Pairwise proper-or-touching intersection test; returns (n1, n2) booleans."""
    A1, B1 = a1[:, None, :], b1[:, None, :]
    A2, B2 = a2[None, :, :], b2[None, :, :]
    d1 = _orient(A2, B2, A1)
    d2 = _orient(A2, B2, B1)
    d3 = _orient(A1, B1, A2)
    d4 = _orient(A1, B1, B2)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0)


def _self_intersects(loop: np.ndarray) -> bool:
    a, b = loop_segments(loop)
    hit = segments_intersect(a, b, a, b)
    n = len(loop)
    i, j = np.indices((n, n))
    # adjacent edges share a vertex by construction
    adjacent = (i == j) | (j == (i + 1) % n) | (i == (j + 1) % n)
    return bool(np.any(hit & ~adjacent))


def _loops_intersect(l1: np.ndarray, l2: np.ndarray) -> bool:
    a1, b1 = loop_segments(l1)
    a2, b2 = loop_segments(l2)
    return bool(np.any(segments_intersect(a1, b1, a2, b2)))


def validate_shape(shape: Shape, raise_on_error: bool = True) -> bool:
    problems = []
    if len(shape.outer_loop) < 3:
        problems.append("outer loop has fewer than 3 vertices")
    elif _self_intersects(shape.outer_loop):
        problems.append("outer loop self-intersects")
    for i, hole in enumerate(shape.hole_loops):
        if len(hole) < 3 or _self_intersects(hole):
            problems.append(f"hole {i} is degenerate or self-intersecting")
            continue
        if not np.all(_even_odd(shape.outer_loop, hole)) or _loops_intersect(shape.outer_loop, hole):
            problems.append(f"hole {i} not strictly inside outer loop")
        for j in range(i):
            other = shape.hole_loops[j]
            if (
                _loops_intersect(hole, other)
                or np.any(_even_odd(other, hole))
                or np.any(_even_odd(hole, other))
            ):
                problems.append(f"holes {j} and {i} overlap")
    if problems:
        if raise_on_error:
            raise GeometryError("; ".join(problems))
        return False
    return True


# ---------------------------------------------------------------------------
# membership and distance


def _even_odd(loop: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Even-odd ray casting with a horizontal ray towards +x."""
    points = np.atleast_2d(points)
    px = points[:, 0]
    py = points[:, 1].copy()
    # nudge rays that would pass exactly through a vertex
    on_vertex_row = np.isin(py, loop[:, 1])
    py[on_vertex_row] += 1e-9
    a, b = loop_segments(loop)
    inside = np.zeros(len(points), dtype=bool)
    for start in range(0, len(a), 512):
        ax, ay = a[start : start + 512, 0], a[start : start + 512, 1]
        bx, by = b[start : start + 512, 0], b[start : start + 512, 1]
        straddle = (ay[None, :] > py[:, None]) != (by[None, :] > py[:, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (py[:, None] - ay[None, :]) / (by - ay)[None, :]
        x_cross = ax[None, :] + t * (bx - ax)[None, :]
        crossings = straddle & (px[:, None] < x_cross)
        inside ^= (np.count_nonzero(crossings, axis=1) % 2).astype(bool)
    return inside


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Minimum Euclidean distance from each point to a set of segments."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    out = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        d = p[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pij,ij->pi", d, ab) / ab2, 0.0, 1.0)
        q = d - t[..., None] * ab[None, :, :]
        out[start : start + chunk] = np.sqrt(np.einsum("pij,pij->pi", q, q).min(axis=1))
    return out


def contains(shape: Shape, p) -> np.ndarray | bool:
    """Domain membership; points within 1e-12 of the boundary count as inside."""
    pts = np.asarray(p, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    inside = _even_odd(shape.outer_loop, pts)
    for hole in shape.hole_loops:
        inside &= ~_even_odd(hole, pts)
    if not np.all(inside):
        a, b = boundary_segments(shape)
        cand = ~inside
        inside[cand] = segment_distance(pts[cand], a, b) <= BOUNDARY_TOL
    return bool(inside[0]) if scalar else inside


def exact_sdf(shape: Shape, p, include_outer: bool = True) -> np.ndarray | float:
    """Signed distance to the boundary, positive inside the domain.

    With ``include_outer=False`` only the hole loops count as boundary and
    the sign is negative strictly inside a hole.
    """
    pts = np.asarray(p, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    a, b = boundary_segments(shape, include_outer=include_outer)
    dist = segment_distance(pts, a, b)
    if include_outer:
        inside = contains(shape, pts)
    else:
        inside = np.ones(len(pts), dtype=bool)
        for hole in shape.hole_loops:
            inside &= ~_even_odd(hole, pts)
        inside |= dist <= BOUNDARY_TOL
    out = np.where(inside, dist, -dist)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# boundary sampling and derived quantities


def _selected_loops(shape: Shape, include_outer: bool) -> list[np.ndarray]:
    loops = list(shape.hole_loops)
    if include_outer:
        loops.insert(0, shape.outer_loop)
    if not loops:
        raise GeometryError("no boundary loops selected")
    return loops


def sample_boundary(
    shape: Shape, n: int, rng: np.random.Generator, include_outer: bool = True
) -> np.ndarray:
    """Points drawn uniformly by arc length along the selected boundary loops."""
    a, b = boundary_segments(shape, include_outer=include_outer)
    length = np.linalg.norm(b - a, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(length)])
    s = rng.uniform(0.0, cum[-1], size=n)
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(a) - 1)
    t = (s - cum[seg]) / np.where(length[seg] > 0, length[seg], 1.0)
    return a[seg] + t[:, None] * (b[seg] - a[seg])


def densify_boundary(shape: Shape, n: int, include_outer: bool = True) -> np.ndarray:
    """Evenly spaced (by arc length) points on the polygonal boundary."""
    a, b = boundary_segments(shape, include_outer=include_outer)
    length = np.linalg.norm(b - a, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(length)])
    s = (np.arange(n) + 0.5) * cum[-1] / n
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(a) - 1)
    t = (s - cum[seg]) / length[seg]
    return a[seg] + t[:, None] * (b[seg] - a[seg])


def polygon_area_centroid(loop: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed area and area centroid of a simple polygon (shoelace formula)."""
    x, y = loop[:, 0], loop[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def shape_centroid(shape: Shape, include_outer: bool = True) -> np.ndarray:
    """Area centroid of the region described by the selected boundary.

    With the outer loop included this is the centroid of the outer loop. When
    only holes carry the signed distance, it is the centroid of the union of
    holes, which is what moves from shape to shape in a plate family.
    """
    if include_outer or not shape.hole_loops:
        return polygon_area_centroid(shape.outer_loop)[1]
    weights, centers = [], []
    for hole in shape.hole_loops:
        area, c = polygon_area_centroid(hole)
        weights.append(abs(area))
        centers.append(c)
    w = np.asarray(weights)
    return (w[:, None] * np.asarray(centers)).sum(axis=0) / w.sum()


def wall_mask(shape: Shape, open_half_angle: float = 0.15) -> list[np.ndarray]:
    """Per-loop boolean mask of edges that count as physical walls.

    For the blob family the two outer arcs around phi=0 and phi=pi are tagged
    as inflow/outflow and excluded; every other edge is a wall.
    """
    masks = []
    for k, loop in enumerate(shape.loops):
        mask = np.ones(len(loop), dtype=bool)
        if k == 0 and shape.family is Family.BLOB_FOURIER:
            mid = 0.5 * (loop + np.roll(loop, -1, axis=0))
            phi = np.arctan2(mid[:, 1], mid[:, 0])
            near_inflow = np.abs(np.abs(phi) - np.pi) < open_half_angle
            near_outflow = np.abs(phi) < open_half_angle
            mask &= ~(near_inflow | near_outflow)
        masks.append(mask)
    return masks


def gamma_segments(shape: Shape, gamma: str = "ALL") -> tuple[np.ndarray, np.ndarray]:
    """Segments of the physical boundary subset used for the distance feature."""
    gamma = gamma.upper()
    if gamma == "ALL":
        return boundary_segments(shape)
    if gamma != "WALLS_ONLY":
        raise GeometryError(f"unknown boundary selector {gamma!r}")
    starts, ends = [], []
    for loop, mask in zip(shape.loops, wall_mask(shape)):
        a, b = loop_segments(loop)
        starts.append(a[mask])
        ends.append(b[mask])
    return np.concatenate(starts), np.concatenate(ends)


# ---------------------------------------------------------------------------
# shapes.txt


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_shapes(path: str | Path, shapes: Sequence[Shape]) -> None:
    """Write one record per line.

    Record layout: ``shape_id; params; loop_count; loop; loop ...`` where
    params is a comma-separated list (or ``-``) and each loop is
    ``vertex_count x,y x,y ...``. A leading ``# family <name>`` line tags
    the shape family when known.
    """
    lines = ["# shapes.txt v1"]
    families = {s.family for s in shapes if s.family is not None}
    if len(families) == 1:
        lines.append(f"# family {families.pop().value}")
    for s in shapes:
        params = "-" if s.params is None else ",".join(_fmt(v) for v in s.params)
        fields = [str(s.shape_id), params, str(len(s.loops))]
        for loop in s.loops:
            coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in loop)
            fields.append(f"{len(loop)} {coords}")
        lines.append("; ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_shapes(path: str | Path) -> list[Shape]:
    family = None
    shapes = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "family":
                family = Family(parts[1])
            continue
        fields = [f.strip() for f in line.split(";")]
        shape_id = int(fields[0])
        params = None if fields[1] == "-" else np.array([float(v) for v in fields[1].split(",")])
        loop_count = int(fields[2])
        if len(fields) != 3 + loop_count:
            raise GeometryError(f"shape {shape_id}: expected {loop_count} loops")
        loops = []
        for f in fields[3:]:
            head, *pairs = f.split()
            if int(head) != len(pairs):
                raise GeometryError(f"shape {shape_id}: vertex count mismatch")
            loops.append(np.array([[float(c) for c in pr.split(",")] for pr in pairs]))
        shapes.append(Shape(loops[0], tuple(loops[1:]), params, shape_id, family))
    return shapes
