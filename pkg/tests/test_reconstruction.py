import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import chamfer_scan
from sdf_surrogate import geometry
from sdf_surrogate.autodecoder import SdfArch, SdfLossSpec, SdfSchedule, train_sdf
from sdf_surrogate.geometry import Family, ShapeFamilySpec
from sdf_surrogate.reconstruction import (
    EmptyReconstruction,
    GridSpec,
    LevelSetGrid,
    chamfer_distance,
    count_negative_components,
    evaluate_dataset,
    evaluate_reconstruction,
    marching_squares,
    marching_squares_segments,
    predicted_grid,
    write_cd_report,
)
from sdf_surrogate.sdf_dataset import build_sdf_dataset


def analytic_grid(f, n=201):
    grid = LevelSetGrid.spanning((-1, -1), (1, 1), n)
    xy = grid.nodes()
    grid.values = f(xy[:, 0], xy[:, 1]).reshape(grid.shape)
    return grid


@pytest.fixture(scope="module")
def disk_model():
    spec = ShapeFamilySpec(Family.DISK, seed=2, n_vertices=128)
    shapes = [geometry.sample_shape(spec, i) for i in range(20)]
    sets = [build_sdf_dataset(s, n_boundary=400, n_grid_per_axis=10) for s in shapes]
    sched = SdfSchedule(adam_epochs=150, batch_shapes=5, points_per_shape=200, lbfgs_points_per_shape=200,
                        lbfgs_max_iter=150)
    model = train_sdf(sets, 3, SdfArch(hidden=(24, 24)), SdfLossSpec(), sched, seed=0)
    return shapes, model


def test_vertical_line_is_exact():
    pts = marching_squares(analytic_grid(lambda x, y: x + 0.0 * y, 200))
    assert len(pts) > 0
    assert np.max(np.abs(pts[:, 0])) < 1e-12


def test_circle_error_below_squared_spacing():
    grid = analytic_grid(lambda x, y: np.hypot(x, y) - 0.5)
    pts = marching_squares(grid)
    assert np.max(np.abs(np.hypot(pts[:, 0], pts[:, 1]) - 0.5)) < grid.spacing[0] ** 2


def test_all_positive_grid_is_empty():
    with pytest.raises(EmptyReconstruction):
        marching_squares(analytic_grid(lambda x, y: 1.0 + x * 0, 11))


def test_points_lie_on_grid_lines(rng):
    grid = LevelSetGrid.spanning((-1, -1), (1, 1), 40, values=rng.normal(size=(40, 40)))
    pts = marching_squares(grid)
    gx = (pts[:, 0] - grid.origin[0]) / grid.spacing[0]
    gy = (pts[:, 1] - grid.origin[1]) / grid.spacing[1]
    on_line = (np.abs(gx - np.round(gx)) < 1e-9) | (np.abs(gy - np.round(gy)) < 1e-9)
    assert on_line.all()


def test_point_count_equals_straddling_edges(rng):
    v = rng.normal(size=(30, 25))
    grid = LevelSetGrid.spanning((0, 0), (1, 1), 30, 25, values=v)
    neg = v < 0
    edges = np.count_nonzero(neg[1:] != neg[:-1]) + np.count_nonzero(neg[:, 1:] != neg[:, :-1])
    assert len(marching_squares(grid)) == edges


def test_saddle_cell_follows_centre_average():
    # corners (0,0),(1,0),(1,1),(0,1) = +, -, +, -
    high = LevelSetGrid((0, 0), 1.0, np.array([[1.0, -0.5], [-0.5, 1.0]]))
    low = LevelSetGrid((0, 0), 1.0, np.array([[0.5, -1.0], [-1.0, 0.5]]))
    seg_high = marching_squares_segments(high)
    seg_low = marching_squares_segments(low)
    assert len(seg_high) == len(seg_low) == 2

    def cuts_corner(segs, corner):
        return any(np.linalg.norm((a + b) / 2 - corner) < 0.5 for a, b in segs)

    # centre above iso: positive corners connect, so the negative corners are cut off
    assert cuts_corner(seg_high, np.array([1.0, 0.0])) and cuts_corner(seg_high, np.array([0.0, 1.0]))
    assert cuts_corner(seg_low, np.array([0.0, 0.0])) and cuts_corner(seg_low, np.array([1.0, 1.0]))


def test_grid_validation():
    with pytest.raises(ValueError):
        LevelSetGrid((0, 0), 0.0, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        LevelSetGrid((0, 0), 0.1, np.array([[0.0, np.nan]]))


def test_chamfer_examples():
    assert chamfer_distance([[0, 0]], [[1, 0]]) == 2.0
    s = np.random.default_rng(1).normal(size=(50, 2))
    assert chamfer_distance(s, s) == 0.0
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 2)), s)


def test_chamfer_matches_linear_scan(rng):
    a, b = rng.uniform(-1, 1, (500, 2)), rng.uniform(-1, 1, (500, 2))
    assert abs(chamfer_distance(a, b) - chamfer_scan(a, b)) < 1e-12


point_sets = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(2)), elements=st.floats(-5, 5))


@settings(max_examples=50, deadline=None)
@given(point_sets, point_sets, st.floats(0.1, 10))
def test_chamfer_symmetric_and_scales_quadratically(a, b, c):
    assert chamfer_distance(a, b) == chamfer_distance(b, a)
    assert chamfer_distance(c * a, c * b) == pytest.approx(c**2 * chamfer_distance(a, b), rel=1e-9, abs=1e-12)


def test_negative_components_counted():
    two_holes = analytic_grid(lambda x, y: np.minimum(np.hypot(x - 0.5, y), np.hypot(x + 0.5, y)) - 0.2, 81)
    assert count_negative_components(two_holes) == 2


def test_self_comparison_is_zero(disk_model):
    _, model = disk_model
    grid = predicted_grid(model, model.codes[0], GridSpec(n=101))
    ref = marching_squares(grid)
    cd, pts = evaluate_reconstruction(model, model.codes[0], ref, GridSpec(n=101))
    assert cd < 1e-20
    assert len(pts) == len(ref)


def test_wrong_code_scores_worse(disk_model):
    shapes, model = disk_model
    spec = GridSpec(n=101)
    refs = [geometry.densify_boundary(s, 4000) for s in shapes]
    matched = evaluate_dataset(model, model.codes, refs, [s.shape_id for s in shapes], spec)
    wrong_codes = np.roll(model.codes, 1, axis=0)
    wrong = evaluate_dataset(model, wrong_codes, refs, [s.shape_id for s in shapes], spec)
    assert matched.n_failed == 0
    assert all(w > m for w, m in zip(wrong.cd, matched.cd))


def test_failures_are_excluded_from_mean(tmp_path, monkeypatch, disk_model):
    shapes, model = disk_model
    from sdf_surrogate import reconstruction

    real = reconstruction.predict_sdf

    def collapse_second(m, code, pts, centroid=None):
        out = real(m, code, pts, centroid)
        return np.abs(out) + 1.0 if np.array_equal(code, model.codes[1]) else out

    monkeypatch.setattr(reconstruction, "predict_sdf", collapse_second)
    refs = [geometry.densify_boundary(s, 500) for s in shapes[:3]]
    report = evaluate_dataset(model, list(model.codes[:3]), refs, [1, 2, 3], GridSpec(n=61))
    assert report.failed == [False, True, False]
    assert np.isnan(report.cd[1])
    assert report.mean_cd == pytest.approx((report.cd[0] + report.cd[2]) / 2, rel=1e-15)
    write_cd_report(tmp_path / "cd.csv", report)
    lines = (tmp_path / "cd.csv").read_text().splitlines()
    assert lines[0] == "shape_id,cd,failed" and lines[2] == "2,nan,1"
