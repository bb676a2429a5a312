import csv

import numpy as np
import pytest

from sdf_surrogate import geometry, nn
from sdf_surrogate.autodecoder import SdfArch, SdfLossSpec, SdfSchedule, train_sdf
from sdf_surrogate.fom import solve_fom
from sdf_surrogate.geometry import Family, Shape, ShapeFamilySpec
from sdf_surrogate.sdf_dataset import PhysSamples, build_phys_points, build_sdf_dataset
from sdf_surrogate.surrogate import (
    Encoder,
    FeatureSpec,
    OnlineConfig,
    PhysSchedule,
    PhysTrainingSet,
    PointOutsideShape,
    assemble_features,
    load_surrogate,
    predict,
    relative_l2,
    run_online,
    save_surrogate,
    shape_latent,
    train_phys,
    write_eval_report,
    write_point_dump,
)

H = 1.0 / 32
ZERO = PhysSchedule(adam_epochs=0, lbfgs_max_iter=0)
SHORT = PhysSchedule(adam_epochs=30, batch_points=100, lbfgs_max_iter=150)


@pytest.fixture(scope="module")
def disks():
    spec = ShapeFamilySpec(Family.DISK, seed=4, n_vertices=96)
    shapes = [geometry.sample_shape(spec, i) for i in range(4)]
    samples = [build_phys_points(s, solve_fom(s, h=H), 150) for s in shapes]
    return shapes, samples


@pytest.fixture(scope="module")
def sdf_model(disks):
    shapes, _ = disks
    sets = [build_sdf_dataset(s, n_boundary=300, n_grid_per_axis=8) for s in shapes]
    sched = SdfSchedule(adam_epochs=40, batch_shapes=4, points_per_shape=150, lbfgs_points_per_shape=150,
                        lbfgs_max_iter=60)
    return train_sdf(sets, 2, SdfArch(hidden=(16, 16)), SdfLossSpec(), sched, seed=0)


@pytest.fixture(scope="module")
def surrogate(disks, sdf_model):
    _, samples = disks
    sets = [PhysTrainingSet(ps, z) for ps, z in zip(samples, sdf_model.codes)]
    return train_phys(sets, (12, 8), SHORT, FeatureSpec(use_df=True), seed=2)


def test_relative_l2_examples(rng):
    r = rng.normal(size=(50, 1))
    assert relative_l2(r, r) == 0.0
    assert relative_l2(np.zeros_like(r), r) == 1.0
    assert abs(relative_l2(1.1 * r, r) - 0.1) < 1e-12
    with pytest.raises(ZeroDivisionError):
        relative_l2(r, np.zeros_like(r))
    with pytest.raises(ValueError):
        relative_l2(r[:10], r)


def test_relative_l2_accumulates_jointly():
    p = [np.array([1.0]), np.array([0.0, 0.0])]
    r = [np.array([2.0]), np.array([1.0, 1.0])]
    joint = relative_l2(np.concatenate(p), np.concatenate(r))
    assert joint == pytest.approx(np.sqrt(3 / 6))
    assert joint != pytest.approx(np.mean([relative_l2(a, b) for a, b in zip(p, r)]))


def test_feature_width_and_layout():
    spec = FeatureSpec(use_df=True, use_centroid=True)
    X = assemble_features(spec, [[0.1, 0.2], [0.3, 0.4]], [7.0, 8.0, 9.0], df=[0.5, 0.6], centroid=[1.0, 2.0])
    assert X.shape == (2, spec.width(3)) == (2, 8)
    np.testing.assert_array_equal(X[1], [0.3, 0.4, 7, 8, 9, 0.6, 1, 2])
    with pytest.raises(ValueError):
        assemble_features(spec, [[0, 0]], [1.0])


def test_explicit_params_encoder(disk):
    assert np.array_equal(shape_latent(Encoder.EXPLICIT_PARAMS, None, disk), disk.params)
    with pytest.raises(ValueError):
        shape_latent(Encoder.EXPLICIT_PARAMS, None, Shape(geometry.square_loop()))


def test_constant_field_is_fit(disk, rng):
    pts = rng.uniform(-0.2, 0.2, (200, 2)) + disk.params[:2]
    samples = PhysSamples(disk.shape_id, pts, np.ones(200), np.full((200, 1), 0.37))
    sur = train_phys([PhysTrainingSet(samples, np.zeros(2))], (8,), PhysSchedule(adam_epochs=20, batch_points=50,
                                                                              lbfgs_max_iter=100),
                     FeatureSpec(use_df=False))
    assert sur.history["train_mse"] < 1e-8
    q = disk.params[:2] + rng.uniform(-0.3, 0.3, (20, 2))
    np.testing.assert_allclose(predict(sur, None, np.zeros(2), disk, q), 0.37, atol=1e-3)


def test_duplicated_set_doubles_the_loss(disks):
    _, samples = disks
    single = train_phys([PhysTrainingSet(samples[0], np.zeros(2))], (6,), ZERO, seed=1)
    double = train_phys([PhysTrainingSet(samples[0], np.zeros(2))] * 2, (6,), ZERO, seed=1)
    assert abs(double.history["final_loss"] - 2 * single.history["final_loss"]) < 1e-12 * max(
        1.0, single.history["final_loss"])


def test_zero_schedule_is_the_initial_net(tmp_path, disks):
    shapes, samples = disks
    sur = train_phys([PhysTrainingSet(samples[0], np.array([0.5, -0.5]))], (6, 4), ZERO, seed=9)
    save_surrogate(tmp_path / "phys.ckpt", sur)
    back = load_surrogate(tmp_path / "phys.ckpt")
    init = nn.Mlp.init((5, 6, 4, 1), "TANH", np.random.default_rng(9))
    pts = samples[0].points[:30]
    raw = assemble_features(sur.feature_spec, pts, [0.5, -0.5], samples[0].df[:30])
    manual = back.out_norm.denormalize(nn.forward(init, back.in_norm.normalize(raw)))
    np.testing.assert_allclose(predict(back, None, [0.5, -0.5], shapes[0], pts), manual, atol=1e-15)


def test_checkpoint_roundtrip(tmp_path, surrogate):
    path = tmp_path / "phys_model.ckpt"
    save_surrogate(path, surrogate)
    back = load_surrogate(path)
    assert back.net.get_flat().tobytes() == surrogate.net.get_flat().tobytes()
    assert back.feature_spec == surrogate.feature_spec
    save_surrogate(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_training_never_worse_after_lbfgs(surrogate):
    assert surrogate.history["final_loss"] <= surrogate.history["adam_end_loss"]


def test_replay_matches_training_metric(disks):
    shapes, samples = disks
    sur = train_phys([PhysTrainingSet(samples[1], np.zeros(2))], (8,), SHORT, seed=0)
    pred = predict(sur, None, np.zeros(2), shapes[1], samples[1].points)
    assert abs(relative_l2(pred, samples[1].u) - sur.history["train_rel_l2"]) < 1e-10


def test_pointwise_independence(disks, sdf_model, surrogate, rng):
    shapes, samples = disks
    pts = samples[2].points[:80]
    z = sdf_model.codes[2]
    batch = predict(surrogate, sdf_model, z, shapes[2], pts)
    perm = rng.permutation(len(pts))
    np.testing.assert_array_equal(predict(surrogate, sdf_model, z, shapes[2], pts[perm]), batch[perm])
    singles = np.concatenate([predict(surrogate, sdf_model, z, shapes[2], p[None, :]) for p in pts[:10]])
    np.testing.assert_allclose(singles, batch[:10], rtol=0, atol=1e-15)


def test_outside_points_are_reported(disks, sdf_model, surrogate):
    shapes, samples = disks
    pts = samples[0].points[:5].copy()
    pts[3] = [0.999, 0.999]
    with pytest.raises(PointOutsideShape) as err:
        predict(surrogate, sdf_model, sdf_model.codes[0], shapes[0], pts)
    assert err.value.indices == [3]


def test_normalizers_come_from_training_data(disks, surrogate):
    _, samples = disks
    u = np.concatenate([s.u for s in samples])
    assert surrogate.out_norm.lo[0] == u.min() and surrogate.out_norm.hi[0] == u.max()
    np.testing.assert_allclose(surrogate.out_norm.denormalize(surrogate.out_norm.normalize(u)), u, atol=1e-12)


def test_empty_training_rejected(disk):
    empty = PhysSamples(1, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        train_phys([PhysTrainingSet(empty, np.zeros(2))])


def test_non_finite_loss_names_the_shape(disks):
    _, samples = disks
    bad = PhysSamples(77, samples[1].points, samples[1].df, samples[1].u.copy())
    bad.u[5] = np.inf
    sets = [PhysTrainingSet(samples[0], np.zeros(2)), PhysTrainingSet(bad, np.zeros(2))]
    with pytest.raises(FloatingPointError, match="shape_id 77, point index 5"):
        train_phys(sets, (4,), ZERO)


ONLINE = OnlineConfig(n_boundary=300, n_grid_per_axis=8, restarts=2, infer_max_iter=60, n_eval_points=120, h=H)


def test_online_empty_batch(sdf_model, surrogate, tmp_path):
    report = run_online(sdf_model, surrogate, [], ONLINE)
    assert report.shapes == [] and np.isnan(report.aggregate_rel_l2)
    write_eval_report(tmp_path / "eval.csv", report)
    assert (tmp_path / "eval.csv").read_text().splitlines() == ["shape_id,n_points,rel_l2,code_objective",
                                                                  "all,0,nan,nan"]


def test_online_report_recomputes_from_point_dumps(sdf_model, surrogate, tmp_path):
    spec = ShapeFamilySpec(Family.DISK, seed=4, n_vertices=96)
    new = [geometry.sample_shape(spec, 900 + i) for i in range(2)]
    report = run_online(sdf_model, surrogate, new, ONLINE)
    assert not report.failures
    write_eval_report(tmp_path / "eval_report.csv", report)
    refs, preds = [], []
    for r in report.shapes:
        write_point_dump(tmp_path / f"pred_{r.shape_id}.csv", r)
        data = np.loadtxt(tmp_path / f"pred_{r.shape_id}.csv", delimiter=",", skiprows=1)
        assert len(data) == r.n_points == ONLINE.n_eval_points
        assert abs(relative_l2(data[:, 3], data[:, 2]) - r.rel_l2) < 1e-12
        refs.append(data[:, 2])
        preds.append(data[:, 3])
    with open(tmp_path / "eval_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["shape_id"] == "all"
    assert float(rows[-1]["rel_l2"]) == pytest.approx(relative_l2(np.concatenate(preds), np.concatenate(refs)),
                                                      abs=1e-12)


def test_online_failure_does_not_abort_batch(sdf_model, surrogate):
    spec = ShapeFamilySpec(Family.DISK, seed=4, n_vertices=96)
    good = geometry.sample_shape(spec, 950)
    # a sliver too thin for the FOM grid: no interior cells
    sliver = Shape(np.array([[-0.5, 0.0], [0.5, 0.0], [0.5, 0.004], [-0.5, 0.004]]), shape_id=951)
    report = run_online(sdf_model, surrogate, [sliver, good], ONLINE)
    assert [r.shape_id for r in report.failures] == [951]
    assert len(report.ok) == 1 and np.isfinite(report.aggregate_rel_l2)
