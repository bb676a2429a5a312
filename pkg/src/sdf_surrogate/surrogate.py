"""Pointwise physics surrogate conditioned on shape codes (or explicit parameters).

Each query point is mapped independently:
``(x, latent, DF(x), centroid) -> u(x)``, with all inputs and outputs scaled
to [-1, 1] using bounds from the training data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import geometry, nn
from .autodecoder import TrainedSdfModel, infer_code
from .fom import FomField, Problem, solve_fom
from .geometry import Shape
from .nn import Mlp, Normalizer
from .optim import AdamState, adam_step, lbfgs_minimize
from .sdf_dataset import (
    DEFAULT_NOISE_SDS,
    PhysSamples,
    build_sdf_dataset,
    distance_feature,
    sample_interior,
)

log = logging.getLogger(__name__)

PHYS_PRESETS = {"small": (20, 15, 10, 5), "large": (30, 25, 20, 15)}


class Encoder(str, Enum):
    SHAPE_CODES = "SHAPE_CODES"
    EXPLICIT_PARAMS = "EXPLICIT_PARAMS"


class PointOutsideShape(ValueError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"{len(self.indices)} query points outside the shape, first index {self.indices[0]}")


@dataclass
class FeatureSpec:
    use_df: bool = True
    encoder: Encoder = Encoder.SHAPE_CODES
    use_centroid: bool = False

    def __post_init__(self):
        self.encoder = Encoder(self.encoder)

    def width(self, latent_len: int) -> int:
        return 2 + latent_len + int(self.use_df) + 2 * int(self.use_centroid)


def assemble_features(spec: FeatureSpec, points, latent, df=None, centroid=None) -> np.ndarray:
    """Raw (un-normalised) input rows: coordinates, latent, DF, centroid."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    cols = [pts, np.broadcast_to(np.asarray(latent, dtype=float), (n, len(latent)))]
    if spec.use_df:
        if df is None:
            raise ValueError("feature spec requires DF values")
        cols.append(np.asarray(df, dtype=float).reshape(n, 1))
    if spec.use_centroid:
        if centroid is None:
            raise ValueError("feature spec requires the shape centroid")
        cols.append(np.broadcast_to(np.asarray(centroid, dtype=float), (n, 2)))
    return np.concatenate(cols, axis=1)


@dataclass
class PhysTrainingSet:
    samples: PhysSamples
    latent: np.ndarray
    centroid: np.ndarray | None = None


@dataclass
class PhysSchedule:
    adam_epochs: int = 200
    batch_points: int = 1000
    lr: float = 1e-3
    lbfgs_max_iter: int = 2000
    lbfgs_tol: float = 1e-8
    lbfgs_memory: int = 10


@dataclass
class Surrogate:
    net: Mlp
    feature_spec: FeatureSpec
    in_norm: Normalizer
    out_norm: Normalizer
    sdf_model_ref: str = ""
    gamma: str = "ALL"
    history: dict = field(default_factory=dict)

    def predict_features(self, raw: np.ndarray) -> np.ndarray:
        out = nn.forward(self.net, self.in_norm.normalize(raw))
        return self.out_norm.denormalize(out)


class _SquaredError:
    def __init__(self, net: Mlp, X: np.ndarray, Y: np.ndarray):
        self.net, self.X, self.Y = net, X, Y

    def __call__(self, theta):
        net = self.net.with_flat(theta)
        trace = nn.forward_trace(net, self.X)
        r = trace[-1][1] - self.Y
        value = float(np.sum(r * r))
        g, _ = nn.backward(net, self.X, 2.0 * r, trace=trace)
        return value, g


def _stack_sets(spec: FeatureSpec, sets: Sequence[PhysTrainingSet]):
    X = np.concatenate(
        [assemble_features(spec, s.samples.points, s.latent, s.samples.df, s.centroid) for s in sets]
    )
    Y = np.concatenate([s.samples.u for s in sets])
    owners = np.concatenate([np.full(len(s.samples), s.samples.shape_id) for s in sets])
    return X, Y, owners


def train_phys(
    training_sets: Sequence[PhysTrainingSet],
    hidden: Sequence[int] = PHYS_PRESETS["small"],
    schedule: PhysSchedule | None = None,
    feature_spec: FeatureSpec | None = None,
    seed: int = 0,
    sdf_model_ref: str = "",
    gamma: str = "ALL",
) -> Surrogate:
    """Fit the surrogate by summed squared error in normalised output space."""
    schedule = schedule or PhysSchedule()
    spec = feature_spec or FeatureSpec()
    if not training_sets or any(len(s.samples) == 0 for s in training_sets):
        raise ValueError("every physics training set must be non-empty")
    rng = np.random.default_rng(seed)
    X_raw, Y_raw, owners = _stack_sets(spec, training_sets)
    finite = np.all(np.isfinite(X_raw), axis=1) & np.all(np.isfinite(Y_raw), axis=1)
    if not finite.all():
        j = int(np.flatnonzero(~finite)[0])
        local = j - int(np.flatnonzero(owners == owners[j])[0])
        raise FloatingPointError(f"non-finite physics loss at shape_id {owners[j]}, point index {local}")
    in_norm = Normalizer.fit(X_raw)
    out_norm = Normalizer.fit(Y_raw)
    X = in_norm.normalize(X_raw)
    Y = out_norm.normalize(Y_raw)
    net = Mlp.init((X.shape[1], *hidden, Y.shape[1]), "TANH", rng)
    theta = net.get_flat()
    state = AdamState.zeros(len(theta))
    history: dict = {"adam": []}
    n = len(X)
    for epoch in range(schedule.adam_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, schedule.batch_points):
            idx = order[start : start + schedule.batch_points]
            value, g = _SquaredError(net, X[idx], Y[idx])(theta)
            if not np.isfinite(value):
                _abort_nonfinite(net.with_flat(theta), X[idx], owners[idx], idx)
            theta = adam_step(state, theta, g, schedule.lr)
            total += value
        history["adam"].append(total)
    full = _SquaredError(net, X, Y)
    history["adam_end_loss"] = full(theta)[0]
    if schedule.lbfgs_max_iter > 0:
        res = lbfgs_minimize(full, theta, memory=schedule.lbfgs_memory, tol=schedule.lbfgs_tol,
                             max_iter=schedule.lbfgs_max_iter)
        theta = res.x
        history["lbfgs"] = res.history
        log.info("phys L-BFGS: %d iterations, %s, loss %.6g", res.n_iter, res.message, res.fun)
    history["final_loss"] = full(theta)[0]
    net = net.with_flat(theta)
    sur = Surrogate(net, spec, in_norm, out_norm, sdf_model_ref, gamma, history)
    pred = sur.predict_features(X_raw)
    history["train_mse"] = float(np.mean((pred - Y_raw) ** 2))
    history["train_rel_l2"] = relative_l2(pred, Y_raw)
    return sur


def _abort_nonfinite(net, X, owners, idx):
    out = nn.forward(net, X)
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    j = bad[0] if len(bad) else 0
    raise FloatingPointError(f"non-finite physics loss at shape_id {owners[j]}, point index {idx[j]}")


def relative_l2(predictions, references) -> float:
    """sqrt(sum |pred - ref|^2 / sum |ref|^2) accumulated over everything given."""
    p = np.asarray(predictions, dtype=float)
    r = np.asarray(references, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {r.shape}")
    den = float(np.sum(r * r))
    if den == 0:
        raise ZeroDivisionError("reference norm is zero")
    return float(np.sqrt(np.sum((p - r) ** 2) / den))


def shape_latent(encoder: Encoder, code, shape: Shape) -> np.ndarray:
    if Encoder(encoder) is Encoder.EXPLICIT_PARAMS:
        if shape.params is None:
            raise ValueError(f"shape {shape.shape_id} has no explicit parameters")
        return np.asarray(shape.params, dtype=float)
    return np.asarray(code, dtype=float)


def predict(sur: Surrogate, sdf_model: TrainedSdfModel | None, code, shape: Shape, points,
            centroid=None) -> np.ndarray:
    """Surrogate output at interior points of ``shape`` (one row per point)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = geometry.contains(shape, pts)
    if not np.all(inside):
        raise PointOutsideShape(np.flatnonzero(~inside))
    df = distance_feature(shape, pts, sur.gamma) if sur.feature_spec.use_df else None
    latent = shape_latent(sur.feature_spec.encoder, code, shape)
    raw = assemble_features(sur.feature_spec, pts, latent, df, centroid)
    return sur.predict_features(raw)


# ---------------------------------------------------------------------------
# online stage


@dataclass
class OnlineConfig:
    n_boundary: int = 8000
    n_grid_per_axis: int = 30
    noise_sds: tuple[float, float] = DEFAULT_NOISE_SDS
    include_outer: bool = True
    restarts: int = 5
    infer_max_iter: int = 500
    infer_points: int = 0  # 0 keeps every SDF sample
    n_eval_points: int = 1000
    problem: Problem = Problem.POISSON_UNIT_SOURCE
    h: float = 1.0 / 128
    seed: int = 0


@dataclass
class ShapeResult:
    shape_id: int
    n_points: int = 0
    rel_l2: float = float("nan")
    code_objective: float = float("nan")
    code: np.ndarray | None = None
    points: np.ndarray | None = None
    u_ref: np.ndarray | None = None
    u_pred: np.ndarray | None = None
    fom: FomField | None = None
    error: str | None = None


@dataclass
class OnlineReport:
    shapes: list[ShapeResult]

    @property
    def ok(self) -> list[ShapeResult]:
        return [r for r in self.shapes if r.error is None]

    @property
    def failures(self) -> list[ShapeResult]:
        return [r for r in self.shapes if r.error is not None]

    @property
    def aggregate_rel_l2(self) -> float:
        ok = self.ok
        if not ok:
            return float("nan")
        return relative_l2(np.concatenate([r.u_pred for r in ok]), np.concatenate([r.u_ref for r in ok]))


def infer_for_shape(sdf_model: TrainedSdfModel, shape: Shape, cfg: OnlineConfig):
    ds = build_sdf_dataset(shape, cfg.n_boundary, cfg.n_grid_per_axis, cfg.noise_sds, cfg.seed,
                           include_outer=cfg.include_outer)
    if cfg.infer_points and cfg.infer_points < len(ds):
        sel = np.random.default_rng([cfg.seed, shape.shape_id, 2]).choice(len(ds), cfg.infer_points,
                                                                          replace=False)
        ds_inf = ds.subset(np.sort(sel))
    else:
        ds_inf = ds
    res = infer_code(sdf_model, ds_inf, restarts=cfg.restarts, seed=cfg.seed, max_iter=cfg.infer_max_iter)
    return ds, res


def evaluate_shape(sdf_model, sur: Surrogate, shape: Shape, cfg: OnlineConfig, code=None,
                   code_objective=float("nan"), keep_field: bool = False,
                   fom_field: FomField | None = None) -> ShapeResult:
    """Infer (unless given) a code, predict at fresh interior points, score against the FOM.

    ``fom_field`` reuses an existing solve of the same shape and problem.
    """
    out = ShapeResult(shape.shape_id)
    try:
        centroid = geometry.shape_centroid(shape, include_outer=cfg.include_outer)
        if code is None and sur.feature_spec.encoder is Encoder.SHAPE_CODES:
            _, inf = infer_for_shape(sdf_model, shape, cfg)
            code, code_objective = inf.code, inf.objective
        field_ = fom_field if fom_field is not None else solve_fom(shape, cfg.problem, cfg.h)
        rng = np.random.default_rng([cfg.seed, shape.shape_id, 3])
        pts = sample_interior(shape, cfg.n_eval_points, rng, accept=field_.valid)
        u_ref = field_.interpolate(pts).reshape(len(pts), -1)
        u_pred = predict(sur, sdf_model, code, shape, pts, centroid)
        out.n_points = len(pts)
        out.rel_l2 = relative_l2(u_pred, u_ref)
        out.code_objective = float(code_objective)
        out.code = None if code is None else np.asarray(code)
        out.points, out.u_ref, out.u_pred = pts, u_ref, u_pred
        out.fom = field_ if keep_field else None
    except Exception as exc:  # reported per shape, batch continues
        log.warning("shape %d failed: %s", shape.shape_id, exc)
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def run_online(sdf_model, sur: Surrogate, new_shapes: Sequence[Shape], cfg: OnlineConfig | None = None,
               jobs: int = 1) -> OnlineReport:
    cfg = cfg or OnlineConfig()
    if jobs > 1 and len(new_shapes) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(evaluate_shape, sdf_model, sur, s, cfg) for s in new_shapes]
            results = [f.result() for f in futures]
    else:
        results = [evaluate_shape(sdf_model, sur, s, cfg) for s in new_shapes]
    return OnlineReport(results)


# ---------------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    return format(float(x), ".17g")


def save_surrogate(path, sur: Surrogate) -> None:
    fs = sur.feature_spec
    lines = [
        "phys_model v1",
        f"features use_df={int(fs.use_df)} encoder={fs.encoder.value} use_centroid={int(fs.use_centroid)}",
        f"gamma {sur.gamma}",
        f"sdf_model_ref {sur.sdf_model_ref or '-'}",
        "in_lo " + " ".join(_fmt(v) for v in sur.in_norm.lo),
        "in_hi " + " ".join(_fmt(v) for v in sur.in_norm.hi),
        "out_lo " + " ".join(_fmt(v) for v in sur.out_norm.lo),
        "out_hi " + " ".join(_fmt(v) for v in sur.out_norm.hi),
    ]
    lines += nn.mlp_to_lines(sur.net)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_surrogate(path) -> Surrogate:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0] != "phys_model v1":
        raise ValueError(f"{path}: not a physics model checkpoint")
    kv = dict(item.split("=") for item in lines[1].split()[1:])
    spec = FeatureSpec(bool(int(kv["use_df"])), Encoder(kv["encoder"]), bool(int(kv["use_centroid"])))
    gamma = lines[2].split()[1]
    ref = lines[3].split()[1]
    vec = lambda line: np.array([float(v) for v in line.split()[1:]])
    in_norm = Normalizer(vec(lines[4]), vec(lines[5]))
    out_norm = Normalizer(vec(lines[6]), vec(lines[7]))
    net, _, _ = nn.mlp_from_lines(lines, 8)
    return Surrogate(net, spec, in_norm, out_norm, "" if ref == "-" else ref, gamma)


def write_eval_report(path, report: OnlineReport) -> None:
    """Per-shape rows plus a final ``all`` row holding the aggregate relative L2."""
    with open(path, "w") as fh:
        fh.write("shape_id,n_points,rel_l2,code_objective\n")
        for r in report.shapes:
            fh.write(f"{r.shape_id},{r.n_points},{_fmt(r.rel_l2)},{_fmt(r.code_objective)}\n")
        n_total = sum(r.n_points for r in report.ok)
        fh.write(f"all,{n_total},{_fmt(report.aggregate_rel_l2)},nan\n")


def write_point_dump(path, result: ShapeResult) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,u_ref,u_pred\n")
        for (x, y), ur, up in zip(result.points, result.u_ref[:, 0], result.u_pred[:, 0]):
            fh.write(f"{_fmt(x)},{_fmt(y)},{_fmt(ur)},{_fmt(up)}\n")
