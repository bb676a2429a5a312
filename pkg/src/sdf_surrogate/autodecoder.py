"""Auto-decoder over signed distance samples.

The decoder maps ``(features(x), z)`` to a signed distance. Decoder weights
and one latent code per training shape are fitted jointly: minibatch Adam
first, then full-batch L-BFGS over weights and codes together. New shapes
get a code by minimising the same objective over ``z`` alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn
from .nn import FourierMap, Mlp
from .optim import AdamState, adam_step, lbfgs_minimize
from .sdf_dataset import SdfDataset

log = logging.getLogger(__name__)


class LossKind(str, Enum):
    L1 = "L1"
    SMOOTH_CLAMP_L1 = "SMOOTH_CLAMP_L1"
    HARD_CLAMP_L1 = "HARD_CLAMP_L1"


class TrainingError(FloatingPointError):
    pass


@dataclass
class SdfLossSpec:
    kind: LossKind = LossKind.L1
    beta: float = 0.1
    sigma: float = 1e2

    def __post_init__(self):
        self.kind = LossKind(self.kind)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind is not LossKind.L1 and self.beta <= 0:
            raise ValueError("beta must be positive for clamped losses")

    @property
    def code_weight(self) -> float:
        return 1.0 / self.sigma**2


def _clamp(v, spec: SdfLossSpec):
    if spec.kind is LossKind.SMOOTH_CLAMP_L1:
        return spec.beta * np.tanh(np.asarray(v) / spec.beta)
    if spec.kind is LossKind.HARD_CLAMP_L1:
        return np.clip(v, -spec.beta, spec.beta)
    return np.asarray(v, dtype=float)


def sdf_loss(s_ref, s_pred, spec: SdfLossSpec):
    """Pointwise L1 loss between (optionally clamped) signed distances."""
    return np.abs(_clamp(s_ref, spec) - _clamp(s_pred, spec))


def sdf_loss_grad(s_ref, s_pred, spec: SdfLossSpec):
    """Derivative of :func:`sdf_loss` with respect to the prediction (0 at the kink)."""
    s_pred = np.asarray(s_pred, dtype=float)
    sign = -np.sign(_clamp(s_ref, spec) - _clamp(s_pred, spec))
    if spec.kind is LossKind.SMOOTH_CLAMP_L1:
        t = np.tanh(s_pred / spec.beta)
        return sign * (1.0 - t * t)
    if spec.kind is LossKind.HARD_CLAMP_L1:
        return sign * (np.abs(s_pred) < spec.beta)
    return sign


@dataclass
class CodePrior:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_codes(cls, codes: np.ndarray) -> "CodePrior":
        codes = np.atleast_2d(codes)
        mean = codes.mean(axis=0)
        if len(codes) < 2:
            cov = np.zeros((codes.shape[1], codes.shape[1]))
        else:
            cov = np.atleast_2d(np.cov(codes, rowvar=False))
        return cls(mean, cov)

    def sample(self, rng: np.random.Generator, ridge: float = 1e-9) -> np.ndarray:
        k = len(self.mean)
        L = np.linalg.cholesky(self.cov + ridge * np.eye(k))
        return self.mean + L @ rng.standard_normal(k)


@dataclass
class SdfSchedule:
    adam_epochs: int = 1000
    batch_shapes: int = 32
    points_per_shape: int = 625
    lr: float = 1e-3
    code_lr_per_shape: float = 1e-5
    lbfgs_points_per_shape: int = 1000
    lbfgs_max_iter: int = 2000
    lbfgs_tol: float = 1e-8
    lbfgs_memory: int = 10


@dataclass
class SdfArch:
    hidden: tuple[int, ...] = (32, 32, 32, 32)
    activation: str = "GELU"
    centralize: bool = False
    fourier_m: int = 0
    fourier_sigma: float = 1.0


@dataclass
class TrainedSdfModel:
    decoder: Mlp
    fmap: FourierMap | None
    codes: np.ndarray
    shape_ids: list[int]
    loss_spec: SdfLossSpec
    centralize: bool
    code_stats: CodePrior
    history: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.codes.shape[1]

    def code_for(self, shape_id: int) -> np.ndarray:
        return self.codes[self.shape_ids.index(shape_id)]

    def features(self, points: np.ndarray, centroid=None) -> np.ndarray:
        return coordinate_features(points, self.fmap, self.centralize, centroid)


def coordinate_features(points, fmap: FourierMap | None, centralize: bool, centroid=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if centralize:
        if centroid is None:
            raise ValueError("centroid required for a centralized model")
        x = x - np.asarray(centroid, dtype=float)
    return x if fmap is None else nn.fourier_features(fmap, x)


def _check_finite(losses: np.ndarray, owners: np.ndarray, shape_ids: Sequence[int]):
    if not np.all(np.isfinite(losses)):
        bad = owners[np.flatnonzero(~np.isfinite(losses))[0]]
        raise TrainingError(f"non-finite SDF loss for shape_id {shape_ids[bad]}")


class _JointObjective:
    """Sum of pointwise losses plus code penalty over a fixed point selection."""

    def __init__(self, decoder: Mlp, feats: np.ndarray, sdf: np.ndarray, owners: np.ndarray,
                 n_codes: int, k: int, spec: SdfLossSpec, shape_ids):
        self.decoder = decoder
        self.feats, self.sdf, self.owners = feats, sdf, owners
        self.n_codes, self.k, self.spec = n_codes, k, spec
        self.shape_ids = shape_ids
        self.n_theta = decoder.n_params
        self.active = np.unique(owners)

    def split(self, vec):
        return vec[: self.n_theta], vec[self.n_theta :].reshape(self.n_codes, self.k)

    def __call__(self, vec: np.ndarray) -> tuple[float, np.ndarray]:
        theta, codes = self.split(vec)
        net = self.decoder.with_flat(theta)
        X = np.concatenate([self.feats, codes[self.owners]], axis=1)
        trace = nn.forward_trace(net, X)
        pred = trace[-1][1][:, 0]
        losses = sdf_loss(self.sdf, pred, self.spec)
        _check_finite(losses, self.owners, self.shape_ids)
        cot = sdf_loss_grad(self.sdf, pred, self.spec)[:, None]
        g_theta, g_x = nn.backward(net, X, cot, trace=trace)
        g_codes = np.zeros_like(codes)
        for j in range(self.k):
            g_codes[:, j] = np.bincount(self.owners, weights=g_x[:, -self.k + j], minlength=self.n_codes)
        w = self.spec.code_weight
        active = codes[self.active]
        g_codes[self.active] += 2.0 * w * active
        value = float(losses.sum() + w * np.sum(active * active))
        return value, np.concatenate([g_theta, g_codes.ravel()])


def _stack(datasets, feats, selections):
    f, s, o = [], [], []
    for i, sel in enumerate(selections):
        f.append(feats[i][sel])
        s.append(datasets[i].sdf[sel])
        o.append(np.full(len(sel), i))
    return np.concatenate(f), np.concatenate(s), np.concatenate(o)


def train_sdf(
    datasets: Sequence[SdfDataset],
    k: int,
    arch: SdfArch | None = None,
    loss_spec: SdfLossSpec | None = None,
    schedule: SdfSchedule | None = None,
    seed: int = 0,
) -> TrainedSdfModel:
    arch = arch or SdfArch()
    loss_spec = loss_spec or SdfLossSpec()
    schedule = schedule or SdfSchedule()
    if k < 1:
        raise ValueError("latent dimension must be >= 1")
    if not datasets or any(len(ds) == 0 for ds in datasets):
        raise ValueError("every training dataset must be non-empty")
    rng = np.random.default_rng(seed)
    n = len(datasets)
    shape_ids = [ds.shape_id for ds in datasets]
    fmap = FourierMap.sample(arch.fourier_m, 2, arch.fourier_sigma, rng) if arch.fourier_m > 0 else None
    feats = [coordinate_features(ds.points, fmap, arch.centralize, ds.centroid) for ds in datasets]
    feat_dim = feats[0].shape[1]
    decoder = Mlp.init((feat_dim + k, *arch.hidden, 1), arch.activation, rng)
    codes = rng.normal(0.0, 1.0 / np.sqrt(k), size=(n, k))
    n_theta = decoder.n_params
    vec = np.concatenate([decoder.get_flat(), codes.ravel()])
    history: dict = {"adam": [], "lbfgs": []}

    batch = max(1, min(schedule.batch_shapes, n))
    lr = np.concatenate([np.full(n_theta, schedule.lr), np.full(n * k, schedule.code_lr_per_shape * batch)])
    state = AdamState.zeros(len(vec))
    for epoch in range(schedule.adam_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            members = order[start : start + batch]
            sels = [
                rng.choice(len(datasets[i]), size=min(schedule.points_per_shape, len(datasets[i])), replace=False)
                for i in members
            ]
            f, s, o = _stack([datasets[i] for i in members], [feats[i] for i in members], sels)
            obj = _JointObjective(decoder, f, s, members[o], n, k, loss_spec, shape_ids)
            value, grad = obj(vec)
            vec = adam_step(state, vec, grad, lr)
            epoch_loss += value
        history["adam"].append(epoch_loss)
        if epoch % 100 == 0:
            log.debug("adam epoch %d loss %.6g", epoch, epoch_loss)

    lb_rng = np.random.default_rng([seed, 1])
    sels = [
        np.sort(lb_rng.choice(len(ds), size=min(schedule.lbfgs_points_per_shape, len(ds)), replace=False))
        for ds in datasets
    ]
    f, s, o = _stack(datasets, feats, sels)
    full = _JointObjective(decoder, f, s, o, n, k, loss_spec, shape_ids)
    history["adam_end_loss"] = full(vec)[0]
    history["adam_end_vector"] = vec.copy()
    if schedule.lbfgs_max_iter > 0:
        res = lbfgs_minimize(full, vec, memory=schedule.lbfgs_memory, tol=schedule.lbfgs_tol,
                             max_iter=schedule.lbfgs_max_iter)
        vec = res.x
        history["lbfgs"] = res.history
        history["lbfgs_message"] = res.message
        log.info("L-BFGS: %d iterations, %s, loss %.6g", res.n_iter, res.message, res.fun)
    history["final_loss"] = full(vec)[0]
    theta, codes = full.split(vec)
    decoder = decoder.with_flat(theta)
    codes = codes.copy()
    return TrainedSdfModel(decoder, fmap, codes, shape_ids, loss_spec, arch.centralize,
                           CodePrior.from_codes(codes), history)


def adam_phase_model(model: TrainedSdfModel) -> TrainedSdfModel:
    """The model as it stood when the Adam phase ended.

    Identical to training the same data and seed with zero L-BFGS iterations.
    """
    vec = model.history["adam_end_vector"]
    n_theta = model.decoder.n_params
    codes = vec[n_theta:].reshape(model.codes.shape).copy()
    history = {"adam": model.history.get("adam", []), "adam_end_loss": model.history["adam_end_loss"],
               "final_loss": model.history["adam_end_loss"]}
    return TrainedSdfModel(model.decoder.with_flat(vec[:n_theta]), model.fmap, codes, list(model.shape_ids),
                           model.loss_spec, model.centralize, CodePrior.from_codes(codes), history)


def training_objective(model: TrainedSdfModel, datasets: Sequence[SdfDataset], codes=None) -> float:
    """Full joint objective of a model on the given datasets (all points)."""
    codes = model.codes if codes is None else codes
    total = 0.0
    for ds, z in zip(datasets, codes):
        total += code_objective(model, ds, z)[0]
    return total


# ---------------------------------------------------------------------------
# inference


class _CodeObjective:
    """Objective over one code with frozen decoder; the coordinate part of the
    first layer is precomputed once."""

    def __init__(self, model: TrainedSdfModel, feats: np.ndarray, sdf: np.ndarray):
        dec = model.decoder
        F = feats.shape[1]
        W1 = dec.weights[0]
        self.a0 = feats @ W1[:F] + dec.biases[0]
        self.Wz = W1[F:]
        self.tail = Mlp(dec.layer_dims[1:], dec.activation, dec.weights[1:], dec.biases[1:])
        self.single = len(dec.weights) == 1
        self.activation = dec.activation
        self.sdf = sdf
        self.spec = model.loss_spec

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        a = self.a0 + z @ self.Wz
        if self.single:
            pred = a[:, 0]
            ga = sdf_loss_grad(self.sdf, pred, self.spec)[:, None]
        else:
            h = nn.activate(self.activation, a)
            trace = nn.forward_trace(self.tail, h)
            pred = trace[-1][1][:, 0]
            cot = sdf_loss_grad(self.sdf, pred, self.spec)[:, None]
            _, gh = nn.backward(self.tail, h, cot, trace=trace, param_grad=False)
            ga = gh * nn.activate_grad(self.activation, a, h)
        losses = sdf_loss(self.sdf, pred, self.spec)
        w = self.spec.code_weight
        value = float(losses.sum() + w * (z @ z))
        grad = self.Wz @ ga.sum(axis=0) + 2.0 * w * z
        return value, grad


def code_objective(model: TrainedSdfModel, dataset: SdfDataset, z) -> tuple[float, np.ndarray]:
    """Inference objective and its gradient with respect to the code."""
    feats = model.features(dataset.points, dataset.centroid)
    return _CodeObjective(model, feats, dataset.sdf)(np.asarray(z, dtype=float))


@dataclass
class InferenceResult:
    code: np.ndarray
    objective: float
    restart_objectives: list[float]


def infer_code(
    model: TrainedSdfModel,
    dataset: SdfDataset,
    restarts: int = 5,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> InferenceResult:
    """Best-of-``restarts`` code for an unseen shape, decoder frozen."""
    if len(dataset) == 0:
        raise ValueError("cannot infer a code from an empty dataset")
    rng = np.random.default_rng([seed, dataset.shape_id])
    feats = model.features(dataset.points, dataset.centroid)
    obj = _CodeObjective(model, feats, dataset.sdf)
    best_z, best_f = None, np.inf
    objectives = []
    for r in range(restarts):
        z0 = model.code_stats.sample(rng)
        try:
            res = lbfgs_minimize(obj, z0, tol=tol, max_iter=max_iter)
        except FloatingPointError as exc:
            log.warning("shape %d restart %d aborted: %s", dataset.shape_id, r, exc)
            objectives.append(np.inf)
            continue
        objectives.append(res.fun)
        if res.fun < best_f:
            best_z, best_f = res.x, res.fun
    if best_z is None:
        raise TrainingError(f"all {restarts} inference restarts failed for shape {dataset.shape_id}")
    return InferenceResult(best_z, best_f, objectives)


def predict_sdf(model: TrainedSdfModel, z, points, centroid=None) -> np.ndarray:
    feats = model.features(points, centroid)
    z = np.asarray(z, dtype=float)
    X = np.concatenate([feats, np.broadcast_to(z, (len(feats), len(z)))], axis=1)
    return nn.forward(model.decoder, X)[:, 0]


# ---------------------------------------------------------------------------
# checkpoint


def _fmt(x) -> str:
    return format(float(x), ".17g")


def save_sdf_model(path, model: TrainedSdfModel) -> None:
    lines = [
        "sdf_model v1",
        f"loss {model.loss_spec.kind.value} {_fmt(model.loss_spec.beta)} {_fmt(model.loss_spec.sigma)}",
        f"centralize {int(model.centralize)}",
    ]
    lines += nn.mlp_to_lines(model.decoder, model.fmap)
    n, k = model.codes.shape
    lines.append(f"codes {n} {k}")
    for sid, z in zip(model.shape_ids, model.codes):
        lines.append(" ".join([str(sid)] + [_fmt(v) for v in z]))
    lines.append("code_stats")
    lines.append(" ".join(_fmt(v) for v in model.code_stats.mean))
    lines.append(" ".join(_fmt(v) for v in model.code_stats.cov.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_sdf_model(path) -> TrainedSdfModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0] != "sdf_model v1":
        raise ValueError(f"{path}: not an sdf model checkpoint")
    _, kind, beta, sigma = lines[1].split()
    spec = SdfLossSpec(kind, float(beta), float(sigma))
    centralize = bool(int(lines[2].split()[1]))
    decoder, fmap, pos = nn.mlp_from_lines(lines, 3)
    _, n, k = lines[pos].split()
    n, k = int(n), int(k)
    rows = [lines[pos + 1 + i].split() for i in range(n)]
    shape_ids = [int(r[0]) for r in rows]
    codes = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(n, k)
    pos += 1 + n
    mean = np.array([float(v) for v in lines[pos + 1].split()])
    cov = np.array([float(v) for v in lines[pos + 2].split()]).reshape(k, k)
    return TrainedSdfModel(decoder, fmap, codes, shape_ids, spec, centralize, CodePrior(mean, cov))
