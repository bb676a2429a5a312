"""Offline/online workflow glue shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .autodecoder import SdfArch, SdfLossSpec, SdfSchedule, TrainedSdfModel, infer_code, train_sdf
from .config import RunConfig
from .fom import Problem, solve_fom
from .geometry import Family, Shape, ShapeFamilySpec
from .reconstruction import CdReport, GridSpec, evaluate_dataset
from .sdf_dataset import SdfDataset, build_phys_points, build_sdf_dataset
from .surrogate import (
    Encoder,
    FeatureSpec,
    OnlineConfig,
    PhysSchedule,
    PhysTrainingSet,
    Surrogate,
    shape_latent,
    train_phys,
)

log = logging.getLogger(__name__)

TEST_INDEX_OFFSET = 100_000


def family_spec(cfg: RunConfig) -> ShapeFamilySpec:
    ranges = {}
    for key, name in (
        ("radius_range", "radius"), ("center_range", "center"), ("cx_range", "cx"),
        ("cy_range", "cy"), ("r0_range", "r0"), ("coef_range", "coef"),
    ):
        val = getattr(cfg, key)
        if val:
            if len(val) != 2:
                raise ValueError(f"{key} needs two values")
            ranges[name] = val
    return ShapeFamilySpec(
        family=Family(cfg.family),
        ranges=ranges,
        hole_count_choices=cfg.hole_counts,
        hole_count_weights=cfg.hole_weights or None,
        min_gap=cfg.min_gap,
        n_vertices=cfg.n_vertices,
        seed=cfg.seed,
    )


def training_shapes(cfg: RunConfig) -> list[Shape]:
    spec = family_spec(cfg)
    return [geometry.sample_shape(spec, i) for i in range(max(cfg.n_train, cfg.n_phys))]


def test_shapes(cfg: RunConfig) -> list[Shape]:
    spec = family_spec(cfg)
    return [geometry.sample_shape(spec, TEST_INDEX_OFFSET + i) for i in range(cfg.n_test)]


def sdf_dataset_for(cfg: RunConfig, shape: Shape) -> SdfDataset:
    return build_sdf_dataset(
        shape, cfg.n_boundary, cfg.n_grid, (cfg.noise_sd_large, cfg.noise_sd_small), cfg.seed,
        include_outer=not cfg.exclude_outer,
    )


def sdf_arch(cfg: RunConfig) -> SdfArch:
    return SdfArch(cfg.sdf_hidden, cfg.activation, cfg.centralize, cfg.fourier_m, cfg.fourier_sigma)


OPTIMIZER_MODES = ("adam", "adam+lbfgs")


def sdf_schedule(cfg: RunConfig) -> SdfSchedule:
    if cfg.sdf_optimizer not in OPTIMIZER_MODES:
        raise ValueError(f"sdf_optimizer must be one of {OPTIMIZER_MODES}, got {cfg.sdf_optimizer!r}")
    return SdfSchedule(
        adam_epochs=cfg.sdf_adam_epochs, batch_shapes=cfg.batch_shapes,
        points_per_shape=cfg.points_per_shape, lr=cfg.sdf_lr, code_lr_per_shape=cfg.code_lr_per_shape,
        lbfgs_points_per_shape=cfg.lbfgs_points_per_shape, lbfgs_max_iter=cfg.sdf_lbfgs_max_iter if cfg.sdf_optimizer == "adam+lbfgs" else 0,
        lbfgs_tol=cfg.lbfgs_tol,
    )


def fit_sdf(cfg: RunConfig, datasets: Sequence[SdfDataset]) -> TrainedSdfModel:
    return train_sdf(
        datasets, cfg.k, sdf_arch(cfg), SdfLossSpec(cfg.loss, cfg.beta, cfg.sigma), sdf_schedule(cfg),
        seed=cfg.seed,
    )


def online_config(cfg: RunConfig) -> OnlineConfig:
    return OnlineConfig(
        n_boundary=cfg.n_boundary, n_grid_per_axis=cfg.n_grid,
        noise_sds=(cfg.noise_sd_large, cfg.noise_sd_small), include_outer=not cfg.exclude_outer,
        restarts=cfg.restarts, infer_max_iter=cfg.infer_max_iter, infer_points=cfg.infer_points,
        n_eval_points=cfg.n_eval_points, problem=Problem(cfg.problem), h=cfg.h, seed=cfg.seed,
    )


def infer(cfg: RunConfig, model: TrainedSdfModel, ds: SdfDataset):
    if cfg.infer_points and cfg.infer_points < len(ds):
        rng = np.random.default_rng([cfg.seed, ds.shape_id, 2])
        ds = ds.subset(np.sort(rng.choice(len(ds), cfg.infer_points, replace=False)))
    return infer_code(model, ds, restarts=cfg.restarts, seed=cfg.seed, max_iter=cfg.infer_max_iter)


def reference_boundary(cfg: RunConfig, shape: Shape) -> np.ndarray:
    return geometry.densify_boundary(shape, cfg.n_reference_points, include_outer=not cfg.exclude_outer)


@dataclass
class InferredCodes:
    shape_ids: list[int]
    codes: np.ndarray
    objectives: list[float]

    def code_for(self, shape_id: int) -> np.ndarray:
        return self.codes[self.shape_ids.index(shape_id)]


def infer_many(cfg: RunConfig, model: TrainedSdfModel, shapes: Sequence[Shape]) -> InferredCodes:
    ids, codes, objs = [], [], []
    for s in shapes:
        res = infer(cfg, model, sdf_dataset_for(cfg, s))
        ids.append(s.shape_id)
        codes.append(res.code)
        objs.append(res.objective)
    return InferredCodes(ids, np.array(codes).reshape(len(ids), model.k), objs)


def reconstruct(cfg: RunConfig, model: TrainedSdfModel, shapes: Sequence[Shape], codes: InferredCodes) -> CdReport:
    centroids = [geometry.shape_centroid(s, include_outer=not cfg.exclude_outer) for s in shapes]
    return evaluate_dataset(
        model, [codes.code_for(s.shape_id) for s in shapes], [reference_boundary(cfg, s) for s in shapes],
        [s.shape_id for s in shapes], GridSpec(n=cfg.grid_n), centroids,
    )


def phys_codes(cfg: RunConfig, model: TrainedSdfModel | None, shapes: Sequence[Shape],
               inferred: InferredCodes | None = None) -> dict[int, np.ndarray]:
    """Codes for the physics training shapes: trained codes where available, inferred otherwise."""
    out = {}
    for s in shapes:
        if model is not None and s.shape_id in model.shape_ids:
            out[s.shape_id] = model.code_for(s.shape_id)
        elif inferred is not None and s.shape_id in inferred.shape_ids:
            out[s.shape_id] = inferred.code_for(s.shape_id)
        elif model is not None:
            out[s.shape_id] = infer(cfg, model, sdf_dataset_for(cfg, s)).code
        else:
            out[s.shape_id] = np.zeros(0)
    return out


def feature_spec(cfg: RunConfig) -> FeatureSpec:
    return FeatureSpec(cfg.use_df, Encoder(cfg.encoder), cfg.use_centroid)


def phys_samples(cfg: RunConfig, shapes: Sequence[Shape]):
    out = []
    for s in shapes:
        field_ = solve_fom(s, Problem(cfg.problem), cfg.h)
        out.append(build_phys_points(s, field_, cfg.phys_points, cfg.gamma, cfg.seed))
    return out


def phys_training_sets(cfg: RunConfig, shapes: Sequence[Shape], samples, codes: dict[int, np.ndarray]):
    spec = feature_spec(cfg)
    sets = []
    for s, ps in zip(shapes, samples):
        latent = shape_latent(spec.encoder, codes.get(s.shape_id), s)
        centroid = geometry.shape_centroid(s, include_outer=not cfg.exclude_outer)
        sets.append(PhysTrainingSet(ps, latent, centroid))
    return sets


def phys_schedule(cfg: RunConfig) -> PhysSchedule:
    return PhysSchedule(
        adam_epochs=cfg.phys_adam_epochs, batch_points=cfg.batch_points, lr=cfg.phys_lr,
        lbfgs_max_iter=cfg.phys_lbfgs_max_iter, lbfgs_tol=cfg.lbfgs_tol,
    )


def fit_phys(cfg: RunConfig, sets, sdf_model_ref: str = "") -> Surrogate:
    return train_phys(sets, cfg.phys_hidden, phys_schedule(cfg), feature_spec(cfg), seed=cfg.seed,
                      sdf_model_ref=sdf_model_ref, gamma=cfg.gamma)
