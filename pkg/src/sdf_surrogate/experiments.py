"""Reusable study harness for the trend experiments.

A study fixes one shape dataset (training and held-out shapes with their
SDF samples, or with FOM solutions for the physics side). Models trained
with different seeds or switches are then scored against the same data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, pipeline
from .autodecoder import TrainedSdfModel
from .config import RunConfig, replace
from .fom import FomField, Problem, solve_fom
from .geometry import Shape
from .reconstruction import CdReport, GridSpec, count_negative_components, predicted_grid
from .sdf_dataset import PhysSamples, SdfDataset, build_phys_points
from .surrogate import OnlineReport, Surrogate, evaluate_shape

log = logging.getLogger(__name__)


@dataclass
class ShapeStudy:
    cfg: RunConfig
    train_shapes: list[Shape]
    test_shapes: list[Shape]
    train_sets: list[SdfDataset]
    test_sets: list[SdfDataset]

    @classmethod
    def build(cls, cfg: RunConfig) -> "ShapeStudy":
        t0 = time.perf_counter()
        train = pipeline.training_shapes(cfg)[: cfg.n_train]
        tests = pipeline.test_shapes(cfg)
        study = cls(cfg, train, tests, [pipeline.sdf_dataset_for(cfg, s) for s in train],
                    [pipeline.sdf_dataset_for(cfg, s) for s in tests])
        log.info("shape study: %d train, %d test shapes in %.0fs", len(train), len(tests), time.perf_counter() - t0)
        return study


@dataclass
class CdResult:
    model: TrainedSdfModel
    codes: pipeline.InferredCodes
    report: CdReport
    seconds: float = 0.0

    @property
    def mean_cd(self) -> float:
        return self.report.mean_cd


def infer_test_codes(study: ShapeStudy, cfg: RunConfig, model: TrainedSdfModel) -> pipeline.InferredCodes:
    ids, codes, objs = [], [], []
    for s, ds in zip(study.test_shapes, study.test_sets):
        res = pipeline.infer(cfg, model, ds)
        ids.append(s.shape_id)
        codes.append(res.code)
        objs.append(res.objective)
    return pipeline.InferredCodes(ids, np.array(codes).reshape(len(ids), model.k), objs)


def score_model(study: ShapeStudy, cfg: RunConfig, model: TrainedSdfModel, seconds: float = 0.0) -> CdResult:
    """Infer held-out codes (decoder frozen) and score the reconstructions."""
    codes = infer_test_codes(study, cfg, model)
    report = pipeline.reconstruct(cfg, model, study.test_shapes, codes)
    return CdResult(model, codes, report, seconds)


def fit_and_score(study: ShapeStudy, train_seed: int = 0, **overrides) -> CdResult:
    """Train on the study's data with config overrides; the data itself stays fixed."""
    cfg = replace(study.cfg, seed=train_seed, **overrides)
    t0 = time.perf_counter()
    model = pipeline.fit_sdf(cfg, study.train_sets)
    seconds = time.perf_counter() - t0
    result = score_model(study, cfg, model, seconds)
    log.info("fit %s seed %d: %.0fs, mean CD %.3e", overrides, train_seed, seconds, result.mean_cd)
    return result


def hole_counts(study: ShapeStudy, result: CdResult) -> list[tuple[int, int]]:
    """(true, reconstructed) hole counts: connected negative regions of the decoded grid."""
    cfg = study.cfg
    out = []
    for s in study.test_shapes:
        centroid = geometry.shape_centroid(s, include_outer=not cfg.exclude_outer)
        grid = predicted_grid(result.model, result.codes.code_for(s.shape_id), GridSpec(n=cfg.grid_n), centroid)
        out.append((s.n_holes, count_negative_components(grid)))
    return out


@dataclass
class PhysStudy:
    cfg: RunConfig
    train_shapes: list[Shape]
    test_shapes: list[Shape]
    samples: list[PhysSamples]
    test_fields: list[FomField] = field(repr=False, default_factory=list)

    @classmethod
    def build(cls, cfg: RunConfig, train_shapes, test_shapes) -> "PhysStudy":
        t0 = time.perf_counter()
        problem = Problem(cfg.problem)
        samples = []
        for s in train_shapes:
            samples.append(build_phys_points(s, solve_fom(s, problem, cfg.h), cfg.phys_points, cfg.gamma, cfg.seed))
        fields = [solve_fom(s, problem, cfg.h) for s in test_shapes]
        log.info("phys study: %d FOM solves in %.0fs", len(train_shapes) + len(test_shapes),
                 time.perf_counter() - t0)
        return cls(cfg, list(train_shapes), list(test_shapes), samples, fields)


@dataclass
class PhysResult:
    surrogate: Surrogate
    report: OnlineReport
    seconds: float = 0.0

    @property
    def rel_l2(self) -> float:
        return self.report.aggregate_rel_l2


def fit_and_evaluate_phys(study: PhysStudy, sdf_model: TrainedSdfModel | None, train_codes: dict,
                          test_codes: pipeline.InferredCodes | None, train_seed: int = 0, **overrides) -> PhysResult:
    """Train the surrogate on the study's samples and score it on the held-out shapes.

    Held-out codes must come from inference with the decoder frozen; they are
    passed in so several surrogates can share one inference pass.
    """
    cfg = replace(study.cfg, seed=train_seed, **overrides)
    sets = pipeline.phys_training_sets(cfg, study.train_shapes, study.samples, train_codes)
    t0 = time.perf_counter()
    sur = pipeline.fit_phys(cfg, sets)
    seconds = time.perf_counter() - t0
    # evaluation points depend on the data seed, not the training seed
    online = pipeline.online_config(replace(cfg, seed=study.cfg.seed))
    results = []
    for s, fld in zip(study.test_shapes, study.test_fields):
        code = test_codes.code_for(s.shape_id) if test_codes is not None else None
        results.append(evaluate_shape(sdf_model, sur, s, online, code=code, fom_field=fld))
    report = OnlineReport(results)
    log.info("phys %s seed %d: %.0fs, test rel L2 %.4f", overrides, train_seed, seconds, report.aggregate_rel_l2)
    return PhysResult(sur, report, seconds)
