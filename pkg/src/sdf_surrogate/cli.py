"""Command-line driver: offline dataset generation and training, online inference and evaluation.

Every subcommand reads one INI config, writes into ``--out`` and records
its outputs in ``manifest.json`` so later stages can refuse stale inputs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import geometry, pipeline
from .autodecoder import TrainingError, load_sdf_model, save_sdf_model
from .config import SECTIONS, ConfigError, RunConfig, _render, dump_config, load_config, replace
from .fom import Problem, solve_fom, write_fom_csv
from .manifest import ArtifactError, Manifest, text_digest
from .reconstruction import GridSpec, marching_squares, predicted_grid, write_cd_report, write_points_csv
from .sdf_dataset import build_phys_points, read_phys_csv, read_sdf_csv, write_phys_csv, write_sdf_csv
from .surrogate import (
    Encoder,
    OnlineReport,
    ShapeResult,
    evaluate_shape,
    load_surrogate,
    predict,
    run_online,
    save_surrogate,
    write_eval_report,
    write_point_dump,
)

log = logging.getLogger("sdf_surrogate")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

# config keys each stage depends on; an artifact is stale once any of them change
_GEN_KEYS = ("seed",) + SECTIONS["geometry"] + SECTIONS["sdf_data"] + SECTIONS["fom"] + ("gamma", "phys_points")
_STAGE_KEYS = {"gen": _GEN_KEYS}
_STAGE_KEYS["train-sdf"] = _STAGE_KEYS["gen"] + SECTIONS["sdf_model"]
_STAGE_KEYS["infer-codes"] = _STAGE_KEYS["train-sdf"] + SECTIONS["inference"]
_STAGE_KEYS["reconstruct"] = _STAGE_KEYS["infer-codes"] + ("grid_n", "n_reference_points")
_STAGE_KEYS["train-phys"] = _STAGE_KEYS["infer-codes"] + SECTIONS["phys"]
_STAGE_KEYS["eval"] = _STAGE_KEYS["train-phys"] + ("n_eval_points",)
_STAGE_KEYS["sweep"] = tuple(k for keys in SECTIONS.values() for k in keys if k != "jobs")


class PartialFailure(RuntimeError):
    """Some shapes failed; the message lists them."""


def stage_digest(cfg: RunConfig, stage: str) -> str:
    return text_digest("\n".join(f"{k}={_render(getattr(cfg, k))}" for k in _STAGE_KEYS[stage]))


class Workspace:
    """Output directory plus manifest, bound to one resolved config."""

    def __init__(self, out: str | Path, cfg: RunConfig, stage: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.stage = stage
        self.manifest = Manifest(self.out)
        self.inputs: list[str] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        entry = self.manifest.entries.get(name)
        digest = stage_digest(self.cfg, entry["stage"]) if entry else None
        self.manifest.check(name, digest)
        self.inputs.append(name)
        return self.out / name

    def produced(self, names) -> None:
        digest = stage_digest(self.cfg, self.stage)
        for name in names:
            self.manifest.record(name, self.stage, digest, self.inputs)
        self.manifest.save()

    def write_resolved_config(self) -> None:
        self.path(f"resolved_{self.stage}.ini").write_text(dump_config(self.cfg))


def _pool_map(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _summary(**metrics) -> None:
    print(" ".join(f"{k}={_render(v) if not isinstance(v, float) else format(v, '.17g')}"
                   for k, v in metrics.items()), flush=True)


# ---------------------------------------------------------------------------
# gen


def _gen_shape_fom(cfg: RunConfig, shape):
    try:
        field_ = solve_fom(shape, Problem(cfg.problem), cfg.h)
        samples = build_phys_points(shape, field_, cfg.phys_points, cfg.gamma, cfg.seed)
    except Exception as exc:
        raise RuntimeError(f"shape {shape.shape_id}: {type(exc).__name__}: {exc}") from exc
    return field_, samples


def _gen_sdf(cfg: RunConfig, shape):
    try:
        return pipeline.sdf_dataset_for(cfg, shape)
    except Exception as exc:
        raise RuntimeError(f"shape {shape.shape_id}: {type(exc).__name__}: {exc}") from exc


def cmd_gen(ws: Workspace) -> None:
    cfg = ws.cfg
    shapes = pipeline.training_shapes(cfg)
    tests = pipeline.test_shapes(cfg)
    geometry.write_shapes(ws.path("shapes.txt"), shapes)
    geometry.write_shapes(ws.path("test_shapes.txt"), tests)
    datasets = _pool_map(partial(_gen_sdf, cfg), shapes[: cfg.n_train], cfg.jobs)
    write_sdf_csv(ws.path("sdf_train.csv"), datasets)
    solved = _pool_map(partial(_gen_shape_fom, cfg), shapes[: cfg.n_phys], cfg.jobs)
    fom_names = []
    for shape, (field_, _) in zip(shapes, solved):
        name = f"fom_{shape.shape_id}.csv"
        write_fom_csv(ws.path(name), field_)
        fom_names.append(name)
    write_phys_csv(ws.path("phys_train.csv"), [s for _, s in solved])
    ws.produced(["shapes.txt", "test_shapes.txt", "sdf_train.csv", "phys_train.csv", *fom_names])
    _summary(n_shapes=len(shapes), n_test=len(tests), n_sdf_rows=sum(len(d) for d in datasets),
             n_phys_rows=sum(len(s) for _, s in solved))


# ---------------------------------------------------------------------------
# SDF model


def _centroids(cfg: RunConfig, shapes) -> dict[int, np.ndarray]:
    return {s.shape_id: geometry.shape_centroid(s, include_outer=not cfg.exclude_outer) for s in shapes}


def cmd_train_sdf(ws: Workspace) -> None:
    cfg = ws.cfg
    shapes = geometry.read_shapes(ws.require("shapes.txt"))
    datasets = read_sdf_csv(ws.require("sdf_train.csv"), _centroids(cfg, shapes))
    model = pipeline.fit_sdf(cfg, datasets)
    save_sdf_model(ws.path("sdf_model.ckpt"), model)
    ws.produced(["sdf_model.ckpt"])
    _summary(final_loss=float(model.history["final_loss"]), n_shapes=len(datasets), k=model.k)


def _infer_one(cfg: RunConfig, model, shape):
    try:
        res = pipeline.infer(cfg, model, pipeline.sdf_dataset_for(cfg, shape))
        return shape.shape_id, res.code, res.objective, None
    except (TrainingError, ValueError, FloatingPointError) as exc:
        return shape.shape_id, None, float("nan"), f"{type(exc).__name__}: {exc}"


def write_codes(path, rows, k: int) -> None:
    with open(path, "w") as fh:
        fh.write("shape_id,objective," + ",".join(f"z{i + 1}" for i in range(k)) + "\n")
        for sid, code, obj, _ in rows:
            vals = code if code is not None else np.full(k, np.nan)
            fh.write(f"{sid},{format(obj, '.17g')}," + ",".join(format(v, ".17g") for v in vals) + "\n")


def read_codes(path) -> dict[int, tuple[np.ndarray, float]]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {int(row[0]): (row[2:], float(row[1])) for row in data}


def _report_failures(failed: list[tuple[int, str]]) -> None:
    if failed:
        for sid, msg in failed:
            print(f"shape {sid} failed: {msg}", file=sys.stderr)
        raise PartialFailure(f"{len(failed)} shape(s) failed")


def cmd_infer_codes(ws: Workspace) -> None:
    cfg = ws.cfg
    model = load_sdf_model(ws.require("sdf_model.ckpt"))
    tests = geometry.read_shapes(ws.require("test_shapes.txt"))
    rows = _pool_map(partial(_infer_one, cfg, model), tests, cfg.jobs)
    write_codes(ws.path("codes.csv"), rows, model.k)
    ws.produced(["codes.csv"])
    objs = [r[2] for r in rows if r[3] is None]
    _summary(n_shapes=len(rows), n_failed=len(rows) - len(objs),
             mean_objective=float(np.mean(objs)) if objs else float("nan"))
    _report_failures([(r[0], r[3]) for r in rows if r[3] is not None])


def cmd_reconstruct(ws: Workspace) -> None:
    cfg = ws.cfg
    model = load_sdf_model(ws.require("sdf_model.ckpt"))
    tests = geometry.read_shapes(ws.require("test_shapes.txt"))
    codes = read_codes(ws.require("codes.csv"))
    usable = [s for s in tests if np.all(np.isfinite(codes[s.shape_id][0]))]
    inferred = pipeline.InferredCodes([s.shape_id for s in usable],
                                      np.array([codes[s.shape_id][0] for s in usable]).reshape(len(usable), -1),
                                      [codes[s.shape_id][1] for s in usable])
    report = pipeline.reconstruct(cfg, model, usable, inferred)
    names = ["cd_report.csv"]
    write_cd_report(ws.path("cd_report.csv"), report)
    for s, failed in zip(usable, report.failed):
        if failed:
            continue
        grid = predicted_grid(model, inferred.code_for(s.shape_id), GridSpec(n=cfg.grid_n),
                              geometry.shape_centroid(s, include_outer=not cfg.exclude_outer))
        name = f"recon_{s.shape_id}.csv"
        write_points_csv(ws.path(name), marching_squares(grid))
        names.append(name)
    ws.produced(names)
    _summary(mean_cd=report.mean_cd, n_shapes=len(tests), n_failed=report.n_failed + len(tests) - len(usable))
    failed = [(sid, "empty reconstruction") for sid, f in zip(report.shape_ids, report.failed) if f]
    usable_ids = {s.shape_id for s in usable}
    failed += [(s.shape_id, "no inferred code") for s in tests if s.shape_id not in usable_ids]
    _report_failures(failed)


# ---------------------------------------------------------------------------
# physics surrogate


def cmd_train_phys(ws: Workspace) -> None:
    cfg = ws.cfg
    shapes = geometry.read_shapes(ws.require("shapes.txt"))
    samples = {ps.shape_id: ps for ps in read_phys_csv(ws.require("phys_train.csv"))}
    phys_shapes = [s for s in shapes if s.shape_id in samples]
    model, ref = None, ""
    if Encoder(cfg.encoder) is Encoder.SHAPE_CODES:
        model_path = ws.require("sdf_model.ckpt")
        model = load_sdf_model(model_path)
        ref = ws.manifest.entries["sdf_model.ckpt"]["sha256"]
    codes = pipeline.phys_codes(cfg, model, phys_shapes)
    sets = pipeline.phys_training_sets(cfg, phys_shapes, [samples[s.shape_id] for s in phys_shapes], codes)
    sur = pipeline.fit_phys(cfg, sets, sdf_model_ref=ref)
    save_surrogate(ws.path("phys_model.ckpt"), sur)
    ws.produced(["phys_model.ckpt"])
    _summary(final_loss=float(sur.history["final_loss"]), train_rel_l2=float(sur.history["train_rel_l2"]))


def _eval_one(cfg: RunConfig, model, sur, codes, shape):
    code, obj = codes.get(shape.shape_id, (None, float("nan")))
    if code is not None and not np.all(np.isfinite(code)):
        return ShapeResult(shape.shape_id, error="no inferred code")
    return evaluate_shape(model, sur, shape, pipeline.online_config(cfg), code=code, code_objective=obj,
                          keep_field=True)


def error_raster(sur, model, code, shape, result, centroid) -> np.ndarray:
    """|u_pred - u_ref| on the FOM nodes, zero outside the shape; row 0 is y = +1."""
    field_ = result.fom
    pts, u_ref = field_.node_points()
    u_pred = predict(sur, model, code, shape, pts, centroid)[:, 0]
    ii, jj = np.nonzero(field_.grid.mask)
    img = np.zeros((field_.grid.n, field_.grid.n))
    img[ii, jj] = np.abs(u_pred - u_ref)
    return img.T[::-1]


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM scaled so the largest value maps to 255."""
    top = float(img.max())
    scaled = np.zeros_like(img) if top <= 0 else img / top * 255.0
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# max_abs_err={format(top, '.17g')}\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def cmd_eval(ws: Workspace) -> None:
    cfg = ws.cfg
    sur = load_surrogate(ws.require("phys_model.ckpt"))
    tests = geometry.read_shapes(ws.require("test_shapes.txt"))
    model, codes = None, {}
    if sur.feature_spec.encoder is Encoder.SHAPE_CODES:
        model = load_sdf_model(ws.require("sdf_model.ckpt"))
        codes = read_codes(ws.require("codes.csv"))
    results = _pool_map(partial(_eval_one, cfg, model, sur, codes), tests, cfg.jobs)
    report = OnlineReport(results)
    write_eval_report(ws.path("eval_report.csv"), report)
    names = ["eval_report.csv"]
    for shape, res in zip(tests, results):
        if res.error is not None:
            continue
        pred_name, pgm_name = f"pred_{shape.shape_id}.csv", f"field_{shape.shape_id}.pgm"
        write_point_dump(ws.path(pred_name), res)
        centroid = geometry.shape_centroid(shape, include_outer=not cfg.exclude_outer)
        write_pgm(ws.path(pgm_name), error_raster(sur, model, res.code, shape, res, centroid))
        names += [pred_name, pgm_name]
    ws.produced(names)
    _summary(rel_l2=report.aggregate_rel_l2, n_shapes=len(results), n_failed=len(report.failures))
    _report_failures([(r.shape_id, r.error) for r in report.failures])


# ---------------------------------------------------------------------------
# sweep


def parse_sweep_values(key: str, text: str) -> list:
    """Tuple-valued keys separate values with ';', scalar keys with ','."""
    if key not in RunConfig.__dataclass_fields__:
        raise ConfigError(f"unknown sweep key {key!r}")
    sep = ";" if RunConfig.__dataclass_fields__[key].type.startswith("tuple") else ","
    values = [v.strip() for v in text.split(sep) if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def sweep_metric(cfg: RunConfig, phys: bool) -> float:
    """Mean test CD for shape-model keys, aggregate test relative L2 for surrogate keys."""
    train = pipeline.training_shapes(cfg)
    tests = pipeline.test_shapes(cfg)
    model = None
    if not phys or Encoder(cfg.encoder) is Encoder.SHAPE_CODES:
        model = pipeline.fit_sdf(cfg, [pipeline.sdf_dataset_for(cfg, s) for s in train[: cfg.n_train]])
    if not phys:
        codes = pipeline.infer_many(cfg, model, tests)
        return pipeline.reconstruct(cfg, model, tests, codes).mean_cd
    phys_shapes = train[: cfg.n_phys]
    sets = pipeline.phys_training_sets(cfg, phys_shapes, pipeline.phys_samples(cfg, phys_shapes),
                                       pipeline.phys_codes(cfg, model, phys_shapes))
    sur = pipeline.fit_phys(cfg, sets)
    return run_online(model, sur, tests, pipeline.online_config(cfg), jobs=cfg.jobs).aggregate_rel_l2


def cmd_sweep(ws: Workspace, key: str, values_text: str) -> None:
    values = parse_sweep_values(key, values_text)
    phys = key in SECTIONS["phys"]
    metric = "rel_l2" if phys else "mean_cd"
    rows = []
    for raw in values:
        cfg = replace(ws.cfg, **{key: raw.replace(";", ",")})
        value = _render(getattr(cfg, key))
        log.info("sweep %s=%s", key, value)
        m = sweep_metric(cfg, phys)
        rows.append((value, m))
        _summary(**{key: value, metric: m})
    with open(ws.path("sweep_report.csv"), "w") as fh:
        fh.write(f"{key},{metric}\n")
        for value, m in rows:
            fh.write(f"\"{value}\",{format(m, '.17g')}\n" if "," in value else f"{value},{format(m, '.17g')}\n")
    ws.produced(["sweep_report.csv"])


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen": cmd_gen,
    "train-sdf": cmd_train_sdf,
    "infer-codes": cmd_infer_codes,
    "train-phys": cmd_train_phys,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdf-surrogate", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", type=Path, help="INI run configuration")
    parser.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    parser.add_argument("--seed", type=int, help="overrides [run] seed")
    parser.add_argument("--jobs", type=int, help="worker processes for per-shape work")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--key", help="sweep: config key to vary")
    parser.add_argument("--values", help="sweep: values (',' separated; ';' for tuple-valued keys)")
    return parser


def setup_logging() -> None:
    level_name = os.environ.get("SDF_SURROGATE_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise ConfigError(f"SDF_SURROGATE_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        cfg = load_config(args.config, overrides)
        ws = Workspace(args.out, cfg, args.command)
        ws.write_resolved_config()
        if args.command == "sweep":
            if not args.key or not args.values:
                raise ConfigError("sweep needs --key and --values")
            cmd_sweep(ws, args.key, args.values)
        else:
            COMMANDS[args.command](ws)
    except (ConfigError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PartialFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
