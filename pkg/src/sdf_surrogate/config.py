"""Run configuration: a flat INI file with one section per pipeline stage."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _tuple_of(conv):
    def parse(text):
        if isinstance(text, (tuple, list)):
            return tuple(conv(v) for v in text)
        text = str(text).strip()
        return tuple(conv(v) for v in text.split(",") if v.strip()) if text else ()

    return parse


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # [run]
    seed: int = 0
    jobs: int = 1
    # [geometry]
    family: str = "Disk"
    n_train: int = 60
    n_phys: int = 60
    n_test: int = 20
    n_vertices: int = 256
    radius_range: tuple[float, ...] = ()
    center_range: tuple[float, ...] = ()
    cx_range: tuple[float, ...] = ()
    cy_range: tuple[float, ...] = ()
    r0_range: tuple[float, ...] = ()
    coef_range: tuple[float, ...] = ()
    hole_counts: tuple[int, ...] = (2,)
    hole_weights: tuple[float, ...] = ()
    min_gap: float = 0.1
    # [sdf_data]
    n_boundary: int = 8000
    n_grid: int = 30
    noise_sd_large: float = 0.033**0.5
    noise_sd_small: float = 0.0033**0.5
    exclude_outer: bool = False
    # [sdf_model]
    k: int = 3
    sdf_hidden: tuple[int, ...] = (32, 32, 32, 32)
    activation: str = "GELU"
    loss: str = "L1"
    beta: float = 0.1
    sigma: float = 100.0
    centralize: bool = False
    fourier_m: int = 0
    fourier_sigma: float = 1.0
    sdf_adam_epochs: int = 1000
    batch_shapes: int = 32
    points_per_shape: int = 625
    sdf_lr: float = 1e-3
    code_lr_per_shape: float = 1e-5
    lbfgs_points_per_shape: int = 1000
    sdf_lbfgs_max_iter: int = 2000
    sdf_optimizer: str = "adam+lbfgs"
    lbfgs_tol: float = 1e-8
    # [inference]
    restarts: int = 5
    infer_max_iter: int = 500
    infer_points: int = 0
    # [fom]
    problem: str = "POISSON_UNIT_SOURCE"
    h: float = 1.0 / 128
    # [phys]
    phys_hidden: tuple[int, ...] = (20, 15, 10, 5)
    use_df: bool = True
    encoder: str = "SHAPE_CODES"
    use_centroid: bool = False
    gamma: str = "ALL"
    phys_points: int = 1000
    phys_adam_epochs: int = 200
    batch_points: int = 1000
    phys_lr: float = 1e-3
    phys_lbfgs_max_iter: int = 2000
    # [eval]
    n_eval_points: int = 1000
    grid_n: int = 201
    n_reference_points: int = 4000


SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("seed", "jobs"),
    "geometry": (
        "family", "n_train", "n_phys", "n_test", "n_vertices", "radius_range", "center_range",
        "cx_range", "cy_range", "r0_range", "coef_range", "hole_counts", "hole_weights", "min_gap",
    ),
    "sdf_data": ("n_boundary", "n_grid", "noise_sd_large", "noise_sd_small", "exclude_outer"),
    "sdf_model": (
        "k", "sdf_hidden", "activation", "loss", "beta", "sigma", "centralize", "fourier_m",
        "fourier_sigma", "sdf_adam_epochs", "batch_shapes", "points_per_shape", "sdf_lr",
        "code_lr_per_shape", "lbfgs_points_per_shape", "sdf_lbfgs_max_iter", "sdf_optimizer", "lbfgs_tol",
    ),
    "inference": ("restarts", "infer_max_iter", "infer_points"),
    "fom": ("problem", "h"),
    "phys": (
        "phys_hidden", "use_df", "encoder", "use_centroid", "gamma", "phys_points",
        "phys_adam_epochs", "batch_points", "phys_lr", "phys_lbfgs_max_iter",
    ),
    "eval": ("n_eval_points", "grid_n", "n_reference_points"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
assert set(_FIELD_TYPES) == {k for keys in SECTIONS.values() for k in keys}

_CONVERTERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "tuple[float, ...]": _tuple_of(float),
    "tuple[int, ...]": _tuple_of(int),
}


def convert(key: str, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _CONVERTERS[_FIELD_TYPES[key]](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None


def section_of(key: str) -> str:
    for name, keys in SECTIONS.items():
        if key in keys:
            return name
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        text = Path(path).read_text()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                values[key] = convert(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = convert(key, raw)
    return RunConfig(**values)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_render(getattr(cfg, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{k: convert(k, v) for k, v in changes.items()})
