import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdf_surrogate import pipeline
from sdf_surrogate.config import SECTIONS, ConfigError, RunConfig, dump_config, load_config, replace


def test_defaults_and_sections_cover_every_field():
    cfg = load_config()
    assert cfg == RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    assert names == {k for keys in SECTIONS.values() for k in keys}


def test_dump_then_load_is_identity(tmp_path):
    cfg = replace(RunConfig(), k=5, sdf_hidden="64,64", centralize="true", hole_weights="0.5,0.5",
                  fourier_sigma="0.7")
    path = tmp_path / "resolved.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@given(st.integers(0, 2**31 - 1), st.lists(st.integers(1, 128), min_size=1, max_size=5), st.booleans())
def test_roundtrip_property(seed, hidden, flag):
    cfg = replace(RunConfig(), seed=seed, sdf_hidden=",".join(map(str, hidden)), use_df=str(flag))
    assert cfg.sdf_hidden == tuple(hidden) and cfg.use_df is flag
    from configparser import ConfigParser

    parser = ConfigParser()
    parser.read_string(dump_config(cfg))
    assert parser["run"]["seed"] == str(seed)


def test_unknown_keys_and_sections_rejected(tmp_path):
    bad = tmp_path / "a.ini"
    bad.write_text("[sdf_model]\nk = 3\nwidth = 9\n")
    with pytest.raises(ConfigError, match="width"):
        load_config(bad)
    bad.write_text("[model]\nk = 3\n")
    with pytest.raises(ConfigError, match="model"):
        load_config(bad)
    # keys must sit in their own section
    bad.write_text("[fom]\nk = 3\n")
    with pytest.raises(ConfigError, match="'k'"):
        load_config(bad)
    with pytest.raises(ConfigError, match="bogus"):
        load_config(None, {"bogus": 1})


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="n_train"):
        load_config(None, {"n_train": "many"})
    with pytest.raises(ConfigError, match="boolean"):
        load_config(None, {"centralize": "perhaps"})


def test_optimizer_mode_controls_lbfgs_phase():
    assert pipeline.sdf_schedule(replace(RunConfig(), sdf_optimizer="adam")).lbfgs_max_iter == 0
    assert pipeline.sdf_schedule(RunConfig()).lbfgs_max_iter == RunConfig().sdf_lbfgs_max_iter
    with pytest.raises(ValueError):
        pipeline.sdf_schedule(replace(RunConfig(), sdf_optimizer="sgd"))


def test_family_spec_ranges():
    cfg = replace(RunConfig(), family="PlateWithHoles", radius_range="0.1,0.2", hole_counts="1,2",
                  hole_weights="0.5,0.5")
    spec = pipeline.family_spec(cfg)
    assert spec.ranges["radius"] == (0.1, 0.2)
    assert spec.hole_count_choices == (1, 2)
    with pytest.raises(ValueError):
        pipeline.family_spec(replace(RunConfig(), radius_range="0.1"))


def test_test_shapes_disjoint_from_training():
    cfg = replace(RunConfig(), n_train=5, n_phys=5, n_test=3)
    train = {s.shape_id for s in pipeline.training_shapes(cfg)}
    tests = {s.shape_id for s in pipeline.test_shapes(cfg)}
    assert len(train) == 5 and len(tests) == 3 and not train & tests
