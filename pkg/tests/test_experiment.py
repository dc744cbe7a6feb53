import os

import pytest

from matnilm.experiment import (
    SCHEMA,
    ConfigError,
    load_config,
    model_config,
    parse_config,
    scaling_config,
    status_rule,
    train_config,
)
from matnilm.model import IndependentModels, build_model


def test_defaults_and_sections():
    cfg = parse_config("""
        # comment line
        scenario = S2      # trailing comment
        [train]
        seed = 7
        max_epochs = 3
        [model]
        conv_channels = 8, 8
        conv_kernels = 3, 3
    """)
    assert cfg["scenario"] == "S2" and cfg["train.seed"] == 7
    assert cfg["model.conv_channels"] == (8, 8)
    assert cfg["window.input_len"] == SCHEMA["window.input_len"][1]
    assert not cfg.sa_enabled
    tc = train_config(cfg)
    assert tc.max_epochs == 3 and tc.seed == 7 and not tc.sa_enabled


def test_scenario_controls_augmentation():
    assert parse_config("scenario = S3").sa_enabled
    assert not parse_config("scenario = S1").sa_enabled
    assert not parse_config("scenario = S3\n[sa]\nenabled = off").sa_enabled
    assert parse_config("scenario = S2\n[sa]\nenabled = on").sa_enabled


def test_per_appliance_keys():
    cfg = parse_config("""
        [status]
        threshold.microwave = 100
        [sa]
        prob.fridge = 0.9
        pmf.microwave = 0.7, 0.1, 0.1, 0.1
        sigma = 0.2
    """)
    assert status_rule(cfg).threshold_w("microwave") == 100 and status_rule(cfg).threshold_w("fridge") == 15
    sc = scaling_config(cfg)
    assert sc.prob("fridge") == 0.9 and sc.prob("microwave") == 0.5 and sc.sigma == 0.2
    assert list(sc.pmf("microwave")) == [0.7, 0.1, 0.1, 0.1]


@pytest.mark.parametrize("text,key", [
    ("[train]\nlearning_rat = 1", "train.learning_rat"),
    ("bogus = 1", "bogus"),
    ("[status]\nthreshold.dryer = 3", "status.threshold.dryer"),
    ("[train]\nseed = abc", "train.seed"),
    ("[model]\nmt = maybe", "model.mt"),
    ("scenario = S9", "scenario"),
    ("[model]\nmt = off\naa = on", "model.aa"),
    ("[data]\nsource = tables", "data.train_tables"),
])
def test_invalid_keys_named(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key


def test_shape_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config("[window]\ninput_len = 100\noutput_len = 51")
    with pytest.raises(ConfigError):
        parse_config("[model]\nd_model = 10\nn_heads = 4")


def test_ablation_flags_and_sgn_preset():
    cfg = parse_config("[model]\nta = off\naa = off")
    mc = model_config(cfg)
    assert mc.multi_task and not mc.temporal_attention and not mc.appliance_attention
    sgn = model_config(parse_config("[model]\npreset = sgn"))
    assert not (sgn.multi_task or sgn.temporal_attention or sgn.appliance_attention)
    assert isinstance(build_model(sgn, 0), IndependentModels)
    full = model_config(parse_config(""))
    assert full.multi_task and full.temporal_attention and full.appliance_attention


def test_malformed_line_and_repeated_section():
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("[train]\nseed 3")
    cfg = parse_config("[train]\nseed = 3\n[model]\nta = off\n[train]\nmax_epochs = 2")
    assert cfg["train.seed"] == 3 and cfg["train.max_epochs"] == 2 and not cfg["model.ta"]


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    names = sorted(n for n in os.listdir(root) if n.endswith(".cfg"))
    assert "s3.cfg" in names
    for n in names:
        load_config(os.path.join(root, n))
