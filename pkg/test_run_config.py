#!/usr/bin/env python3
"""
Tests for the flat run configuration and its overrides
"""

import pytest

from src.application.run_config import RunConfig, parse_config
from src.core.exceptions import ConfigError
from src.core.models import AttackInit


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    attack = cfg.attack_config()
    assert (attack.epsilon, attack.theta, attack.batch, attack.epochs, attack.n_images) == (20.0, 10.0, 5, 10, 600)
    assert attack.init is AttackInit.ZEROS
    assert [s.model_id for s in cfg.pool_specs()] == ["default-s11", "default-s12", "deep-s13", "wide-s14"]


def test_file_values_and_comments():
    cfg = parse_config("# budget\nepsilon = 10   # pixels\n\nsweep_thetas = 2, 4\ninit = uniform\n")
    assert cfg.epsilon == 10.0
    assert cfg.sweep_thetas == (2.0, 4.0)
    assert cfg.attack_config().init is AttackInit.UNIFORM


def test_invalid_value_names_its_line():
    with pytest.raises(ConfigError) as info:
        parse_config("theta = 5\nepsilon = -1\n")
    assert info.value.line == 2
    assert str(info.value).startswith("line 2:")
    assert info.value.exit_code == 2


def test_overrides_take_precedence():
    cfg = parse_config("epsilon = 5\nbatch = 4\n", ["epsilon=7"])
    assert cfg.epsilon == 7.0
    assert cfg.batch == 4


def test_override_errors_name_the_flag():
    with pytest.raises(ConfigError, match="--set batch=zero"):
        parse_config("", ["batch=zero"])
    with pytest.raises(ConfigError):
        parse_config("", ["epsilon"])


@pytest.mark.parametrize("text", [
    "unknown_key = 1",
    "batch = 2.5",
    "patch_mask_prob = 1.5",
    "init = gaussian",
    "epsilon = nan",
    "just words",
])
def test_rejected_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_cross_field_checks():
    with pytest.raises(ConfigError, match="csap_class"):
        parse_config("num_classes = 3\ncsap_class = 3\nn_images = 30\nablate_sizes = 30\n")
    with pytest.raises(ConfigError, match="exceeds"):
        parse_config("per_class_train = 10\n")
    with pytest.raises(ConfigError) as info:
        parse_config("batch = 8\nn_images = 6\n")
    assert info.value.line == 2
    with pytest.raises(ConfigError):
        parse_config("source_index = 4\n")
    with pytest.raises(ConfigError):
        parse_config("pool = default@1,default@1\n")


def test_resolved_text_round_trips():
    cfg = parse_config("epsilon = 12.5\nsweep_epsilons = 1,2\npool = wide@3,deep@4\nsource_index = 1\n"
                       "pool_sizes = 1,2\n")
    text = cfg.to_text()
    assert "epsilon = 12.5\n" in text
    assert "sweep_epsilons = 1.0,2.0\n" in text
    assert parse_config(text) == cfg


def test_base_config_is_respected():
    cfg = parse_config("", base=RunConfig(output_dir="elsewhere"))
    assert cfg.output_dir == "elsewhere"


def test_output_dir_defaults_to_environment_setting(monkeypatch):
    import app
    from config import Config
    from src.application.registry import names

    monkeypatch.setattr(Config, "UTAP_OUTPUT_DIR", "from-env")
    args = app.build_parser(names()).parse_args(["eval"])
    cfg = app.load_run_config(args)
    assert cfg.output_dir == "from-env"
    assert cfg.experiment == "eval"
