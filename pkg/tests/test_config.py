import logging

import pytest

from deskfed.config import (
    ConfigError,
    ExperimentConfig,
    parse_config,
    parse_config_text,
    serialize_config,
    validate_config,
)
from deskfed.nets import LayerSpec


def test_defaults_parse_clean():
    cfg = parse_config_text("")
    assert cfg == ExperimentConfig()


def test_roundtrip_identity():
    cfg = ExperimentConfig(num_clients=12, select_k=4, defect_degree=0.35,
                           local_lr=0.007, strategy="rule_based",
                           target_entropy="-2.5", seed=99)
    again = parse_config_text(serialize_config(cfg))
    assert again == cfg


def test_roundtrip_survives_twice():
    text = serialize_config(ExperimentConfig())
    once = parse_config_text(text)
    assert serialize_config(once) == text


def test_file_parse_and_comments(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# header comment\nrounds = 7\nseed = 3  # inline\n\n")
    cfg = parse_config(p)
    assert cfg.rounds == 7 and cfg.seed == 3


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="unknown config key 'bogus'"):
        parse_config_text("bogus = 1\n")


def test_duplicate_key_named():
    with pytest.raises(ConfigError, match="duplicate config key 'rounds'"):
        parse_config_text("rounds = 1\nrounds = 2\n")


def test_bad_value_type_named():
    with pytest.raises(ConfigError, match="'rounds'"):
        parse_config_text("rounds = soon\n")


def test_missing_equals_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("rounds = 1\nnot a pair\n")


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read config"):
        parse_config("/nonexistent/path.cfg")


def test_k_exceeding_n_names_both_fields():
    with pytest.raises(ConfigError, match="select_k=9.*num_clients=4"):
        parse_config_text("num_clients = 4\nselect_k = 9\n")


def test_defaults_echoed_to_log(caplog):
    with caplog.at_level(logging.INFO, logger="deskfed.config"):
        parse_config_text("rounds = 5\n")
    echoed = [r.message for r in caplog.records if "config default" in r.message]
    assert any("seed" in m for m in echoed)
    assert not any("rounds =" in m for m in echoed)


def test_validation_rejections():
    bad = [
        "dataset = csv",
        "partition = sorted",
        "strategy = magic",
        "rounds = 0",
        "defect_m = 3\nnum_clients = 2\nselect_k = 1",
        "defect_degree = 1.5",
        "defect_kinds = gremlins",
        "kappa = 1.0",
        "target_delta = 0.0",
        "buffer_eta = 0.0",
        "buffer_c_min = 200001",
        "gamma = 1.5",
        "rho = 1.0",
        "beta2 = -0.1",
        "target_entropy = sometimes",
        "agent_warmup = -1",
        "quality_lam2 = -0.5",
        "model_layers = 784",
        "dataset = idx",
    ]
    for text in bad:
        with pytest.raises(ConfigError):
            parse_config_text(text + "\n")


def test_empty_kinds_allowed_when_no_defects():
    cfg = parse_config_text("defect_kinds =\ndefect_m = 0\n")
    assert cfg.kinds_tuple() == ()
    with pytest.raises(ConfigError):
        parse_config_text("defect_kinds =\ndefect_m = 1\n")


def test_client_manifest_shape():
    cfg = parse_config_text("model_layers = 20,8,4\n")
    assert cfg.client_manifest() == (LayerSpec(20, 8, "relu"),
                                     LayerSpec(8, 4, "softmax"))
    single = parse_config_text("model_layers = 20,4\n")
    assert single.client_manifest() == (LayerSpec(20, 4, "softmax"),)


def test_helper_views():
    cfg = parse_config_text("beta1 = 0.6\nbeta2 = 0.3\nbeta3 = 0.1\n")
    assert cfg.beta() == (0.6, 0.3, 0.1)
    assert cfg.resolved_target_entropy() == -float(cfg.select_k)
    explicit = parse_config_text("target_entropy = -2.5\n")
    assert explicit.resolved_target_entropy() == -2.5


def test_validate_config_direct():
    cfg = ExperimentConfig(select_k=50)
    with pytest.raises(ConfigError):
        validate_config(cfg)
