"""Flat config parsing and run assembly."""

import pytest

from mmtl.config import (
    ConfigError,
    config_digest,
    load_run_config,
    parse_flat_config,
    run_config_from_flat,
)

TOY = """
run.variant = baseline
run.iterations = 10
model.blocks = 4
model.channels = 8
data.image_size = 16
tasks.cls.kind = classification
tasks.cls.n_way = 2
tasks.cls.k_shot = 5
tasks.cls.n_query = 5
"""


def test_parse_basics():
    flat = parse_flat_config("a.b = 1\n# comment\n\nc = hello  # trailing\n")
    assert flat == {"a.b": "1", "c": "hello"}


def test_parse_rejects_malformed_line():
    with pytest.raises(ConfigError, match="line 1"):
        parse_flat_config("not a key value")


def test_parse_rejects_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_flat_config("a = 1\na = 2")


def test_assemble_toy():
    cfg = run_config_from_flat(parse_flat_config(TOY))
    assert cfg.variant == "baseline"
    assert cfg.model.backbone.channels == 8
    assert cfg.tasks["cls"].n_way == 2
    assert cfg.hyper.loss_weights == {"cls": 1.0}
    assert cfg.model.attention is None
    assert cfg.world.label_size == 16


def test_assemble_attention_variants():
    cfg = run_config_from_flat(parse_flat_config(
        TOY.replace("baseline", "am")))
    assert cfg.model.attention is not None
    cfg = run_config_from_flat(parse_flat_config(
        TOY.replace("baseline", "pam")))
    assert cfg.model.probabilistic


def test_unknown_key_is_field_error():
    with pytest.raises(ConfigError, match="run.typo"):
        run_config_from_flat(parse_flat_config(TOY + "run.typo = 3\n"))


def test_missing_tasks_rejected():
    with pytest.raises(ConfigError, match="tasks"):
        run_config_from_flat(parse_flat_config("run.variant = baseline"))


def test_maml_full_requires_single_task():
    text = TOY.replace("baseline", "maml_full") + \
        "tasks.vp.kind = vanishing_point\n"
    with pytest.raises(ConfigError, match="maml_full"):
        run_config_from_flat(parse_flat_config(text))


def test_bad_numeric_field():
    with pytest.raises(ConfigError, match="run.iterations"):
        run_config_from_flat(parse_flat_config(
            TOY.replace("run.iterations = 10", "run.iterations = soon")))


def test_negative_loss_weight_rejected():
    with pytest.raises(ConfigError, match="loss_weight"):
        run_config_from_flat(parse_flat_config(
            TOY + "tasks.cls.loss_weight = -1\n"))


def test_directory_source_needs_path():
    with pytest.raises(ConfigError, match="data.path"):
        run_config_from_flat(parse_flat_config(
            TOY + "data.source = directory\n"))


def test_directory_source_rejects_dense_tasks():
    text = TOY + ("data.source = directory\ndata.path = /tmp/x\n"
                  "tasks.depth.kind = depth\n")
    with pytest.raises(ConfigError, match="classification"):
        run_config_from_flat(parse_flat_config(text))


def test_digest_is_order_insensitive():
    a = parse_flat_config("a = 1\nb = 2")
    b = parse_flat_config("b = 2\na = 1")
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest({"a": "1", "b": "3"})


def test_shipped_configs_load():
    for name in ("toy_classification.cfg", "mmt_suite.cfg"):
        cfg = load_run_config(f"configs/{name}")
        assert cfg.tasks
