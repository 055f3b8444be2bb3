import pytest

from uavrl import config as cfgmod
from uavrl.config import RunConfig, clone, config_hash, parse_text, to_text


def test_round_trip_identity():
    cfg = RunConfig()
    assert parse_text(to_text(cfg)) == cfg


def test_round_trip_preserves_overrides():
    cfg = RunConfig()
    cfg.env.steps = 123
    cfg.trainer.lambda_pa = 3e-3
    cfg.policy.input_layer = "fc"
    cfg.env.ou.enabled = False
    cfg.trainer.checkpoint_steps = (7, 11)
    again = parse_text(to_text(cfg))
    assert again == cfg
    assert again.trainer.checkpoint_steps == (7, 11)


def test_parse_overrides_types():
    text = to_text(RunConfig())
    text += "env.steps = 42\n"
    text += "env.jitter.enabled = false\n"
    text += "trainer.checkpoint_steps = 5, 10\n"
    text += "policy.input_layer = fc\n"
    cfg = parse_text(text)
    assert cfg.env.steps == 42 and isinstance(cfg.env.steps, int)
    assert cfg.env.jitter.enabled is False
    assert cfg.trainer.checkpoint_steps == (5, 10)
    assert cfg.policy.input_layer == "fc"


def test_unknown_key_rejected():
    text = to_text(RunConfig()) + "env.bogus = 1\n"
    with pytest.raises(ValueError, match="unknown config key"):
        parse_text(text)


def test_unknown_section_rejected():
    text = to_text(RunConfig()) + "nosuch.steps = 1\n"
    with pytest.raises(ValueError, match="unknown config"):
        parse_text(text)


def test_schema_line_must_come_first():
    with pytest.raises(ValueError, match="schema"):
        parse_text("env.steps = 10\n")
    with pytest.raises(ValueError, match="unsupported schema"):
        parse_text("schema = something-else\nenv.steps = 10\n")


def test_comments_and_blank_lines_ignored():
    text = f"schema = {cfgmod.CONFIG_SCHEMA}\n\n# comment\nenv.steps = 10  # trailing\n"
    assert parse_text(text).env.steps == 10


def test_bad_bool_rejected():
    text = to_text(RunConfig()) + "env.ou.enabled = maybe\n"
    with pytest.raises(ValueError, match="boolean"):
        parse_text(text)


def test_hash_stable_and_sensitive():
    a = RunConfig()
    b = RunConfig()
    assert config_hash(a) == config_hash(b)
    b.env.steps = 901
    assert config_hash(a) != config_hash(b)


def test_clone_is_independent():
    a = RunConfig()
    b = clone(a)
    b.env.reward.roll_weight = 0.9
    assert a.env.reward.roll_weight == 0.5
    assert b != a


def test_file_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.env.dt = 0.01
    path = tmp_path / "run.cfg"
    cfgmod.save_config(cfg, path)
    assert cfgmod.load_config(path) == cfg
