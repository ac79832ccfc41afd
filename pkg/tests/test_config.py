import pytest

from sttrack.config import KEYS, SEED_ENV, ConfigError, RunConfig
from sttrack.model import ModelConfig
from sttrack.tracker import TrackerConfig
from sttrack.trainer import TrainConfig


def test_defaults_match_the_library_defaults():
    cfg = RunConfig(env={})
    assert cfg.model_config() == ModelConfig()
    assert cfg.tracker_config() == TrackerConfig()
    t = cfg.train_config(1)
    base = TrainConfig()
    assert (t.steps, t.batch_size, t.lr, t.decay_step) == (base.steps, base.batch_size, base.lr, base.decay_step)
    assert cfg.seed == 0


def test_parse_values_and_comments():
    cfg = RunConfig.parse("# desk run\nsteps = 40  # short\nbackbone_channels = 4, 8\nuse_pos = false\nhead = mlp\n", env={})
    assert cfg.steps == 40
    assert cfg.backbone_channels == (4, 8)
    assert cfg.use_pos is False and cfg.head == "mlp"
    assert cfg.model_config().use_pos is False


def test_unknown_key_names_the_line():
    with pytest.raises(ConfigError, match=r"run.cfg:2: unknown config key 'stpes'"):
        RunConfig.parse("seed = 1\nstpes = 3\n", "run.cfg", env={})


def test_malformed_value_names_key_and_line():
    with pytest.raises(ConfigError, match=r"<config>:1: lr: "):
        RunConfig.parse("lr = fast\n", env={})
    with pytest.raises(ConfigError, match=r":1: head: expected one of"):
        RunConfig.parse("head = conv\n", env={})
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        RunConfig.parse("steps 10\n", env={})


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match=r":2: steps: set twice"):
        RunConfig.parse("steps = 1\nsteps = 2\n", env={})


def test_cross_field_errors_are_prefixed():
    with pytest.raises(ConfigError, match="^model: "):
        RunConfig.parse("d_model = 30\nheads = 4\n", env={})
    with pytest.raises(ConfigError, match="^tracker: "):
        RunConfig.parse("threshold = 2\n", env={})


def test_seed_environment_override():
    assert RunConfig.parse("seed = 3\n", env={SEED_ENV: "11"}).seed == 11
    assert RunConfig.parse("seed = 3\n", env={SEED_ENV: ""}).seed == 3
    assert RunConfig(env={SEED_ENV: "5"}).train_config(1).seed == 5
    with pytest.raises(ConfigError, match=SEED_ENV):
        RunConfig(env={SEED_ENV: "five"})


def test_to_text_round_trip():
    cfg = RunConfig.parse("steps = 7\nbackbone_channels = 4,8\njoint = true\ndata_limit = 12\nlr = 0.00025\n", env={})
    again = RunConfig.parse(cfg.to_text(), env={})
    assert again.as_dict() == cfg.as_dict()
    assert len(cfg.to_text().splitlines()) == len(KEYS)


def test_stage2_scene_uses_occlusion_rates():
    cfg = RunConfig(env={})
    assert cfg.scene_params(1).occlusion_prob == 0
    assert cfg.scene_params(2).occlusion_prob > 0 and cfg.scene_params(2).out_of_view_prob > 0
    assert cfg.train_config(2).stage == 2


def test_load_from_file(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("update_interval = 10\n")
    assert RunConfig.load(p, env={}).tracker_config().update_interval == 10
