import pytest
import toml

from utils import config as cfg
from utils.errors import ConfigError


def test_defaults_validate():
    config = cfg.load_config()
    assert config["problem"] == "pendulum"
    assert config["pendulum"]["theta_points"] == 41
    assert config["daa"]["controller"]["alert_cost"] == 0.005
    assert config["pendulum"]["render_size"] == 16 and config["pendulum"]["noise_sigma"] == 0.3


@pytest.mark.parametrize("text, expected", [
    ("perception.alpha=0.2", {"perception": {"alpha": 0.2}}),
    ("problem=daa", {"problem": "daa"}),
    ("problem='daa'", {"problem": "daa"}),
    ("perception.hidden=[8, 8]", {"perception": {"hidden": [8, 8]}}),
    ("daa.camera.size = 16", {"daa": {"camera": {"size": 16}}}),
])
def test_parse_override(text, expected):
    assert cfg.parse_override(text) == expected


@pytest.mark.parametrize("text", ["perception.alpha", "=3"])
def test_malformed_override(text):
    with pytest.raises(ConfigError):
        cfg.parse_override(text)


def test_deep_merge_keeps_siblings():
    merged = cfg.deep_merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 5}})
    assert merged == {"a": {"x": 1, "y": 5}, "b": 3}


def test_layering_file_then_overrides(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('problem = "daa"\n[perception]\nalpha = 0.5\nlam = 3.0\n')
    config = cfg.load_config(path, ["perception.alpha=0.8"])
    assert config["problem"] == "daa"
    assert config["perception"]["alpha"] == 0.8
    assert config["perception"]["lam"] == 3.0
    assert config["perception"]["epochs"] == 200


@pytest.mark.parametrize("override", [
    "perception.alpha=1.5",
    "risk.alphas=[0.2, 1.0]",
    "pendulum.theta_points=40",
    "perception.loss='huber'",
    "perception.colour='red'",
    "jobs=0",
    "daa.camera.size=20",
])
def test_invalid_values_are_rejected(override):
    with pytest.raises(ConfigError):
        cfg.load_config(overrides=[override])


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        cfg.load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("problem = \n")
    with pytest.raises(ConfigError):
        cfg.load_config(bad)


def test_output_dir_and_resolved_file(tmp_path, monkeypatch):
    monkeypatch.setenv(cfg.OUTPUT_ROOT_ENV, str(tmp_path))
    config = cfg.load_config(overrides=["output.directory='exp1'"])
    out = cfg.output_dir(config)
    assert out == tmp_path / "exp1" / "pendulum"
    path = cfg.write_resolved(config, out)
    assert toml.load(path) == config
    assert cfg.seed(config, "train") == 2
