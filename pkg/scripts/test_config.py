"""Run configuration loading, validation and overrides."""

import pytest
import yaml

from conftest import PROJECT_ROOT
from src.levit_unet.config import MANIFEST_LR, SYNTHETIC_LR, RunConfig, default_config_path, load_run_config
from src.levit_unet.errors import ConfigurationError


def _write(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data) if not isinstance(data, str) else data)
    return path


def test_defaults_without_file():
    config = load_run_config()
    assert config.model.variant == "128s"
    assert config.model.num_classes == 9
    assert config.train.weight_decay == 1e-4
    assert config.train.batch_size == 8
    assert config.eval.hd_mode == "p95"
    assert config.learning_rate == SYNTHETIC_LR


def test_learning_rate_depends_on_data_source(tmp_path):
    assert load_run_config(_write(tmp_path, {"data": {"manifest": "m.tsv"}})).learning_rate == MANIFEST_LR
    assert load_run_config(_write(tmp_path, {"train": {"lr": 0.01}})).learning_rate == 0.01


def test_sections_and_nested_synthetic(tmp_path):
    path = _write(
        tmp_path,
        {
            "model": {"variant": "192", "num_classes": 4, "img_size": 64},
            "data": {"synthetic": {"n_cases": 3, "size": 48}},
            "ablate": {"num_skips": [0, 4], "conv_only": [False]},
        },
    )
    config = load_run_config(path)
    assert config.model.to_model_config().variant == "192"
    assert config.data.synthetic.n_cases == 3
    assert config.data.synthetic.slices_per_case == 10
    assert config.ablate.num_skips == [0, 4]


@pytest.mark.parametrize(
    "data,match",
    [
        ({"model": {"variant": "512"}}, "model.variant"),
        ({"model": {"colour": "red"}}, "unknown keys"),
        ({"training": {}}, "unknown config sections"),
        ({"train": {"batch_size": "8"}}, "train.batch_size: expected an integer"),
        ({"train": {"augment": 1}}, "train.augment: expected true/false"),
        ({"train": {"ce_weight": 1.5}}, "ce_weight"),
        ({"eval": {"hd_mode": "mean"}}, "hd_mode"),
        ({"eval": {"hd_points": "inner"}}, "hd_points"),
        ({"data": {"manifest": "m.tsv", "synthetic": {}}}, "either"),
        ({"data": {"synthetic": {"size": 40}}}, "multiple of 16"),
        ({"bench": {"variants": ["128s", "999"]}}, "unknown variants"),
        ({"ablate": {"num_skips": [5]}}, "ablate.num_skips"),
        ({"model": {"num_skips": None}}, "value is required"),
        ({"model": "128s"}, "must be a mapping"),
    ],
)
def test_invalid_configs(tmp_path, data, match):
    with pytest.raises(ConfigurationError, match=match):
        load_run_config(_write(tmp_path, data))


def test_malformed_yaml_and_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not valid YAML"):
        load_run_config(_write(tmp_path, "model: [unclosed"))
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_run_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigurationError, match="mapping of sections"):
        load_run_config(_write(tmp_path, "- a\n- b\n"))


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = _write(tmp_path, {"model": {"variant": "192"}, "train": {"seed": 3}})
    config = load_run_config(path, {"model.variant": "384", "train.seed": None, "eval.hd_mode": "max"})
    assert config.model.variant == "384"
    assert config.train.seed == 3
    assert config.eval.hd_mode == "max"


def test_dump_writes_resolved_learning_rate(tmp_path):
    config = RunConfig()
    path = config.dump(tmp_path / "out" / "effective.yaml")
    data = yaml.safe_load(path.read_text())
    assert data["train"]["lr"] == SYNTHETIC_LR
    assert load_run_config(path).train.lr == SYNTHETIC_LR


def test_config_path_env(monkeypatch):
    monkeypatch.setenv("CONFIG_PATH", "configs/x.yaml")
    assert default_config_path() == "configs/x.yaml"
    monkeypatch.delenv("CONFIG_PATH")
    assert default_config_path() is None


@pytest.mark.parametrize(
    "name", ["synthetic_128s.yaml", "synthetic_acceptance.yaml", "synapse.yaml", "bench.yaml", "ablate.yaml"]
)
def test_shipped_configs_validate(name):
    load_run_config(PROJECT_ROOT / "configs" / name)
