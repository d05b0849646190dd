import json

import jsonschema
import pytest

from conftest import TOY_CONFIG
from hybridsnn import config as config_mod


def test_toy_config_loads():
    cfg = config_mod.load(TOY_CONFIG)
    assert cfg.stage2.n_neurons == 100 and cfg.stage2.t_c == 300
    assert cfg.t_b_list[-1] == 256


def test_dump_load_round_trip(tmp_path):
    cfg = config_mod.load(TOY_CONFIG)
    p = tmp_path / "c.yaml"
    p.write_text(config_mod.dump(cfg))
    assert config_mod.load(p) == cfg
    assert config_mod.dump(config_mod.load(p)) == config_mod.dump(cfg)


def test_defaults_from_empty_mapping():
    cfg = config_mod.from_dict({})
    assert cfg == config_mod.ExperimentConfig()


@pytest.mark.parametrize("bad, match", [
    ({"stage2": {"neurons": 5}}, "unknown key"),
    ({"typo": 1}, "unknown key"),
    ({"stage1": {"epochs": "ten"}}, "integer"),
    ({"dataset": {"source": "web"}}, "source"),
    ({"t_b_list": [16, 8]}, "ascending"),
    ({"energy": {"include_input_spikes": "yes"}}, "true/false"),
])
def test_invalid_configs(bad, match):
    with pytest.raises(config_mod.ConfigError, match=match):
        config_mod.from_dict(bad)


def test_non_mapping_and_bad_yaml(tmp_path):
    with pytest.raises(config_mod.ConfigError):
        config_mod.from_dict([1, 2])
    p = tmp_path / "bad.yaml"
    p.write_text("stage1: [unclosed\n")
    with pytest.raises(config_mod.ConfigError, match="YAML"):
        config_mod.load(p)


def test_schema_describes_config():
    sch = json.loads(json.dumps(config_mod.schema()))
    jsonschema.Draft202012Validator.check_schema(sch)
    validator = jsonschema.Draft202012Validator(sch)
    assert set(sch["properties"]) == set(config_mod.to_dict(config_mod.ExperimentConfig()))
    validator.validate(config_mod.to_dict(config_mod.load(TOY_CONFIG)))
    assert not validator.is_valid({"stage2": {"bogus": 1}})
    assert not validator.is_valid({"stage1": {"epochs": "ten"}})
