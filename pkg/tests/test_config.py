import pytest

from ppclearn.config import RunConfig, config_from_dict, dump_config, load_config, validate_config
from ppclearn.errors import ConfigError


def test_defaults_are_valid():
    cfg = RunConfig()
    assert validate_config(cfg) == []
    assert cfg.train.lam == 0.01 and cfg.train.points_per_sample == 1024
    assert cfg.levels == (0.25, 0.5, 1.0)
    assert cfg.starts.count == 600 and tuple(cfg.starts.mtre_range) == (0.0, 30.0)


def test_yaml_roundtrip(tmp_path):
    cfg = config_from_dict({"root_seed": 3, "sim": {"sigma_d": 0.5}, "train": {"epochs": 2}})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.sim.sigma_d == 0.5 and back.train.epochs == 2 and back.root_seed == 3


@pytest.mark.parametrize("data,message", [
    ({"train": {"lam": -1.0}}, "train.lam: must be >= 0"),
    ({"train": {"points_per_sample": 4}}, "train.points_per_sample: must be an integer >= 6"),
    ({"train": {"epochs": 0}}, "train.epochs: must be a positive integer"),
    ({"sim": {"outlier_rate": 2.0}}, "sim.outlier_rate: must lie in [0, 1]"),
    ({"starts": {"count": 601}}, "starts.count: must be divisible"),
    ({"variant": "PPC-Z"}, "variant: must be one of PPC, PPC-R"),
    ({"levels": [1.0, 0.5]}, "levels: scales must increase"),
    ({"levels": []}, "levels: must be a non-empty list"),
    ({"scenes": {"kind": "torus"}}, "scenes.kind: must be one of"),
    ({"corpus": {"validation_fraction": 1.0}}, "corpus.validation_fraction"),
    ({"jobs": 0}, "jobs: must be a positive integer or null"),
])
def test_validation_messages_name_the_field(data, message):
    problems = validate_config(config_from_dict(data))
    assert any(p.startswith(message) for p in problems), problems


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="train.lamda"):
        config_from_dict({"train": {"lamda": 0.1}})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("train: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("train: [1, 2]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")
