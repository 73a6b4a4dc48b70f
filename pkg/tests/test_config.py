import pytest

from epivo.config import RunConfig, load_config, parse_config
from epivo.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == RunConfig()
    assert cfg.pipeline.refinement and cfg.pipeline.solver == "multi"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        parse_config({"colour": 1})
    with pytest.raises(ConfigError, match="pipeline.turbo"):
        parse_config({"pipeline": {"turbo": True}})
    p = tmp_path / "c.yaml"
    p.write_text("noise:\n  sigma: 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_value_validation(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"pipeline": {"solver": "magic"}})
    with pytest.raises(ConfigError):
        parse_config({"noise": {"sigma_p": -1}})
    with pytest.raises(ConfigError, match="start_t"):
        parse_config({"schedule": {"T": 10}, "pipeline": {"start_t": 11}})
    with pytest.raises(ConfigError):
        parse_config({"schedule": {"beta_start": 0.1, "beta_end": 0.01}})
    with pytest.raises(ConfigError):
        parse_config([1, 2])
    p = tmp_path / "c.yaml"
    p.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_overrides_and_digest():
    cfg = RunConfig()
    over = cfg.with_overrides(**{"pipeline.solver": "ransac", "seed": 7})
    assert over.pipeline.solver == "ransac" and over.seed == 7
    assert cfg.pipeline.solver == "multi"
    assert over.digest() != cfg.digest()
    assert cfg.with_overrides(output="elsewhere").digest() == cfg.digest()
    assert RunConfig().digest() == cfg.digest()
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"pipeline.k": 0})


def test_pipeline_config_threshold():
    pc = RunConfig().pipeline_config(sigma_px=0.0)
    assert pc.sigma_px == 1e-3 and pc.ransac is None
    pc = parse_config({"ransac": {"inlier_threshold": 1e-5}}).pipeline_config()
    assert pc.ransac.inlier_threshold == 1e-5
