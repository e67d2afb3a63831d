from __future__ import annotations

import json

import pytest

from codkf.config import ConfigError, ExperimentConfig, load_config


def test_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    c = load_config(p, experiment=1)
    assert (c.nodes, c.runs, c.w_p, c.T, c.q, c.steps) == (20, 100, 0.5, 0.1, 2e-6, 600)
    assert load_config() == ExperimentConfig()


@pytest.mark.parametrize(
    "change",
    [{"edge_density": 1.5}, {"nodes": 0}, {"experiment": 3}, {"tol_rho": 0.0}, {"filters": ["hdfkf"]},
     {"filters": ["nope"]}, {"filters": []}, {"steps": 1.5}, {"seed": -1}, {"backend": "x"}, {"runs": True}],
)
def test_range_errors(change):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(change)


def test_round_trip():
    c = ExperimentConfig(experiment=2, nodes=7, filters=("codkf", "ckf"), seed=42)
    assert ExperimentConfig.from_dict(json.loads(c.to_json())) == c


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown config key 'colour'"):
        ExperimentConfig.from_dict({"colour": 1})


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"nodes": 5, "seed": 3}))
    c = load_config(p, seed=9, runs=None)
    assert (c.nodes, c.seed, c.runs) == (5, 9, 100)


@pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
def test_malformed_file(tmp_path, text):
    p = tmp_path / "c.json"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
