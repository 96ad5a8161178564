import json

import pytest

from drtriage.config import ConfigError, load_run_config, parse_run_config, write_resolved
from drtriage.nn import tiny_preset


def _base(**kw):
    d = {"seed": 3, "dataset": {"kind": "synth", "per_grade": 4}}
    d.update(kw)
    return d


def test_defaults_and_seed_propagation():
    cfg = parse_run_config(_base())
    assert cfg.train.seed == 3 and cfg.dataset["seed"] == 3
    assert cfg.backbone == tiny_preset()
    assert len(cfg.load_dataset()) == 20


def test_unknown_keys_rejected():
    for bad in (
        _base(extra=1),
        _base(train={"lr": 0.1}),
        _base(preproc={"blur": 1}),
        _base(augment={"jitter": 1}),
        _base(dataset={"kind": "synth", "size": 3}),
        _base(backbone={"preset": "tiny", "depth": 3}),
    ):
        with pytest.raises(ConfigError):
            parse_run_config(bad)


def test_seed_is_mandatory_and_top_level():
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"dataset": {"kind": "synth"}})
    with pytest.raises(ConfigError, match="top level"):
        parse_run_config(_base(train={"seed": 1}))


def test_side_mismatch_rejected():
    with pytest.raises(ConfigError, match="input_side"):
        parse_run_config(_base(preproc={"target_side": 32}))
    cfg = parse_run_config(_base(preproc={"target_side": 32}, backbone={"preset": "tiny", "input_side": 32}))
    assert cfg.backbone.input_side == 32


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        parse_run_config(_base(train={"learning_rate": -1}))
    with pytest.raises(ConfigError):
        parse_run_config(_base(dataset={"kind": "csv"}))


def test_resolved_config_reproduces_run(tmp_path):
    cfg = parse_run_config(_base(train={"epochs": 2}, augment={"p_flip": 0.0}))
    write_resolved(cfg, tmp_path / "r.json")
    again = load_run_config(tmp_path / "r.json")
    assert again.resolved() == cfg.resolved()
    resolved = json.loads((tmp_path / "r.json").read_text())
    assert resolved["train"]["batch_size"] == 32 and resolved["preproc"]["clahe_grid"] == 8


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{seed: 1")
    with pytest.raises(ConfigError):
        load_run_config(p)
