import json
import math

import pytest

from pipir.config import ConfigError, load_config, parse_config, resolve_seed


def raw(**sections):
    doc = {"paths": {"run_dir": "/tmp/x"}}
    doc.update(sections)
    return doc


def test_defaults_and_echo():
    cfg = parse_config(raw())
    assert cfg.train.alpha == 0.002 and cfg.train.theta_thre == math.pi / 2
    assert cfg.data.tasks == ["noise", "rain", "lowlight"]
    d = cfg.to_dict()
    assert parse_config({k: v for k, v in d.items()}).to_dict() == d
    ucfg = cfg.unet_config()
    assert ucfg.T == 3 and len(ucfg.pip_configs) == ucfg.n_skips == 2
    assert [(p.c, p.h) for p in ucfg.pip_configs] == [(16, 16), (32, 8)]


def test_missing_run_dir_names_the_field():
    with pytest.raises(ConfigError, match="paths.run_dir"):
        parse_config({})
    with pytest.raises(ConfigError, match="paths.run_dir"):
        parse_config({"paths": {}})


@pytest.mark.parametrize("doc, needle", [
    (raw(extra=1), "extra"),
    (raw(train={"alpah": 0.1}), "alpah"),
    (raw(model={"levels": 3, "base": 4}), "base"),
    (raw(pip=[{"c": 4, "enable_d": False}, {}]), "enable_d"),
    (raw(train={"ablation": "z"}), "ablation"),
    (raw(train={"theta_thre": 4.0}), "theta_thre"),
    (raw(data={"tasks": ["noise", "snow"]}), "tasks"),
    (raw(pip=[{"c": 4}]), "pip"),
])
def test_bad_configs_are_rejected(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(doc)


def test_ablation_flags_reach_every_pip():
    cfg = parse_config(raw(train={"ablation": "c", "theta_thre": 0.5}))
    for p in cfg.unet_config().pip_configs:
        assert (p.enable_d, p.enable_B, p.enable_selective) == (True, True, False)
        assert p.theta_thre == 0.5


def test_seed_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("PIP_SEED", raising=False)
    assert resolve_seed(None, 3) == 3
    monkeypatch.setenv("PIP_SEED", "7")
    assert resolve_seed(None, 3) == 7
    assert resolve_seed(9, 3) == 9
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw(train={"seed": 1})))
    assert load_config(path).train.seed == 7
    assert load_config(path, seed_flag=11).train.seed == 11
    monkeypatch.setenv("PIP_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)
