import json

import pytest

from conceptsplit.config import DEFAULTS, OUTPUT_ENV, ConfigError, inference_config, load, resolve


def test_defaults_resolve(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = resolve()
    assert cfg["output_dir"] == "runs"
    assert inference_config(cfg).gamma == 0.9
    assert cfg["adapter"]["rank"] == DEFAULTS["adapter"]["rank"] == 8


def test_output_root_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert resolve()["output_dir"] == str(tmp_path)
    assert resolve({"output_dir": "x"})["output_dir"] == "x"


def test_overrides_win():
    cfg = resolve({"inference": {"gamma": 0.5}}, {"inference": {"gamma": 0.7}})
    assert cfg["inference"]["gamma"] == 0.7 and cfg["inference"]["p"] == 3.0


def test_all_errors_are_reported_with_field_names():
    bad = {"mode": "turbo", "inference": {"gamma": 1.5}, "train": {"steps": -1}, "extra": 1}
    with pytest.raises(ConfigError) as exc:
        resolve(bad)
    text = "\n".join(exc.value.errors)
    for field in ("mode", "train.steps", "extra"):
        assert field in text
    with pytest.raises(ConfigError, match="inference.gamma"):
        resolve({"inference": {"gamma": 1.5}})
    with pytest.raises(ConfigError, match="inference.N"):
        resolve({"inference": {"N": 80}})


def test_ablate_value_types():
    resolve({"ablate": {"axis": "N", "values": [0, 5, 10]}})
    with pytest.raises(ConfigError, match="ablate.values.1"):
        resolve({"ablate": {"axis": "N", "values": [0, 0.5]}})
    with pytest.raises(ConfigError, match="ablate"):
        resolve({"ablate": {"axis": "zeta", "values": [1]}})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"seeds": [1, 2]}))
    assert load(tmp_path / "ok.json") == {"seeds": [1, 2]}
