from __future__ import annotations

import pytest

from analog_vmm.config import CONFIG_ENV, Config, dump_config, load_config, parse_config
from analog_vmm.errors import ConfigurationError, IngestionError


def test_defaults_and_round_trip():
    cfg = Config()
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config("") == cfg


def test_overrides_reach_their_dataclass():
    cfg = parse_config("[core]\ngain_sigma_ln = 0.1\ntrial_noise_sigma = 0\n"
                       "[training]\nlr = 0.01\nsoftware_epochs = 3\n[mac]\nskip_zeros = no\n")
    assert cfg.variation.gain_sigma_ln == 0.1 and cfg.physics.trial_noise_sigma == 0.0
    assert cfg.hyper.lr == 0.01 and cfg.training.software_epochs == 3
    assert cfg.mac.skip_zeros is False
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["[nonsense]\nx = 1\n", "[core]\ngain_sigma = 0.3\n",
                                  "[training]\nbatch_size = many\n", "[mac]\nskip_zeros = maybe\n",
                                  "no section header\n", "[cost]\npower_w = -1\n"])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_load_from_file_and_environment(tmp_path, monkeypatch):
    path = tmp_path / "exp.ini"
    path.write_text("[compiler]\nweight_limit = 15\n")
    assert load_config(path).compiler.weight_limit == 15
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert load_config().compiler.weight_limit == 15
    assert load_config("default") == Config()
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config() == Config()


def test_unreadable_config(tmp_path):
    with pytest.raises(IngestionError):
        load_config(tmp_path / "missing.ini")
