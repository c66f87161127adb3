import pytest

from ctxedit import config
from ctxedit.errors import ConfigError


def test_default_roundtrip_bytes():
    text = config.dumps(config.Config())
    assert config.dumps(config.loads(text)) == text


def test_fingerprint_tracks_content():
    a = config.Config()
    b = config.loads(config.dumps(a))
    assert a.fingerprint() == b.fingerprint()
    b.train.lr = 5e-4
    assert a.fingerprint() != b.fingerprint()


def test_partial_config_fills_defaults():
    cfg = config.loads("train:\n  lr: 0.002\n")
    assert cfg.train.lr == 0.002 and cfg.model.depth == config.Config().model.depth


@pytest.mark.parametrize("text", [
    "bogus: 1\n",
    "train:\n  learning_rate: 0.1\n",
    "model:\n  depth: 2\n  wings: 3\n",
    "registry:\n  max_latent_len: 8\n  entries: []\n  extra: 1\n",
    "train:\n  schedule: nope\n",
    "model:\n  channels: 30\n",
    ": : :\n",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_registry_order_preserved():
    cfg = config.Config()
    again = config.loads(config.dumps(cfg))
    assert again.registry.roles == cfg.registry.roles


def test_inline_schedule():
    cfg = config.loads('train:\n  schedule: "recamera:5;recamera,id_delete:5"\n')
    assert cfg.schedule().total_steps == 10


def test_path_env_override(monkeypatch, tmp_path):
    cfg = config.Config()
    monkeypatch.setenv("CTXEDIT_DATA", str(tmp_path))
    assert cfg.path("data") == tmp_path


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.yaml")
