import pytest

from meetalign.config import RunConfig, load_config


def test_defaults():
    cfg = RunConfig()
    assert (cfg.train.pet_lr, cfg.train.cg_lr, cfg.train.epochs, cfg.train.batch_size) == (1e-3, 2e-5, 5, 16)
    assert cfg.train.clip_grad == 0.0
    assert cfg.model.build().hidden_dim == 64


def test_override_and_unknown_keys():
    cfg = RunConfig()
    cfg.override("train.batch_size", "64")
    cfg.override("seed", "7")
    assert cfg.train.batch_size == 64 and cfg.seed == 7
    with pytest.raises(KeyError):
        cfg.override("train.batchsize", "8")
    with pytest.raises(KeyError):
        cfg.override("optim.lr", "1")


def test_write_load_round_trip(tmp_path):
    cfg = RunConfig(seed=3)
    cfg.adapter.kind = "soft_prompt"
    cfg.train.pet_lr = 0.01
    cfg.write(tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back == cfg and back.hash() == cfg.hash()


def test_unknown_section_or_key_in_file(tmp_path):
    (tmp_path / "a.ini").write_text("[optim]\nlr = 1\n")
    with pytest.raises(KeyError):
        load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(KeyError):
        load_config(tmp_path / "b.ini")


def test_hash_changes_with_content():
    a, b = RunConfig(), RunConfig()
    b.train.epochs = 4
    assert a.hash() != b.hash()
