from collections import OrderedDict

import numpy as np
import pytest

from stgnpp import checkpoint
from stgnpp.config import ConfigError, RunConfig


def test_defaults_follow_the_reference_setup():
    cfg = RunConfig()
    assert (cfg.d_model, cfg.n_heads, cfg.n_stacks, cfg.gcn_layers, cfg.adaptive_dim) == (64, 4, 2, 2, 10)
    assert (cfg.window_slots, cfg.flow_layers, cfg.lr, cfg.batch_size, cfg.alpha) == (72, 2, 1e-3, 16, 1.0)
    assert cfg.fractions == (0.6, 0.2, 0.2)


def test_text_round_trip():
    cfg = RunConfig(seed=3, lr=0.0005, d_model=16, n_heads=2, alpha=0.5)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert "lr=0.0005\n" in cfg.to_text()


def test_comments_blank_lines_and_base():
    text = "# tuned run\n\nseed = 9  # lucky\nepochs=3\n"
    cfg = RunConfig.from_text(text, base=RunConfig(lr=0.01))
    assert (cfg.seed, cfg.epochs, cfg.lr) == (9, 3, 0.01)


@pytest.mark.parametrize("text,match", [
    ("learning_rate=0.1\n", "unknown key"),
    ("seed\n", "key=value"),
    ("epochs=three\n", "bad value"),
    ("train_frac=0.7\n", "must equal 1"),
    ("lr=0\n", "positive"),
    ("epochs=-1\n", ">= 0"),
    ("d_model=10\nn_heads=4\n", "divisible"),
    ("lr_decay=1.5\n", "lr_decay"),
    ("lr_patience=0\n", "lr_patience"),
    ("grad_clip=-1\n", ">= 0"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_text(text)


def test_load_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed=4\nbatch_size=8\n")
    assert RunConfig.load(p) == RunConfig(seed=4, batch_size=8)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = OrderedDict([("a", rng.standard_normal((3, 4))), ("b/c", np.array([np.pi, -0.0, 1e-300])),
                          ("scalar", np.array(2.5)), ("empty", np.zeros((0, 3)))])
    checkpoint.save(tmp_path / "x.bin", arrays, "seed=1\n", {"note": [1, 2]})
    back, cfg, extras = checkpoint.load(tmp_path / "x.bin")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    assert cfg == "seed=1\n" and extras == {"note": [1, 2]}
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw.startswith(checkpoint.MAGIC)


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"hello world")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "junk.bin")
    checkpoint.save(tmp_path / "ok.bin", OrderedDict(a=np.ones(100)), "")
    raw = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-80])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.load(tmp_path / "cut.bin")
