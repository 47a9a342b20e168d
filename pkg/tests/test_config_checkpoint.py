import numpy as np
import pytest

from bnndl.errors import ConfigError, DataError
from bnndl.models import NetworkSpec, build_vgg
from bnndl.tensor import Tensor
from bnndl.train import checkpoint
from bnndl.train.config import dump_config, load_config, parse_config


def test_empty_config_has_defaults():
    cfg = parse_config("")
    assert cfg.optim.kind == "adam" and cfg.distloss.lam == 2 and cfg.train.epochs == 30
    assert cfg.model.spec() == NetworkSpec("vgg", 32, small=True)


def test_file_values_and_overrides():
    text = "[optim]\nkind = nesterov\nlr = 1e-3  # comment\n[train]\nepochs = 4\n"
    cfg = parse_config(text, {"train.epochs": "7", "distloss.lam": "0"})
    assert cfg.optim.kind == "nesterov" and cfg.optim.lr == 1e-3
    assert cfg.train.epochs == 7 and cfg.distloss.lam == 0


@pytest.mark.parametrize("text,over", [
    ("[bogus]\nx = 1\n", None),
    ("[optim]\nwarp = 9\n", None),
    ("[optim]\nlr = fast\n", None),
    ("[meta]\nversion = 9\n", None),
    ("[model]\ndtype = float16\n", None),
    ("", {"epochs": "3"}),
    ("", {"optim.kind": "lbfgs"}),
    ("[train\n", None),
])
def test_config_errors(text, over):
    with pytest.raises(ConfigError):
        parse_config(text, over)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_dump_round_trip():
    cfg = parse_config("", {"optim.decay_epochs": "2,5", "model.windowed_weight_ste": "true",
                            "distloss.k_m": "0.5"})
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg and dump_config(again) == text


def _trained_like_net():
    rng = np.random.default_rng(0)
    net = build_vgg(2, small=True, input_size=8, rng=rng, dtype=np.float32)
    for _, st in net.named_bn_states():
        st.set(rng.normal(size=st.mean.shape).astype(np.float32), rng.uniform(0.5, 2, st.var.shape).astype(np.float32))
    return net


def test_checkpoint_round_trip(tmp_path):
    net = _trained_like_net()
    ck = checkpoint.from_network(net, {"epoch": 3, "tap": "post_pool"}, {"adam.m.0": np.arange(4.0)})
    checkpoint.save(tmp_path / "a.ckpt", ck)
    back = checkpoint.load(tmp_path / "a.ckpt")
    assert back.spec == ck.spec and back.meta == ck.meta
    for name in ck.params:
        np.testing.assert_array_equal(back.params[name], ck.params[name])
    np.testing.assert_array_equal(back.optim["adam.m.0"], np.arange(4.0))
    assert checkpoint.dumps(back) == checkpoint.dumps(ck)
    x = np.random.default_rng(1).normal(size=(3, 3, 8, 8)).astype(np.float32)
    rebuilt = back.build()
    assert not rebuilt.training
    np.testing.assert_array_equal(rebuilt(Tensor(x)).values, net.eval()(Tensor(x)).values)


def test_checkpoint_corruption_reports_offset(tmp_path):
    raw = checkpoint.dumps(checkpoint.from_network(_trained_like_net()))
    with pytest.raises(DataError, match="magic at byte offset 0"):
        checkpoint.loads(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError, match=r"truncated at byte offset \d+"):
        checkpoint.loads(raw[:-7])
    with pytest.raises(DataError, match="trailing"):
        checkpoint.loads(raw + b"\0")
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "missing.ckpt")


def test_checkpoint_grammar_mismatch():
    ck = checkpoint.from_network(_trained_like_net())
    ck.spec = NetworkSpec("vgg", 4, small=True, input_size=8)
    with pytest.raises(DataError):
        ck.build()
