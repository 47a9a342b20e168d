import numpy as np
import pytest

from bnndl.cli import main
from bnndl.train.data import write_synthetic_cifar

NET = "model.network=family=vgg,x=4,small=true,classes=10"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_synthetic_cifar(root / "cifar", 80, 40)
    run = root / "run"
    code = main(["train", "--epochs", "2", "--data-path", str(data), "--set", NET, "--set", "data.batch_size=40",
                 "--out-dir", str(run)])
    assert code == 0
    return root, data, run


def _common(data):
    return ["--data-path", str(data)]


def test_train_artifacts(workspace):
    _, _, run = workspace
    names = sorted(p.name for p in run.iterdir())
    assert names == ["best.ckpt", "config.resolved.ini", "last.ckpt", "metrics.csv"]


def test_train_timing_opt_in(workspace, tmp_path):
    _, data, _ = workspace
    assert main(["train", "--epochs", "1", "--data-path", str(data), "--set", NET, "--timing",
                 "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "timing.csv").read_text().startswith("epoch,seconds")


def test_eval_and_fused_infer_agree(workspace, capsys):
    root, data, run = workspace
    assert main(["eval", "--ckpt", str(run / "best.ckpt"), *_common(data), "--out-dir", str(root / "ev")]) == 0
    float_line = capsys.readouterr().out.strip().splitlines()[-1]
    assert (root / "ev" / "eval.csv").exists() and (root / "ev" / "command.resolved.ini").exists()
    assert main(["fuse", "--ckpt", str(run / "best.ckpt"), "--out", str(root / "m.bin")]) == 0
    capsys.readouterr()
    assert main(["infer", "--model", str(root / "m.bin"), *_common(data)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == float_line


def test_infer_batch_folder(workspace, capsys, tmp_path):
    root, data, run = workspace
    main(["fuse", "--ckpt", str(run / "last.ckpt"), "--out", str(root / "last.bin")])
    rng = np.random.default_rng(0)
    for i in range(3):
        (tmp_path / f"img{i}.raw").write_bytes(rng.integers(0, 256, 3 * 32 * 32, dtype=np.uint8).tobytes())
    capsys.readouterr()
    assert main(["infer", "--model", str(root / "last.bin"), "--batch", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "file,class" and len(lines) == 4
    (tmp_path / "bad.raw").write_bytes(b"123")
    assert main(["infer", "--model", str(root / "last.bin"), "--batch", str(tmp_path)]) == 3


def test_diagnose(workspace):
    root, data, run = workspace
    out = root / "diag"
    assert main(["diagnose", "--ckpt", str(run / "best.ckpt"), "--layer", "0", *_common(data), "--limit", "10",
                 "--out-dir", str(out)]) == 0
    diag = (out / "diagnostics.csv").read_text().splitlines()
    assert len(diag) == 1 + 4
    hist = (out / "histograms.csv").read_text().splitlines()
    assert hist[0] == "channel,bin_left,bin_right,count" and len(hist) == 1 + 4 * 50


def test_sweep(workspace, tmp_path, capsys):
    _, data, _ = workspace
    assert main(["sweep", "--axis", "lam", "--values", "0,2", "--epochs", "1", "--data-path", str(data),
                 "--set", NET, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == "axis,value,final_acc,best_acc,best_epoch"


def test_cost_commands(workspace, capsys, tmp_path):
    _, _, run = workspace
    assert main(["cost", "--shape", "256,256,56,56,3,3"]) == 0
    assert "1.4146" in capsys.readouterr().out
    assert main(["cost", "--shape", "256,256,56,56,3,3", "--scheme", "xnor_net"]) == 0
    assert "4.3304" in capsys.readouterr().out
    assert main(["cost", "--network", "family=vgg,x=128", "--out-dir", str(tmp_path)]) == 0
    assert "params storage" in capsys.readouterr().out
    assert (tmp_path / "cost.csv").exists()
    assert main(["cost", "--ckpt", str(run / "best.ckpt")]) == 0
    (tmp_path / "t.txt").write_text("xnor_pj = 0\n")
    assert main(["cost", "--shape", "1,1,1,1,1,1", "--table", str(tmp_path / "t.txt")]) == 2


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_exit_codes(workspace, tmp_path, capsys):
    _, data, _ = workspace
    assert main(["cost", "--shape", "1,2,3"]) == 2
    assert main(["cost"]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt")]) == 3
    assert main(["train", "--data-path", str(tmp_path / "nothing"), "--set", NET]) == 3
    assert main(["train", "--set", "optim.kind=lbfgs"]) == 2
    assert main(["train", "--epochs", "2", "--data-path", str(data), "--set", NET, "--set", "optim.lr=1e30",
                 "--set", "optim.schedule=const"]) == 4
    err = capsys.readouterr().err
    assert "error: config:" in err and "error: data:" in err and "error: numeric:" in err
