import csv
import subprocess
import sys

import numpy as np
import pytest
import torch

from gpinv.cli import main, parse_degradation
from gpinv.data import read_png, write_png, write_vector
from gpinv.degradations import DegradationOp, apply_pinv, moore_penrose, quantize, to_unit

TOY = ["--set", "problem.matrix=0.5,0.5", "--set", "flow.layers=4", "--set", "flow.hidden=8",
       "--set", "training.flow_iters=40", "--set", "training.flow_batch=32",
       "--set", "training.ddpm_iters=40", "--set", "training.ddpm_batch=32",
       "--set", "training.log_every=10", "--set", "diffusion.T=20", "--set", "diffusion.hidden=8",
       "--set", "io.dataset=gaussian:2000"]


@pytest.fixture(scope="module")
def toy_ckpts(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["train-flow", *TOY, "--seed", "0", "--out", str(out)]) == 0
    assert main(["train-ddpm", *TOY, "--flow", str(out / "flow.ckpt"), "--out", str(out)]) == 0
    return out


def test_train_flow_writes_reloadable_checkpoint(toy_ckpts):
    from gpinv.pipeline import FlowModel
    assert FlowModel.load(toy_ckpts / "flow.ckpt").flow.in_shape == (2,)
    assert (toy_ckpts / "flow_metrics.csv").read_text().startswith("iter,loss,fit_mse")
    assert (toy_ckpts / "ddpm_metrics.csv").read_text().startswith("iter,loss,loss_ema")


def test_rerun_gives_identical_logs(toy_ckpts, tmp_path):
    assert main(["train-flow", *TOY, "--seed", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "flow_metrics.csv").read_bytes() == (toy_ckpts / "flow_metrics.csv").read_bytes()
    assert (tmp_path / "flow.ckpt").read_bytes() == (toy_ckpts / "flow.ckpt").read_bytes()


def test_missing_dataset_path_is_user_error(tmp_path, capsys):
    code = main(["train-flow", "--set", "io.dataset=/no/such/dir", "--out", str(tmp_path)])
    assert code == 1
    assert "/no/such/dir" in capsys.readouterr().err


def test_unknown_flag_and_key_are_user_errors(tmp_path, capsys):
    assert main(["train-flow", "--bogus"]) == 1
    assert main(["train-flow", "--set", "flow.depth=3", "--out", str(tmp_path)]) == 1
    assert "flow.depth" in capsys.readouterr().err
    assert main(["train-flow", "--config", str(tmp_path / "missing.ini")]) == 1


def test_divergence_exits_2(tmp_path, capsys):
    code = main(["train-flow", *TOY, "--set", "training.sigma=1e-30", "--out", str(tmp_path)])
    assert code == 2
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / "flow.ckpt").exists()


def test_mismatched_flow_is_named(toy_ckpts, tmp_path, capsys):
    code = main(["train-ddpm", *TOY, "--set", "problem.in_shape=3", "--set", "problem.matrix=1,0,0",
                 "--flow", str(toy_ckpts / "flow.ckpt"), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "(2,)" in err and "(3,)" in err


def test_sample_vectors_and_manifest(toy_ckpts, tmp_path):
    inp = tmp_path / "y.csv"
    write_vector(inp, np.array([[0.5], [1.0], [-2.0]]))
    args = ["sample", "--flow", str(toy_ckpts / "flow.ckpt"), "--ddpm", str(toy_ckpts / "ddpm.ckpt"),
            "--input", str(inp), "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a"), "--nfe", "1"]) == 0
    with open(tmp_path / "a" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["input"] for r in rows] == ["y.csv:0", "y.csv:1", "y.csv:2"]
    assert all(r["nfe"] == "2" and r["seed"] == "5" for r in rows)
    assert main(args + ["--out", str(tmp_path / "b"), "--nfe", "1"]) == 0
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()
    assert main(args + ["--out", str(tmp_path / "c"), "--nfe", "21"]) == 1


def _image_setup(tmp_path):
    from gpinv.pipeline import DenoiserModel, FlowModel, train_ddpm, train_flow
    from gpinv.config import ExperimentConfig
    from gpinv.data import synthetic_corpus
    cfg = ExperimentConfig.from_text("", [
        "problem.kind=image", "problem.degradation=bicubic-downsample", "problem.in_shape=1x16x16",
        "problem.scale=4", "flow.layers=2", "flow.hidden=8", "diffusion.hidden=8", "diffusion.T=10",
        "training.flow_iters=3", "training.ddpm_iters=3", "training.flow_batch=4",
        "training.ddpm_batch=4", "training.log_every=3"])
    data = synthetic_corpus(6, 0, size=16)
    fm = train_flow(cfg, data, tmp_path / "f.ckpt")
    train_ddpm(cfg, fm, data, tmp_path / "d.ckpt")
    lr = tmp_path / "lr"
    lr.mkdir()
    for i in range(3):
        write_png(lr / f"im{i}.png", quantize(fm.degradation(to_unit(data[i:i + 1]))[0]))
    return lr


def test_sample_images_is_deterministic(tmp_path):
    lr = _image_setup(tmp_path)
    base = ["sample", "--flow", str(tmp_path / "f.ckpt"), "--ddpm", str(tmp_path / "d.ckpt"),
            "--input", str(lr), "--nfe", "3", "--seed", "1"]
    assert main(base + ["--out", str(tmp_path / "o1")]) == 0
    assert main(base + ["--out", str(tmp_path / "o2")]) == 0
    for i in range(3):
        a = (tmp_path / "o1" / f"im{i}_sr.png").read_bytes()
        assert a == (tmp_path / "o2" / f"im{i}_sr.png").read_bytes()
        assert read_png(tmp_path / "o1" / f"im{i}_sr.png").shape == (1, 16, 16)
    text = (tmp_path / "o1" / "manifest.csv").read_text().splitlines()
    assert text[0] == "input,output,seed,stream,nfe,consistency,quantization_mse"
    # a single input alone reproduces its row from the batch
    assert main(["sample", "--flow", str(tmp_path / "f.ckpt"), "--ddpm", str(tmp_path / "d.ckpt"),
                 "--input", str(lr / "im0.png"), "--nfe", "3", "--seed", "1",
                 "--out", str(tmp_path / "o3")]) == 0
    assert (tmp_path / "o3" / "im0_sr.png").read_bytes() == (tmp_path / "o1" / "im0_sr.png").read_bytes()


def test_sample_rejects_wrong_measurement_shape(tmp_path, capsys):
    lr = _image_setup(tmp_path)
    write_png(lr / "big.png", np.zeros((1, 8, 8), dtype=np.uint8))
    code = main(["sample", "--flow", str(tmp_path / "f.ckpt"), "--ddpm", str(tmp_path / "d.ckpt"),
                 "--input", str(lr / "big.png"), "--out", str(tmp_path / "o")])
    assert code == 1 and "(1, 8, 8)" in capsys.readouterr().err


def _write_pairs(tmp_path, rows, header=("output", "original")):
    path = tmp_path / "pairs.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_eval_identical_pairs(tmp_path, capsys):
    img = (np.random.default_rng(0).random((1, 16, 16)) * 255).astype(np.uint8)
    write_png(tmp_path / "a.png", img)
    pairs = _write_pairs(tmp_path, [["a.png", "a.png"]])
    desc = "kind=bicubic-downsample in_shape=1x16x16 scale=4"
    assert main(["eval", "--pairs", str(pairs), "--degradation", desc, "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "PSNR (dB)    : 99.000" in out and "SSIM         : 1.0000" in out
    assert (tmp_path / "r" / "eval_report.csv").read_text().splitlines()[1].startswith("a.png,inf,1.0,")


def test_eval_pseudoinverse_outputs_are_consistent(tmp_path):
    op = DegradationOp("linear-matrix", (3,), matrix=torch.tensor([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]]))
    (tmp_path / "op.txt").write_text(op.to_text())
    rows = []
    for i in range(4):
        y = torch.randn(1, 2, generator=torch.Generator().manual_seed(i))
        write_vector(tmp_path / f"y{i}.csv", y.numpy())
        write_vector(tmp_path / f"x{i}.csv", apply_pinv(op, moore_penrose(op), y).numpy())
        rows.append([f"x{i}.csv", f"y{i}.csv"])
    pairs = _write_pairs(tmp_path, rows, header=("output", "input"))
    assert main(["eval", "--pairs", str(pairs), "--degradation", str(tmp_path / "op.txt"),
                 "--out", str(tmp_path / "r")]) == 0
    last = (tmp_path / "r" / "eval_report.csv").read_text().splitlines()[-1].split(",")
    assert float(last[3]) < 1e-3


def test_eval_empty_manifest(tmp_path, capsys):
    pairs = _write_pairs(tmp_path, [])
    assert main(["eval", "--pairs", str(pairs), "--degradation", "kind=average-pool in_shape=1x4x4 scale=2"]) == 1
    assert "no pairs" in capsys.readouterr().err


def test_degradation_from_checkpoint(toy_ckpts):
    op = parse_degradation(str(toy_ckpts / "flow.ckpt"))
    assert op.kind == "linear-matrix" and op.matrix.tolist() == [[0.5, 0.5]]


def test_gen_data_is_seeded(tmp_path):
    assert main(["gen-data", "--n", "3", "--seed", "4", "--lr-scale", "4", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--n", "3", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    for i in range(3):
        name = f"{i:06d}.png"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_png(tmp_path / "a" / "lr" / "000000.png").shape == (1, 8, 8)


def test_out_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("GPINV_OUT_DIR", str(tmp_path / "env"))
    monkeypatch.setenv("GPINV_NUM_THREADS", "1")
    assert main(["gen-data", "--n", "1"]) == 0
    assert (tmp_path / "env" / "000000.png").exists()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "gpinv.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-flow" in res.stdout
    res = subprocess.run([sys.executable, "-m", "gpinv.cli", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 1
