import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from advstitch import checkpoint as ckpt
from advstitch.cli import read_csv, run
from advstitch.data import DatasetManifest, load_image, save_image

CONFIG = {
    "seed": 3,
    "data": {"n_train": 8, "n_test": 4, "patch_size": 32, "rho": 4.0, "n_sources": 2, "source_size": 64},
    "estimator": {"channels": 4, "hidden": 16},
    "reconstructor": {"channels": 4},
    "train": {"lr": 1e-3, "batch_size": 4, "epochs": 1},
    "aat": {"search_epochs": 1, "gamma1": 1e-2, "gamma2": 1e-3},
    "eval": {"attacks": ["fgsm", "soa"], "batch_size": 4},
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(CONFIG))
    return tmp_path


def cli(workdir, *args, sets=()):
    argv = list(args) + ["--workdir", str(workdir), "--config", str(workdir / "cfg.yaml")]
    for s in sets:
        argv += ["--set", s]
    return run(argv)


@pytest.fixture
def with_data(workdir):
    assert cli(workdir, "gen-data") == 0
    return workdir


def test_gen_data_is_idempotent(workdir):
    assert cli(workdir, "gen-data") == 0
    first = (workdir / "data/manifest.tsv").read_bytes()
    png = (workdir / "data/train/train00000_2.png").read_bytes()
    assert cli(workdir, "gen-data") == 0
    assert (workdir / "data/manifest.tsv").read_bytes() == first
    assert (workdir / "data/train/train00000_2.png").read_bytes() == png
    m = DatasetManifest.load(workdir / "data/manifest.tsv")
    assert len(m.by_split("train")) == 8 and len(m.by_split("test")) == 4
    train_ids = {r.path1 for r in m.by_split("train").records}
    assert not train_ids & {r.path1 for r in m.by_split("test").records}


@pytest.mark.parametrize("n", [0, 100])
def test_gen_data_counts(workdir, n):
    assert cli(workdir, "gen-data", sets=[f"data.n_train={n}", "data.n_test=0"]) == 0
    m = DatasetManifest.load(workdir / "data/manifest.tsv")
    assert len(m) == n
    assert len(list((workdir / "data").glob("train/*.png"))) == 2 * n


def test_usage_errors_exit_2(with_data, capsys):
    assert cli(with_data, "train", "--mode", "bogus", "--run", "r") == 2
    assert cli(with_data, "frobnicate") == 2
    assert cli(with_data, "attack", "--attack", "cw", "--run", "r") == 2
    assert cli(with_data, "gen-data", sets=["data.nope=1"]) == 2
    assert cli(with_data, "gen-data", sets=["train.lr=fast"]) == 2
    assert "usage error" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(with_data, capsys):
    assert cli(with_data, "attack", "--attack", "fgsm", "--run", "nothing") == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_data_exits_1(workdir):
    assert cli(workdir, "train", "--mode", "standard", "--run", "r") == 1


def test_train_writes_history_and_checkpoint(with_data):
    assert cli(with_data, "train", "--mode", "standard", "--run", "std", sets=["train.epochs=2"]) == 0
    run_dir = with_data / "runs/std"
    text = (run_dir / "history.csv").read_text()
    assert text.startswith("# config_hash=")
    rows = read_csv(run_dir / "history.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"] and rows[1]["lr"] == repr(1e-3 * 0.96)
    meta, arrays = ckpt.load_checkpoint(run_dir / "checkpoint.npz")
    assert meta["mode"] == "standard" and meta["epoch"] == 2
    assert ckpt.has_component(arrays, "estimator") and not ckpt.has_component(arrays, "search")


def test_aat_with_zero_gamma1_keeps_alpha(with_data):
    assert cli(with_data, "train", "--mode", "aat", "--run", "aat", sets=["aat.gamma1=0"]) == 0
    meta, arrays = ckpt.load_checkpoint(with_data / "runs/aat/checkpoint.npz")
    alphas = {k: v for k, v in arrays.items() if k.startswith("search/") and k.endswith("alpha")}
    assert len(alphas) == 3
    torch.manual_seed(3)
    from advstitch.estimator import EstimatorConfig, EstimatorNet
    fresh = EstimatorNet(EstimatorConfig(channels=4, hidden=16)).state_dict()
    for k, v in alphas.items():
        assert np.array_equal(v, fresh[k[len("search/"):]].numpy())
    genotype_text = (with_data / "runs/aat/genotype.txt").read_text()
    assert genotype_text == meta["genotypes"]
    assert [r["stage"] for r in read_csv(with_data / "runs/aat/history.csv")] == ["search", "final"]


def test_aat_search_moves_alpha(with_data):
    # the heads start at zero, so alpha sees no gradient until theta has taken a step
    assert cli(with_data, "train", "--mode", "aat", "--run", "aat", sets=["aat.search_epochs=3"]) == 0
    _, arrays = ckpt.load_checkpoint(with_data / "runs/aat/checkpoint.npz")
    torch.manual_seed(3)
    from advstitch.estimator import EstimatorConfig, EstimatorNet
    fresh = EstimatorNet(EstimatorConfig(channels=4, hidden=16)).state_dict()
    assert any(not np.array_equal(arrays[f"search/{k}"], v.numpy()) for k, v in fresh.items()
               if k.endswith("alpha"))


@pytest.mark.parametrize("mode", ["standard", "aat"])
def test_resume_reproduces_uninterrupted_run(with_data, mode):
    sets = ["aat.search_epochs=1"]
    assert cli(with_data, "train", "--mode", mode, "--run", "full", sets=sets + ["train.epochs=3"]) == 0
    assert cli(with_data, "train", "--mode", mode, "--run", "part", sets=sets + ["train.epochs=2"]) == 0
    assert cli(with_data, "train", "--mode", mode, "--run", "part", "--resume",
               sets=sets + ["train.epochs=3"]) == 0
    full = read_csv(with_data / "runs/full/history.csv")
    part = read_csv(with_data / "runs/part/history.csv")
    assert full == part
    _, a = ckpt.load_checkpoint(with_data / "runs/full/checkpoint.npz")
    _, b = ckpt.load_checkpoint(with_data / "runs/part/checkpoint.npz")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_with_other_mode_is_usage_error(with_data):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r") == 0
    assert cli(with_data, "train", "--mode", "routine", "--run", "r", "--resume") == 2


def test_zero_epsilon_attack_outputs_equal_inputs(with_data):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r") == 0
    assert cli(with_data, "attack", "--attack", "pgd", "--run", "r", sets=["attack.epsilon=0"]) == 0
    out = with_data / "runs/r/attacks/pgd"
    m = DatasetManifest.load(with_data / "data/manifest.tsv").by_split("test")
    for rec in m.records:
        for view, src in (("1", rec.path1), ("2", rec.path2)):
            assert torch.equal(load_image(out / f"{rec.id}_{view}.png"), load_image(with_data / src))
        side = (out / f"{rec.id}.txt").read_text()
        assert "epsilon=0.0" in side and "delta_inf=0.0" in side
        trace = side.split("loss_trace=")[1].strip().split(",")
        assert len(trace) == 4 and len(set(trace)) == 1
    summary = read_csv(out / "summary.csv")[0]
    assert summary["n"] == "4" and float(summary["mean_delta_inf"]) == 0.0
    assert float(summary["mean_loss_gain"]) == 0.0


def test_attack_artifacts_respect_budget(with_data):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r") == 0
    assert cli(with_data, "attack", "--attack", "soa", "--run", "r", "--limit", "2") == 0
    rows = read_csv(with_data / "runs/r/attacks/soa/records.csv")
    assert len(rows) == 2
    assert all(float(r["delta_inf"]) <= 8 / 255 + 1e-9 for r in rows)


def test_stitch_identity_fixture(with_data, capsys):
    # zero training epochs leave the zero-initialized heads, i.e. the identity estimate
    assert cli(with_data, "train", "--mode", "standard", "--run", "ident", sets=["train.epochs=0"]) == 0
    img = load_image(with_data / "data/test/test00000_1.png")
    save_image(img, with_data / "same_1.png")
    save_image(img, with_data / "same_2.png")
    assert cli(with_data, "stitch", "--run", "ident", "--pair", "same_1.png", "same_2.png",
               "--out", "out/stitched.png") == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    out = load_image(with_data / "out/stitched.png")
    assert (info["height"], info["width"]) == (32, 32) == tuple(out.shape[-2:])
    assert float((out - img).abs().mean()) < 2 / 255


def test_stitch_canvas_dimensions_match_output(with_data, capsys):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r",
               sets=["train.reconstructor_epochs=1"]) == 0
    assert cli(with_data, "stitch", "--run", "r", "--pair", "data/test/test00001_1.png",
               "data/test/test00001_2.png", "--out", "s.png") == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    out = load_image(with_data / "s.png")
    assert tuple(out.shape[-2:]) == (info["height"], info["width"])


def test_stitch_corrupted_image_exits_1(with_data, capsys):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r", sets=["train.epochs=0"]) == 0
    (with_data / "bad.png").write_bytes(b"\x89PNG garbage")
    assert cli(with_data, "stitch", "--run", "r", "--pair", "bad.png", "data/test/test00000_2.png",
               "--out", "x.png") == 1
    assert "bad.png" in capsys.readouterr().err


def test_eval_and_report(with_data):
    assert cli(with_data, "train", "--mode", "standard", "--run", "r") == 0
    assert cli(with_data, "eval", "--run", "r") == 0
    rows = read_csv(with_data / "runs/r/metrics.csv")
    assert [r["condition"] for r in rows] == ["benign", "fgsm", "soa"]
    single = with_data / "single.csv"
    single.write_text("method,condition,en\nm,benign,7.0\n")
    assert cli(with_data, "report", str(single), "--out", "rep1") == 0
    rep = read_csv(with_data / "rep1.csv")
    assert len(rep) == 1 and rep[0]["en"] == "7.0" and rep[0]["sf"] == ""
    assert (with_data / "rep1.png").stat().st_size > 0
    assert cli(with_data, "report", "r", "r", "--out", "rep2") == 0
    rep = read_csv(with_data / "rep2.csv")
    assert rep[:3] == rep[3:] == rows


def test_report_missing_run_exits_1(with_data):
    assert cli(with_data, "report", "ghost") == 1


def test_module_entry_point(with_data):
    proc = subprocess.run([sys.executable, "-m", "advstitch.cli", "train", "--mode", "nope", "--run", "x",
                           "--workdir", str(with_data)], capture_output=True, text=True)
    assert proc.returncode == 2
