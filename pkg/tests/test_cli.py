import numpy as np
import pytest

from gigpc import advae
from gigpc.cli import main
from gigpc.fileio import read_ply, save_checkpoint, write_ply
from gigpc.networks import Model


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ellipsoids")
    assert main(["synth", "--out", str(root), "--count", "10", "--n", "64", "--seed", "1"]) == 0
    return root


def train(data, out, *extra):
    return main(["train", "--data", str(data), "--out", str(out), "--preset", "tiny",
                 "--seed", "7", "--epochs", "2", "--pretrain-epochs", "1", "--batch-size", "4",
                 *extra])


def test_synth_writes_splits(data):
    names = [p.name for p in sorted(data.glob("*.ply"))]
    assert len(names) == 10
    splits = {s: (data / f"{s}.txt").read_text().split() for s in ("train", "val", "test")}
    assert sorted(sum(splits.values(), [])) == names
    assert [len(splits[s]) for s in ("train", "val", "test")] == [7, 1, 2]
    assert read_ply(data / names[0]).shape == (64, 3)


def test_train_twice_gives_identical_checkpoints(data, tmp_path):
    assert train(data, tmp_path / "run1") == 0
    assert train(data, tmp_path / "run2") == 0
    for name in ("final.gig", "best.gig", "loss_log.csv", "seed.txt"):
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    log = (tmp_path / "run1" / "loss_log.csv").read_text().splitlines()
    assert log[0] == advae.LOG_HEADER and len(log) == 1 + 3
    # the echoed config reproduces the run
    assert main(["train", "--config", str(tmp_path / "run1" / "config.txt"),
                 "--out", str(tmp_path / "run3")]) == 0
    assert (tmp_path / "run3" / "final.gig").read_bytes() == (tmp_path / "run1" / "final.gig").read_bytes()


def test_generate_full_preset_count(tmp_path):
    save_checkpoint(tmp_path / "full.gig", Model.create("full", 0), {"preset": "full"})
    assert main(["generate", "--ckpt", str(tmp_path / "full.gig"), "--count", "12",
                 "--seed", "1", "--out", str(tmp_path / "gen")]) == 0
    files = sorted((tmp_path / "gen").glob("*.ply"))
    assert len(files) == 12
    assert all(read_ply(f).shape == (2116, 3) for f in files)


def test_evaluate_gen_equal_ref(data, tmp_path):
    assert main(["evaluate", "--ref", str(data), "--gen", str(data), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.txt").read_text()
    for line in ("JSD,mean,0\n", "MMD-CD,mean,0\n", "MMD-EMD,mean,0\n",
                 "COV-CD,mean,100\n", "COV-EMD,mean,100\n"):
        assert line in text


def test_editing_and_export_commands(data, tmp_path):
    ckpt = tmp_path / "m.gig"
    save_checkpoint(ckpt, Model.create("tiny", 0), {"preset": "tiny"})
    a, b = sorted(data.glob("*.ply"))[:2]
    assert main(["interpolate", "--ckpt", str(ckpt), "--a", str(a), "--b", str(b),
                 "--steps", "4", "--out", str(tmp_path / "i")]) == 0
    assert len(list((tmp_path / "i").glob("step_*.ply"))) == 4
    assert main(["arith", "--ckpt", str(ckpt), "--target", str(a), "--plus", str(b),
                 "--minus", str(b), "--out", str(tmp_path / "a")]) == 0
    assert read_ply(tmp_path / "a" / "result.ply").shape == (64, 3)
    assert main(["export-gim", "--ckpt", str(ckpt), "--out", str(tmp_path / "g.ppm")]) == 0
    assert (tmp_path / "g.ppm").read_bytes().startswith(b"P6\n8 8\n255\n")


def test_sample_mesh(tmp_path):
    (tmp_path / "t.obj").write_text("v 0 0 0\nv 4 0 0\nv 0 4 0\nf 1 2 3\n")
    assert main(["sample-mesh", "--mesh", str(tmp_path / "t.obj"), "--n", "100",
                 "--out", str(tmp_path / "s.ply")]) == 0
    P = read_ply(tmp_path / "s.ply")
    assert P.shape == (100, 3) and np.linalg.norm(P, axis=1).max() <= 1 + 1e-12


def test_usage_errors_exit_1(data, tmp_path, capsys):
    assert main([]) == 1
    assert main(["train", "--data", str(data)]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--preset", "huge"]) == 1
    (tmp_path / "c.txt").write_text("sede = 3\n")
    assert main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(data),
                 "--out", str(tmp_path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.ply").write_text("not a ply")
    assert main(["sample-mesh", "--mesh", str(tmp_path / "bad.ply"),
                 "--out", str(tmp_path / "s.ply")]) == 2
    assert "magic" in capsys.readouterr().err


def test_divergence_exits_3(data, tmp_path, capsys):
    assert train(data, tmp_path / "d", "--lr", "1e300") == 3
    assert "diverged" in capsys.readouterr().err
