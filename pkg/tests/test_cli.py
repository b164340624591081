import csv
import filecmp
import os

import numpy as np
import pytest

from rdcseg.cli import main
from rdcseg.netpbm import read_netpbm
from rdcseg.synth import list_pairs

CONFIG = """\
max_iter = 6
K = 1
alpha = 1/3
beta = 1/2
gamma = 0.3
batch_per_domain = 2
blocks = down:4,nb:regular:1,nb:rdc:2
aux_channels = 8
zoom_mode = none
seed = 3
"""


def run_pipeline(root, tag="a"):
    base = os.path.join(root, tag)
    real, warped = os.path.join(base, "real"), os.path.join(base, "warped")
    assert main(["synth", "--out", real, "--count", "4", "--height", "32", "--width", "48", "--seed", "1"]) == 0
    assert main(["warp", "--src", real, "--out", warped, "--focal-min", "12", "--focal-max", "40",
                 "--height", "24", "--width", "24", "--seed", "2"]) == 0
    cfg = os.path.join(base, "train.cfg")
    with open(cfg, "w") as fh:
        fh.write(CONFIG)
    out = os.path.join(base, "run")
    assert main(["train", "--config", cfg, "--data", real, "--data", warped, "--out", out]) == 0
    metrics = os.path.join(base, "metrics.csv")
    assert main(["eval", "--checkpoint", os.path.join(out, "checkpoint"), "--data", warped, "--domain", "1",
                 "--out", metrics, "--counts", os.path.join(base, "counts.csv")]) == 0
    return base


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(str(tmp_path_factory.mktemp("cli")))


def test_synth_outputs(pipeline):
    pairs = list_pairs(os.path.join(pipeline, "real"))
    assert [p[0] for p in pairs] == [f"scene_{i:05d}" for i in range(4)]
    img, lab = read_netpbm(pairs[0][1]), read_netpbm(pairs[0][2])
    assert img.shape == (32, 48, 3) and lab.shape == (32, 48)
    assert lab.max() < 4


def test_warp_outputs(pipeline):
    warped = os.path.join(pipeline, "warped")
    rows = [line.split("\t") for line in open(os.path.join(warped, "manifest.tsv"))]
    assert len(rows) == 4
    focals = [float(r[2]) for r in rows]
    assert all(12 <= f <= 40 for f in focals)
    lab = read_netpbm(rows[0][1])
    assert lab.shape == (24, 24)
    assert set(np.unique(lab)) <= {0, 1, 2, 3, 255}


def test_train_outputs(pipeline):
    run = os.path.join(pipeline, "run")
    rows = list(csv.reader(open(os.path.join(run, "log.csv"))))
    assert rows[0] == ["iter", "lr", "L0", "L1", "A0", "A1", "total"]
    assert len(rows) == 7
    lrs = [float(r[1]) for r in rows[1:]]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    ck = os.path.join(run, "checkpoint")
    assert os.path.exists(os.path.join(ck, "manifest.txt"))
    assert {"stats_domain0.txt", "stats_domain1.txt", "config.txt"} <= set(os.listdir(ck))


def test_eval_outputs(pipeline):
    rows = list(csv.reader(open(os.path.join(pipeline, "metrics.csv"))))
    assert rows[0] == ["name", "iou"] and rows[-1][0] == "mIoU"
    assert 0.0 <= float(rows[-1][1]) <= 1.0
    counts = list(csv.reader(open(os.path.join(pipeline, "counts.csv"))))
    assert counts[0][-1] == "void"


def test_pipeline_is_bitwise_reproducible(pipeline, tmp_path):
    other = run_pipeline(str(tmp_path), "b")
    for rel in ["metrics.csv", "counts.csv", "run/log.csv", "warped/manifest.tsv"]:
        a, b = open(os.path.join(pipeline, rel)).read(), open(os.path.join(other, rel)).read()
        assert a.replace(pipeline, "") == b.replace(other, ""), rel
    for sub in ["real", "warped", "run/checkpoint"]:
        da, db = os.path.join(pipeline, sub), os.path.join(other, sub)
        names = sorted(n for n in os.listdir(da) if n != "manifest.tsv")
        assert names == sorted(n for n in os.listdir(db) if n != "manifest.tsv")
        _, mismatch, errors = filecmp.cmpfiles(da, db, names, shallow=False)
        assert not mismatch and not errors, sub


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--variant", "RDC", "--instances", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--variant", "conv", "--instances", "2", "--inject-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_bad_config_names_key(tmp_path, caplog):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gama = 0.3\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "'gama'" in caplog.text


def test_wrong_number_of_domains(pipeline, tmp_path, caplog):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(CONFIG)
    real = os.path.join(pipeline, "real")
    assert main(["train", "--config", str(cfg), "--data", real, "--out", str(tmp_path / "o")]) == 2
    assert "K=1" in caplog.text


def test_warp_empty_source_fails(tmp_path, caplog):
    src = tmp_path / "empty"
    src.mkdir()
    assert main(["warp", "--src", str(src), "--out", str(tmp_path / "o"), "--focal", "20"]) == 1
    assert main(["warp", "--src", str(src), "--out", str(tmp_path / "o")]) == 2


def test_warp_skips_corrupt_pair(pipeline, tmp_path, caplog):
    src = tmp_path / "src"
    assert main(["synth", "--out", str(src), "--count", "2", "--height", "16", "--width", "16"]) == 0
    (src / "scene_00001_label.pgm").write_bytes(b"P5\n16 16\n255\n\x00")
    assert main(["warp", "--src", str(src), "--out", str(tmp_path / "o"), "--focal", "8",
                 "--height", "12", "--width", "12"]) == 0
    assert "skipping pair scene_00001" in caplog.text
    assert len(open(tmp_path / "o" / "manifest.tsv").readlines()) == 1


def test_eval_unknown_domain(pipeline, tmp_path, caplog):
    ck = os.path.join(pipeline, "run", "checkpoint")
    rc = main(["eval", "--checkpoint", ck, "--data", os.path.join(pipeline, "warped"), "--domain", "7",
               "--out", str(tmp_path / "m.csv")])
    assert rc == 1 and "unknown domain 7" in caplog.text


def test_synth_rejects_nonpositive_count(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == 2
