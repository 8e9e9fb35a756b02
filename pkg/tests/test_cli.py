import csv

import numpy as np
import pytest

from matchattn.cli import main
from matchattn.io import read_mtn1, read_pfm


def _csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_selftest_passes(tmp_path):
    assert main(["selftest", "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "selftest.csv")
    assert rows[0] == ["check", "ok", "detail", "seconds"] and all(r[1] == "1" for r in rows[1:])


def test_unknown_check_name_runs_nothing():
    assert main(["selftest", "--only", "no_such_check"]) == 0


def test_flops_tiny_preset(tmp_path, capsys):
    assert main(["flops", "--preset", "T", "--res", "1536", "--out", str(tmp_path)]) == 0
    vals = dict(_csv(tmp_path / "flops.csv")[1:])
    assert 0.034e12 <= int(vals["tensor_flops"]) <= 3.4e12
    assert "tensor_flops" in capsys.readouterr().out


@pytest.mark.parametrize("kind, gt", [("constant_shift", "gt0.pfm"), ("smooth_warp", "gt0.flo")])
def test_gen_then_eval_identity(tmp_path, kind, gt):
    assert main(["gen", "--kind", kind, "--height", "16", "--width", "32", "--out", str(tmp_path)]) == 0
    g = str(tmp_path / gt)
    assert main(["eval", "--pred", g, "--gt", g, "--noc", str(tmp_path / "noc0.pgm"), "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "metrics.csv")
    assert {r[0] for r in rows[1:]} == {"all", "noc"}
    assert all(float(r[2]) == 0 for r in rows[1:] if r[1] != "n")


def test_gen_disparity_is_positive(tmp_path):
    main(["gen", "--height", "16", "--width", "32", "--out", str(tmp_path)])
    assert (read_pfm(tmp_path / "gt0.pfm") == 4).all()


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    assert main(["eval", "--pred", str(tmp_path / "nope.pfm"), "--gt", str(tmp_path / "nope.pfm")]) == 2
    (tmp_path / "x.txt").write_text("")
    assert main(["eval", "--pred", str(tmp_path / "x.txt"), "--gt", str(tmp_path / "x.txt")]) == 2


def test_train_then_infer(tmp_path):
    run = tmp_path / "run"
    assert main(["train-toy", "--height", "32", "--width", "64", "--steps", "3", "--out", str(run)]) == 0
    assert _csv(run / "trace.csv")[0] == ["step", "loss", "l_init", "l_self", "l_cross", "epe"]
    scene = tmp_path / "scene"
    main(["gen", "--height", "32", "--width", "64", "--out", str(scene)])
    out = tmp_path / "pred"
    assert main(["infer", "--ckpt", str(run / "ckpt"), "--left", str(scene / "im0.ppm"),
                 "--right", str(scene / "im1.ppm"), "--out", str(out)]) == 0
    assert read_pfm(out / "disp0.pfm").shape == (32, 64)
    sr = read_mtn1(out / "self_rpos.mtn")
    assert sr.shape == (2, 32, 64, 2, 2) and np.isfinite(sr).all()
