import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from synth import random_unit_field, write_candidate_corpus
from aquacurate.cli import argv_from_run_config, main, read_key_values
from aquacurate.io import read_pfm, write_normal_png, write_pfm


@pytest.fixture
def corpus(tmp_path, rng):
    rgb_dir, models = write_candidate_corpus(tmp_path / "data", rng, 4, ["alpha", "beta"])
    return rgb_dir, models


def _curate_argv(rgb_dir, models, out, *extra):
    argv = ["curate", "--rgb-dir", str(rgb_dir), "--out-dir", str(out)]
    for m in models:
        argv += ["--model-dir", str(m)]
    return argv + list(extra)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["curate", "--rgb-dir", "x"]) == 1
    assert main(["loss", "--pred", "a", "--gt", "b", "--rho", "l3"]) == 1
    assert main(["curate", "--rgb-dir", "x", "--model-dir", "y", "--out-dir", "z", "--workers", "0"]) == 1
    assert main(["--help"]) == 0


def test_curate_and_rerun_from_embedded_config(tmp_path, corpus):
    rgb_dir, models = corpus
    wfile = tmp_path / "weights.txt"
    wfile.write_text("# tweak\ndepth.sharpness = 0.5\n")
    out = tmp_path / "out"
    assert main(_curate_argv(rgb_dir, models, out, "--weights-file", str(wfile), "--workers", "2")) == 0
    report = json.loads((out / "dnesa_report.json").read_text())
    assert report["weights"]["depth"]["sharpness"] == 0.5
    assert report["run_config"]["weights_file"] == str(wfile)
    assert "workers" not in report["run_config"]
    copied = sorted(p.name for p in out.iterdir() if p.name != "dnesa_report.json")
    assert len(copied) == 2 * len(report["images"])

    first = (out / "dnesa_report.json").read_bytes()
    shutil.rmtree(out)
    assert main(argv_from_run_config(report["run_config"])) == 0
    assert (out / "dnesa_report.json").read_bytes() == first


def test_curate_missing_rgb_dir_exit_2(tmp_path):
    assert main(["curate", "--rgb-dir", str(tmp_path / "none"), "--model-dir", str(tmp_path),
                 "--out-dir", str(tmp_path / "o")]) == 2


def test_bad_weights_file_exit(tmp_path, corpus):
    rgb_dir, models = corpus
    bad = tmp_path / "w.txt"
    bad.write_text("depth.sharpness = lots\n")
    assert main(_curate_argv(rgb_dir, models, tmp_path / "o", "--weights-file", str(bad))) == 2
    bad.write_text("depth.nonsense = 1\n")
    assert main(_curate_argv(rgb_dir, models, tmp_path / "o", "--weights-file", str(bad))) == 2


def test_score_subcommand(tmp_path, corpus, capsys):
    rgb_dir, models = corpus
    m = models[0]
    assert main(["score", "--rgb", str(rgb_dir / "img000.png"), "--depth", str(m / "img000_depth.png"),
                 "--normal", str(m / "img000_normal.png")]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["combined_score"] == pytest.approx(data["depth_score"] + data["normal_score"], abs=1e-8)
    assert set(data["depth_quality"]) == {"edge_consistency", "local_variance", "complexity", "sharpness"}


def test_score_size_mismatch_exit_2(tmp_path, corpus):
    rgb_dir, models = corpus
    Image.fromarray(np.zeros((5, 5, 3), dtype=np.uint8)).save(tmp_path / "small.png")
    m = models[0]
    assert main(["score", "--rgb", str(tmp_path / "small.png"), "--depth", str(m / "img000_depth.png"),
                 "--normal", str(m / "img000_normal.png")]) == 2


def _depth_dirs(tmp_path):
    rng = np.random.default_rng(0)
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
    for i in range(2):
        gt = (rng.random((8, 8)) + 0.5).astype(np.float32)
        write_pfm(tmp_path / "gt" / f"f{i}.pfm", gt)
        write_pfm(tmp_path / "pred" / f"f{i}.pfm", 0.5 * gt)


def test_eval_depth_json_and_csv(tmp_path):
    _depth_dirs(tmp_path)
    out = tmp_path / "e.json"
    assert main(["eval-depth", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt"),
                 "--align", "median", "--output", str(out)]) == 0
    data = json.loads(out.read_text())
    assert [r["image"] for r in data["rows"]] == ["f0", "f1", "aggregate"]
    assert data["rows"][-1]["abs_rel"] == pytest.approx(0, abs=1e-6)
    assert data["run_config"]["align"] == "median"
    csv_out = tmp_path / "e.csv"
    assert main(["eval-depth", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt"),
                 "--align", "none", "--format", "csv", "--output", str(csv_out)]) == 0
    lines = csv_out.read_text().splitlines()
    assert lines[0] == "image,abs_rel,sq_rel,rmse,log10,delta1,delta2,delta3,pixel_count"
    assert len(lines) == 4


def test_eval_depth_degenerate_exit_3(tmp_path):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    write_pfm(tmp_path / "gt" / "a.pfm", np.ones((4, 4), dtype=np.float32))
    write_pfm(tmp_path / "pred" / "a.pfm", np.full((4, 4), 2.0, dtype=np.float32))
    assert main(["eval-depth", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt")]) == 3


def test_eval_normals(tmp_path, capsys):
    rng = np.random.default_rng(1)
    for d in ("p", "g"):
        (tmp_path / d).mkdir()
    n = random_unit_field(rng, 6, 6)
    write_normal_png(tmp_path / "p" / "a.png", n)
    write_normal_png(tmp_path / "g" / "a.png", n)
    assert main(["eval-normals", "--pred-dir", str(tmp_path / "p"), "--gt-dir", str(tmp_path / "g"),
                 "--per-pixel"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["rows"][-1]["acc_11_25"] == 1.0


def test_loss_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(2)
    d, gt = rng.random((16, 16)).astype(np.float32), rng.random((16, 16)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    write_pfm(tmp_path / "g.pfm", gt)
    assert main(["loss", "--pred", str(tmp_path / "d.pfm"), "--gt", str(tmp_path / "g.pfm"), "--rho", "l2",
                 "--grad-check"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["total"] == pytest.approx(data["ssi"] + 0.5 * data["reg"], rel=1e-8)
    assert data["fd_max_rel_error"] < 1e-4
    assert data["K"] == 4 and data["rho"] == "l2"


def test_loss_degenerate_and_bad_k(tmp_path):
    write_pfm(tmp_path / "c.pfm", np.ones((8, 8), dtype=np.float32))
    write_pfm(tmp_path / "g.pfm", np.random.default_rng(3).random((8, 8)).astype(np.float32))
    assert main(["loss", "--pred", str(tmp_path / "c.pfm"), "--gt", str(tmp_path / "g.pfm"), "--k", "2"]) == 3
    assert main(["loss", "--pred", str(tmp_path / "g.pfm"), "--gt", str(tmp_path / "g.pfm"), "--k", "9"]) == 1
    assert main(["loss", "--pred", str(tmp_path / "missing.pfm"), "--gt", str(tmp_path / "g.pfm")]) == 2


def test_loss_l1_kink_exit_3(tmp_path):
    d = np.random.default_rng(4).random((8, 8)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    write_pfm(tmp_path / "g.pfm", d)
    assert main(["loss", "--pred", str(tmp_path / "d.pfm"), "--gt", str(tmp_path / "g.pfm"), "--k", "2",
                 "--grad-check"]) == 3


def test_net_forward(tmp_path):
    Image.fromarray((np.random.default_rng(5).random((40, 36, 3)) * 255).astype(np.uint8)).save(tmp_path / "in.png")
    cfg = tmp_path / "net.cfg"
    cfg.write_text("dims = 8, 16, 32\ndepth = 2, 2, 2\ntransformer_blocks = 1, 1, 1\ndilations = 2; 1; 3\n"
                   "decoder_channels = 4, 8, 8\n")
    out = tmp_path / "net"
    assert main(["net-forward", "--input", str(tmp_path / "in.png"), "--config", str(cfg), "--seed", "7",
                 "--out-dir", str(out), "--workers", "2"]) == 0
    rep = json.loads((out / "net_report.json").read_text())
    assert rep["padded_shape"] == [48, 48]
    assert rep["scales"]["0"]["shape"] == [40, 36]
    assert rep["scales"]["2"]["shape"] == [10, 9]
    assert rep["features"] == [[8, 12, 12], [16, 6, 6], [32, 3, 3]]
    assert read_pfm(out / "disparity_s1.pfm").shape == (20, 18)
    for s in rep["scales"].values():
        assert 0 < s["disparity_min"] <= s["disparity_max"] < 1
        assert s["max_unit_deviation"] <= 1e-5
    assert (out / "normals_s0.png").exists() and (out / "disparity_s0.png").exists()


def test_net_forward_bad_config_exit_2(tmp_path):
    Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(tmp_path / "in.png")
    (tmp_path / "bad.cfg").write_text("dims = 1, 2\n")
    assert main(["net-forward", "--input", str(tmp_path / "in.png"), "--config", str(tmp_path / "bad.cfg"),
                 "--out-dir", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.cfg").write_text("mystery = 3\n")
    assert main(["net-forward", "--input", str(tmp_path / "in.png"), "--config", str(tmp_path / "bad.cfg"),
                 "--out-dir", str(tmp_path / "o")]) == 2


def test_read_key_values(tmp_path):
    p = tmp_path / "kv.txt"
    p.write_text("Depth.Sharpness = 1  # note\n# skip\nnormal.sharpness=2\n")
    assert read_key_values(p) == {"Depth.Sharpness": "1", "normal.sharpness": "2"}


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "aquacurate.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "aquacurate" in res.stdout
