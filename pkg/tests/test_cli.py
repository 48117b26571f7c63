import json
import subprocess
import sys

import numpy as np
import pytest

from motionparse.cli import main
from motionparse.fileio import read_grid, read_image, read_mask, write_grid, write_image, write_mask
from motionparse.losses import LossWeights


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def report(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    spec = d / "scene.in"
    spec.write_text("texture_seed=5\nbox_motion=0.1 0.05 0\ncamera_twist=0.05 0 0.02 0 0.02 0\nstereo_baseline=0.3\n")
    assert main(["synth", str(spec), "--out", str(d / "b"), "--grid-format", "npy"]) == 0
    return d / "b"


def test_synth_writes_a_complete_bundle(bundle_dir):
    names = {p.name for p in bundle_dir.iterdir()}
    for expected in ("image_t.pgm", "depth_t.npy", "flow_fwd.npy", "flow_fwd.png", "pose_ts.txt", "intrinsics.txt",
                     "segment.pgm", "visibility.pgm", "dynamic_motion.npy", "image_c.pgm", "pose_tc.txt", "scene.txt"):
        assert expected in names


def test_parse_reproduces_the_oracle(capsys, bundle_dir):
    code, out, _ = run(capsys, "parse", "--bundle", bundle_dir, "--visibility", bundle_dir / "visibility.pgm",
                       "--segment", bundle_dir / "segment.pgm", "--dynamic-motion", bundle_dir / "dynamic_motion.npy",
                       "--out", bundle_dir / "hmp", "--grid-format", "npy")
    r = report(out)
    assert code == 0 and r["report"] == "parse" and r["report_version"] == "1"
    assert float(r["max_rigid_residual"]) < 1e-6 and float(r["max_dynamic_error"]) < 1e-6
    assert read_grid(bundle_dir / "hmp" / "M_d.npy").shape[-1] == 3


def test_parse_from_pfm_files(capsys, tmp_path):
    assert main(["synth", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "parse", "--bundle", tmp_path / "b", "--visibility", tmp_path / "b" / "visibility.pgm")
    # float32 storage bounds the residual at the single-precision level
    assert code == 0 and float(report(out)["max_rigid_residual"]) < 1e-5


def test_loss_reports_paper_weights(capsys, bundle_dir, tmp_path):
    weights = tmp_path / "w.txt"
    weights.write_text(LossWeights().to_text())
    code, out, _ = run(capsys, "loss", "--bundle", bundle_dir, "--weights", weights, "--stereo")
    r = report(out)
    assert code == 0
    assert (r["weight.st"], r["weight.ms"], r["weight.vis"], r["weight.dne.0"], r["weight.vs.0"]) == ("0.5", "0.25", "0.8", "0.2", "1.0")
    assert "term.stereo.vs.3" in r and float(r["total"]) > 0


def test_optimize_pose(capsys, bundle_dir, tmp_path):
    # the box moves independently, so only visible static background carries weight
    weight = read_mask(bundle_dir / "visibility.pgm") * (1 - read_mask(bundle_dir / "segment.pgm"))
    write_grid(tmp_path / "w.npy", weight)
    code, out, _ = run(capsys, "optimize-pose", "--bundle", bundle_dir, "--truth", bundle_dir / "pose_ts.txt",
                       "--weight", tmp_path / "w.npy", "--out", tmp_path / "est.txt", "--json")
    r = json.loads(out)
    assert code == 0 and r["levels"] == 4
    assert r["rot_error"] < 1e-3 and r["trans_error"] < 5e-3
    assert (tmp_path / "est.txt").exists()


def test_segment_command(capsys, bundle_dir, tmp_path):
    code, out, _ = run(capsys, "segment", "--bundle", bundle_dir, "--out", tmp_path / "m.pgm", "--seed", 4)
    assert code == 0
    mask, gt = read_mask(tmp_path / "m.pgm"), read_mask(bundle_dir / "segment.pgm")
    assert (mask & gt).sum() / (mask | gt).sum() > 0.9


def test_eval_depth_perfect(capsys, bundle_dir):
    code, out, _ = run(capsys, "eval-depth", "--pred", bundle_dir / "depth_t.npy", "--gt", bundle_dir / "depth_t.npy")
    r = report(out)
    assert code == 0 and float(r["abs_rel"]) == 0.0 and float(r["delta1"]) == 1.0


def test_eval_depth_median_scale(capsys, tmp_path, rng):
    gt = rng.uniform(2, 40, (6, 6))
    write_grid(tmp_path / "gt.npy", gt)
    write_grid(tmp_path / "pred.npy", 3 * gt)
    code, out, _ = run(capsys, "eval-depth", "--pred", tmp_path / "pred.npy", "--gt", tmp_path / "gt.npy", "--median-scale")
    r = report(out)
    assert code == 0 and float(r["scale_factor"]) == pytest.approx(1 / 3) and float(r["abs_rel"]) < 1e-15


def test_eval_sceneflow(capsys, bundle_dir):
    d = bundle_dir
    code, out, _ = run(capsys, "eval-sceneflow", "--d1-pred", d / "depth_t.npy", "--d1-gt", d / "depth_t.npy",
                       "--d2-pred", d / "depth_s.npy", "--d2-gt", d / "depth_s.npy", "--flow-pred", d / "flow_fwd.npy",
                       "--flow-gt", d / "flow_fwd.npy", "--fg", d / "segment.pgm")
    r = report(out)
    assert code == 0 and float(r["d1.bg_fg"]) == 0.0 and float(r["fl.fg"]) == 0.0


def test_eval_seg(capsys, tmp_path):
    gt = np.zeros((4, 4))
    gt[:, :2] = 1
    pred = np.zeros((4, 4))
    pred[:, :3] = 1
    write_mask(tmp_path / "gt.pgm", gt)
    write_mask(tmp_path / "pred.pgm", pred)
    code, out, _ = run(capsys, "eval-seg", "--pred", tmp_path / "pred.pgm", "--gt", tmp_path / "gt.pgm")
    assert code == 0 and float(report(out)["pixel_acc"]) == 0.75


@pytest.mark.parametrize("kind,name", [("flow", "flow_fwd.png"), ("motion", "dynamic_motion.npy")])
def test_viz(capsys, bundle_dir, tmp_path, kind, name):
    code, _, _ = run(capsys, "viz", "--input", bundle_dir / name, "--out", tmp_path / "v.ppm", "--kind", kind)
    img = read_image(tmp_path / "v.ppm")
    assert code == 0 and img.shape[-1] == 3 and img.max() <= 1.0


def test_report_file_and_json(capsys, bundle_dir, tmp_path):
    code, out, _ = run(capsys, "eval-depth", "--pred", bundle_dir / "depth_t.npy", "--gt", bundle_dir / "depth_t.npy",
                       "--json", "--report", tmp_path / "r.json")
    assert code == 0 and json.loads((tmp_path / "r.json").read_text()) == json.loads(out)


def test_missing_file_exits_2(capsys, tmp_path):
    code, out, err = run(capsys, "eval-depth", "--pred", tmp_path / "none.npy", "--gt", tmp_path / "none.npy")
    assert code == 2 and out == "" and "none.npy" in err


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "eval-depth", "--pred", "x.npy")[0] == 1
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "synth", "--out", "somewhere")[0] == 1


def test_numerical_failure_exits_3(capsys, tmp_path):
    flat = np.full((16, 16), 0.5)
    write_image(tmp_path / "i.pgm", flat)
    write_grid(tmp_path / "d.npy", np.full((16, 16), 3.0))
    (tmp_path / "K.txt").write_text("fx=20\nfy=20\ncx=7.5\ncy=7.5\nwidth=16\nheight=16\n")
    code, _, err = run(capsys, "optimize-pose", "--intrinsics", tmp_path / "K.txt", "--image-t", tmp_path / "i.pgm",
                       "--image-s", tmp_path / "i.pgm", "--depth-t", tmp_path / "d.npy")
    assert code == 3 and "signal" in err


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "8", "--out", str(tmp_path / name), "--grid-format", "npy"]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_multi_frame_synth(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("frames=3\ncamera_twist=0.05 0 0 0 0 0\n")
    assert main(["synth", str(spec), "--out", str(tmp_path / "seq")]) == 0
    assert (tmp_path / "seq" / "pair_000" / "pose_ts.txt").exists() and (tmp_path / "seq" / "pair_001").is_dir()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "motionparse.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
