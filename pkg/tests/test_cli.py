import hashlib
import json

import pytest

from volcap import cli, fileio


def run(*argv):
    return cli.run([str(a) for a in argv])


SMALL = ["--set", "synth.n_frames=2", "--set", "synth.scale=0.25", "--set", "synth.n_samples=500", "-r", "5"]


def pipeline(root):
    ds = root / "ds"
    for cmd in ("synth", "calibrate", "sync", "reconstruct", "evaluate"):
        assert run(cmd, "-d", ds, *SMALL) == 0, cmd
    return ds / "out"


def digest(out):
    return {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "bench.csv"}


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("a")), pipeline(tmp_path_factory.mktemp("b"))


def test_pipeline_scores_every_sensor(outputs):
    out, _ = outputs
    rig = json.loads((out.parent / "rig.json").read_text())
    rows = fileio.read_csv(out / "metrics.csv")
    n_sensors = len(rig["cameras"]) if "cameras" in rig else len(rig)
    assert len(rows) == 2 * n_sensors
    assert {int(r["sensor"]) for r in rows} == set(range(n_sensors))
    assert all(r["VRE"] != "nan" for r in rows)
    for name in ("rig_calibrated.json", "gof.csv", "offsets.json", "color_correction.json", "metrics.json",
                 "meshes/0000.ply", "volumes/0000.npy"):
        assert (out / name).exists(), name


def test_reruns_are_byte_identical(outputs):
    a, b = outputs
    da, db = digest(a), digest(b)
    assert da == db and len(da) > 8


@pytest.mark.parametrize("argv", [
    ["reconstruct", "--set", "recon.r=4"],
    ["reconstruct", "--set", "nonsense.key=1"],
    ["evaluate", "--set", "eval.metrics=[\"psnr\"]"],
    ["frobnicate"],
    ["sync", "--set", "novalue"],
    ["reconstruct", "-j", "0"],
])
def test_config_errors_exit_1(argv, tmp_path, capsys):
    assert run(*argv, "-d", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_track_without_calibration_exits_2(tmp_path, capsys):
    assert run("track", "-d", tmp_path) == 2
    err = capsys.readouterr().err
    assert "calibration.json" in err


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert run("reconstruct", "-d", tmp_path / "nowhere") == 2
    assert "rig.json" in capsys.readouterr().err


def test_bad_config_file_exits_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("[1, 2]")
    assert run("sync", "-c", cfg, "-d", tmp_path) == 1
    cfg.write_text(json.dumps({"recon.r": 7, "recon.mode": "simple"}))
    c = cli.PipelineConfig.build(str(cfg), ["seed=3"])
    assert c["recon.r"] == 7 and c["recon.mode"] == "simple" and c["seed"] == 3
