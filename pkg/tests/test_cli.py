import numpy as np
import pytest

from geofeat import io, net
from geofeat.cli import main, run_command

TINY = """
synth.n_cameras = 4
synth.n_tracks = 120
synth.texture_size = 256
synth.image_width = 160
synth.image_height = 120
synth.focal = 140.0
arch = micro
grid_size = 8
n1 = 8
n2 = 2
steps = 3
holdout_pairs = 0:1,1:2
"""


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def run(*argv):
    return run_command([argv[0], "--config", "tiny.cfg", *argv[1:]])


def test_gen_data_twice_byte_identical(workdir):
    assert run("gen-data", "--seed", "7", "--out", "a") == 0
    assert run("gen-data", "--seed", "7", "--out", "b") == 0
    files = sorted(p.name for p in (workdir / "a").iterdir())
    assert "scene.georec" in files and len(files) == 5
    for name in files:
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_train_zero_steps_is_initialisation(workdir):
    assert run("gen-data", "--seed", "1") == 0
    assert run("train", "--steps", "0", "--seed", "5", "--out", "init.gdnw") == 0
    got = io.read_gdnw("init.gdnw")
    want = net.params_for("micro", 5)
    assert io.encode_gdnw(got) == io.encode_gdnw(want)


def test_full_pipeline(workdir, capsys):
    assert run("gen-data", "--seed", "1") == 0
    assert run("similarity-report", "--out", "sim.tsv") == 0
    rows = (workdir / "sim.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["cam_i", "cam_j", "shared", "s_image", "kept"] and len(rows) == 7
    assert run("build-batches", "--out", "batches") == 0
    ds = io.read_gdpk("batches/epoch0.gdpk")
    manifest = io.decode_manifest((workdir / "batches/epoch0.manifest").read_text())
    assert ds.g_size == 8 and len(ds) == 8 * len(manifest)
    assert run("train", "--log", "loss.tsv") == 0
    assert len((workdir / "loss.tsv").read_text().splitlines()) == 4
    assert run("export-descriptors") == 0
    assert sorted(p.name for p in (workdir / "descriptors").iterdir()) == [f"cam{i}.gdsc" for i in range(4)]
    capsys.readouterr()
    assert run("eval-pairs") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t") == ["pair", "features", "putative", "inliers", "matching_score", "recall",
                                  "precision"]
    assert [r.split("\t")[0] for r in out[1:]] == ["0-1", "1-2"]
    assert run("calibrate-ratio", "--target", "0.5") == 0
    assert capsys.readouterr().out.startswith("ratio\tprecision")
    assert run("compact-dim", "-t", "0.9") == 0
    k = int(capsys.readouterr().out.splitlines()[1].split("\t")[-1])
    assert 1 <= k <= 8
    assert run("quantize", "--in", "descriptors/cam0.gdsc", "--out", "q0.gdsc") == 0
    assert float(capsys.readouterr().out.splitlines()[1].split("\t")[2]) <= 1 / 255
    assert io.read_gdsc("q0.gdsc").quantized


def test_resolved_config_is_printed_and_reusable(workdir, capsys):
    assert run("gen-data", "--seed", "2", "--out", "x") == 0
    err = capsys.readouterr().err
    assert err.startswith("# geofeat gen-data resolved config")
    (workdir / "resolved.cfg").write_text(err)
    assert run_command(["gen-data", "--config", "resolved.cfg", "--out", "y"]) == 0
    assert (workdir / "x/scene.georec").read_bytes() == (workdir / "y/scene.georec").read_bytes()


def test_loss_check(workdir, capsys):
    assert run("loss-check", "--sets", "5") == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split("\t")[0] for l in lines] == ["check", "e1", "e2", "total", "micro_net"]


def test_exit_codes(workdir, capsys):
    assert run_command(["bogus"]) == 1
    assert run_command([]) == 1
    assert run("train", "--set", "alpha=3") == 1
    assert "alpha" in capsys.readouterr().err
    assert run("train", "--set", "nonsense=1") == 1
    assert run("train", "--steps", "x") == 1
    # missing scene file is a runtime failure
    assert run("train", "--data", "missing.georec") == 2
    (workdir / "broken.georec").write_text("NOT A SCENE\n")
    assert run("similarity-report", "--scene", "broken.georec") == 2
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1


def test_inputs_not_mutated(workdir):
    assert run("gen-data", "--seed", "1") == 0
    before = {p.name: p.read_bytes() for p in workdir.iterdir() if p.is_file()}
    assert run("similarity-report", "--out", "sim.tsv") == 0
    after = {p.name: p.read_bytes() for p in workdir.iterdir() if p.is_file() and p.name != "sim.tsv"}
    assert before == after
