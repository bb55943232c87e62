import json
import subprocess
import sys

import numpy as np
import pytest

from dilseg.cli import main
from dilseg.io import read_ntsr, read_pgm


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "--out", data, "--scenes", 2, "--test-scenes", 1, "--extent", 96,
               "--count", 5, 10, "--seed", 3, "--preview") == 0
    ckpt = root / "model.ckpt"
    assert run("train", "--preset", "front-s-d", "--data", data, "--steps", 2, "--batch", 4,
               "--patches", 16, "--out", ckpt, "--log", root / "loss.csv") == 0
    return root, data, ckpt


def test_unknown_subcommand_exits_2():
    proc = subprocess.run([sys.executable, "-m", "dilseg", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["rf"])
    assert err.value.code == 2


def test_operational_error_exits_1(tmp_path, capsys):
    assert run("proposals", "--map", tmp_path / "missing.ntsr", "--out", tmp_path / "p.json") == 1
    assert "error" in capsys.readouterr().err
    assert run("erf", "--out", tmp_path / "erf") == 1


def test_rf_table_and_json(tmp_path, capsys):
    assert run("rf", "--preset", "front-s-d") == 0
    assert capsys.readouterr().out.strip().endswith("final RF: 61")
    assert run("rf", "--preset", "front-s-d", "--json", "--out", tmp_path / "rf.json") == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "rf.json").read_text())
    assert printed["final_rf"] == 61


def test_presets_listing(capsys):
    assert run("presets", "--scale", "micro") == 0
    out = capsys.readouterr().out
    assert "front-s-d-lfe" in out and "front-l-d-large" in out


def test_gen_data_layout(workspace):
    _, data, _ = workspace
    manifest = json.loads((data / "manifest.json").read_text())
    assert [s["split"] for s in manifest["scenes"]] == ["train", "train", "test"]
    for s in manifest["scenes"]:
        d = data / s["id"]
        assert read_ntsr(d / "image.ntsr").shape == (3, 96, 96)
        assert read_pgm(d / "preview.pgm").shape == (96, 96)


def test_gen_data_deterministic(workspace, tmp_path):
    _, data, _ = workspace
    again = tmp_path / "data"
    assert run("gen-data", "--out", again, "--scenes", 2, "--test-scenes", 1, "--extent", 96,
               "--count", 5, 10, "--seed", 3, "--preview") == 0
    for f in data.rglob("*"):
        if f.is_file():
            assert (again / f.relative_to(data)).read_bytes() == f.read_bytes(), f.name


def test_train_deterministic_and_resumable(workspace, tmp_path):
    root, data, ckpt = workspace
    assert (root / "loss.png").exists()
    again = tmp_path / "again.ckpt"
    assert run("train", "--preset", "front-s-d", "--data", data, "--steps", 2, "--batch", 4,
               "--patches", 16, "--out", again, "--log", tmp_path / "loss.csv") == 0
    assert again.read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (root / "loss.csv").read_bytes()
    assert (tmp_path / "loss.png").read_bytes() == (root / "loss.png").read_bytes()
    # one step, then resume for the second, equals two straight steps
    half = tmp_path / "half.ckpt"
    assert run("train", "--preset", "front-s-d", "--data", data, "--steps", 1, "--batch", 4,
               "--patches", 16, "--out", half) == 0
    resumed = tmp_path / "resumed.ckpt"
    assert run("train", "--data", data, "--steps", 2, "--batch", 4, "--patches", 16,
               "--resume", half, "--out", resumed) == 0
    assert resumed.read_bytes() == ckpt.read_bytes()


def test_checkpoint_interval(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "m.ckpt"
    assert run("train", "--preset", "front-s-d", "--data", data, "--steps", 2, "--batch", 2,
               "--patches", 8, "--checkpoint-interval", 1, "--out", out) == 0
    assert (tmp_path / "m.step1.ckpt").exists() and (tmp_path / "m.step2.ckpt").exists()


def test_predict_proposals_eval_deterministic(workspace, tmp_path, capsys):
    root, data, ckpt = workspace
    outputs = []
    for rep in ("a", "b"):
        base = tmp_path / rep
        maps = base / "maps"
        assert run("predict", "--checkpoint", ckpt, "--scene", data / "scene_002", "--out", maps / "scene_002") == 0
        prob = read_ntsr(maps / "scene_002" / "map.ntsr")
        assert prob.shape == (96, 96) and 0 <= prob.min() and prob.max() <= 1
        assert run("proposals", "--map", maps / "scene_002" / "map.ntsr", "--threshold", 0.5,
                   "--out", base / "props.json") == 0
        assert run("eval", "--maps", maps, "--data", data, "--out", base / "report.json") == 0
        assert run("eval", "--checkpoint", ckpt, "--data", data, "--out", base / "ckpt_report.json") == 0
        outputs.append(base)
    capsys.readouterr()
    a, b = outputs
    for name in ["maps/scene_002/map.ntsr", "maps/scene_002/map.pgm", "maps/scene_002/map.png", "props.json",
                 "report.json", "report.txt", "report.csv", "ckpt_report.json"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    rep = json.loads((a / "report.json").read_text())
    rep_ckpt = json.loads((a / "ckpt_report.json").read_text())
    for key in ("pixel_f1", "ap_r", "ar", "ar_by_size"):
        assert rep[key] == rep_ckpt[key]
    props = json.loads((a / "props.json").read_text())
    assert props["scene"] == "scene_002" and props["threshold"] == 0.5


def test_eval_needs_exactly_one_source(workspace):
    _, data, ckpt = workspace
    with pytest.raises(SystemExit) as err:
        main(["eval", "--data", str(data), "--out", "x.json"])
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", str(ckpt), "--maps", "m", "--data", str(data), "--out", "x.json"])


def test_eval_missing_maps_is_error(workspace, tmp_path):
    _, data, _ = workspace
    assert run("eval", "--maps", tmp_path, "--data", data, "--out", tmp_path / "r.json") == 1


def test_erf_outputs_and_determinism(workspace, tmp_path, capsys):
    _, data, ckpt = workspace
    for rep in ("a", "b"):
        assert run("erf", "--preset", "front-s-d", "--patches", 4, "--out", tmp_path / rep) == 0
    out = capsys.readouterr().out
    assert "grid score (period 4)" in out
    summary = json.loads((tmp_path / "a" / "erf.json").read_text())
    assert summary["mass_outside_rf"] == 0.0
    assert summary["theoretical_rf"] == 61 and summary["rf_box"] == [8, 68, 8, 68]
    for name in ("erf.ntsr", "erf.pgm", "erf.png", "erf.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("erf", "--checkpoint", ckpt, "--data", data, "--patches", 2, "--out", tmp_path / "c") == 0
    assert np.isfinite(read_ntsr(tmp_path / "c" / "erf.ntsr")).all()
