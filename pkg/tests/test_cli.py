import csv
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from nltrack import synth
from nltrack.cli import main


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _short_spec(tmp_path, name="short", length=12):
    spec = synth.clean_scenario(0)
    spec.name, spec.length = name, length
    path = tmp_path / f"{name}.json"
    path.write_text(spec.to_json())
    return path


@pytest.fixture(scope="module")
def short_seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("seqs")
    assert main(["synth", str(_short_spec(root)), "--out", str(root)]) == 0
    return root / "short"


def test_synth_suite_creates_directories(tmp_path):
    assert main(["synth", "--suite", "--out", str(tmp_path / "a")]) == 0
    dirs = [d for d in (tmp_path / "a").iterdir() if d.is_dir()]
    assert len(dirs) >= 5
    for d in dirs:
        assert (d / "groundtruth_rect.txt").is_file() and (d / "nlp.txt").is_file()
        assert json.loads((d / "scenario.json").read_text())["seed"] == 0


def test_synth_same_seed_same_tree(tmp_path):
    for out in ("a", "b"):
        assert main(["synth", str(_short_spec(tmp_path)), "--out", str(tmp_path / out)]) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_synth_bad_spec_exits_2_naming_field(tmp_path, capsys):
    spec = json.loads(_short_spec(tmp_path).read_text())
    spec["objects"][0]["color"] = "mauve"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(spec))
    assert main(["synth", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "objects[0].color" in capsys.readouterr().err
    assert main(["synth", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--out", str(tmp_path / "o")]) == 2


def test_train_writes_bundle_and_loss_log(tmp_path):
    args = ["train", "--scenes", "3", "--per-scene", "4", "--absent-per-scene", "1", "--epochs", "3",
            "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "m1")]) == 0
    assert main(args + ["--out", str(tmp_path / "m2")]) == 0
    m1 = tmp_path / "m1"
    manifest = json.loads((m1 / "manifest.json").read_text())
    assert manifest["meta"]["seed"] == 2
    rows = list(csv.reader((m1 / "loss_log.csv").open()))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 4
    assert _tree_digest(m1) == _tree_digest(tmp_path / "m2")


def test_train_from_manifest(tmp_path):
    assert main(["synth", "--triplets", "--scenes", "2", "--per-scene", "3", "--absent-per-scene", "1",
                 "--out", str(tmp_path / "ds")]) == 0
    assert main(["train", "--manifest", str(tmp_path / "ds" / "manifest.json"), "--epochs", "1",
                 "--out", str(tmp_path / "m")]) == 0
    assert main(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "m")]) == 2


def test_train_divergence_exits_4(tmp_path):
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({"lr": 1e300, "max_grad_norm": 1e300}))
    code = main(["train", "--scenes", "2", "--per-scene", "4", "--epochs", "3", "--config", str(cfg),
                 "--out", str(tmp_path / "m")])
    assert code == 4
    assert (tmp_path / "m" / "last_good" / "manifest.json").is_file()


def _rows(path):
    return list(csv.reader(Path(path).open()))


def test_track_box_nl_one_row_per_frame(tmp_path, short_seq):
    assert main(["track", str(short_seq), "--out", str(tmp_path), "--seed", "7"]) == 0
    rows = _rows(tmp_path / "short.csv")
    assert rows[0] == ["frame_idx", "x", "y", "w", "h", "score", "state", "branch"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 13))
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["seed"] == 7 and run["sequences"] == ["short"]


def test_track_nl_only_first_row_from_language(tmp_path, short_seq):
    assert main(["track", str(short_seq), "--mode", "nl-only", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "short.csv")
    assert rows[1][7] == "init-nl" and len(rows) == 13


def test_track_nl_only_without_description_exits_3(tmp_path, short_seq):
    seq = tmp_path / "nonlp"
    shutil.copytree(short_seq, seq)
    (seq / "nlp.txt").unlink()
    assert main(["track", str(seq), "--mode", "nl-only", "--out", str(tmp_path / "p")]) == 3
    # box modes do not need it
    assert main(["track", str(seq), "--mode", "box-only", "--out", str(tmp_path / "p")]) == 0


def test_track_print_config_and_bad_config(tmp_path, capsys):
    assert main(["track", "--print-config", "--arm", "baseline"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["tracker"]["use_nl"] is False and cfg["tracker"]["use_mmm"] is False
    assert cfg["tracker"]["use_flow"] is False
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"tracker": {"window_sigma": 3.0}}))
    assert main(["track", "--config", str(bad), "--print-config"]) == 2
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["track", "--config", str(bad), "--print-config"]) == 2


def test_eval_perfect_predictions(tmp_path, short_seq):
    preds = tmp_path / "gt.csv"
    gt = (short_seq / "groundtruth_rect.txt").read_text().split()
    with preds.open("w") as fh:
        fh.write("frame_idx,x,y,w,h,score,state,branch\n")
        for i, line in enumerate(gt, 1):
            fh.write(f"{i},{line},1.0,stable,visual\n")
    assert main(["eval", str(short_seq), "--preds", f"oracle={preds}", "--out", str(tmp_path / "r"),
                 "--seed", "5"]) == 0
    report = json.loads((tmp_path / "r" / "oracle" / "short.json").read_text())
    assert report["success_auc"] >= 0.99 and report["meta"]["seed"] == 5
    assert all(v == 1.0 for v in report["precision"][1:])


def test_eval_malformed_predictions_exit_2(tmp_path, short_seq, capsys):
    preds = tmp_path / "bad.csv"
    preds.write_text("frame_idx,x,y,w,h,score,state,branch\n1,1,1,5,5,0.5,stable,visual\n2,1,x,5,5,0.5,stable,visual\n")
    assert main(["eval", str(short_seq), "--preds", str(preds), "--out", str(tmp_path / "r")]) == 2
    assert ":3:" in capsys.readouterr().err


def test_eval_arms_give_comparison_table(tmp_path, short_seq):
    for arm in ("full", "baseline"):
        assert main(["track", str(short_seq), "--arm", arm, "--out", str(tmp_path / arm)]) == 0
    args = ["eval", str(short_seq), "--out", str(tmp_path / "r")]
    for arm in ("full", "baseline"):
        args += ["--preds", f"{arm}={tmp_path / arm}"]
    assert main(args) == 0
    rows = _rows(tmp_path / "r" / "comparison.csv")
    assert [r[0] for r in rows[1:]] == ["full", "baseline"]
    for arm in ("full", "baseline"):
        assert (tmp_path / "r" / arm / "overall.json").is_file()
        assert (tmp_path / "r" / arm / "overall_success.csv").is_file()


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "nltrack.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "track" in out.stdout
    out = subprocess.run([sys.executable, "-m", "nltrack.cli", "track", "--mode", "sideways"],
                         capture_output=True, text=True)
    assert out.returncode == 2
