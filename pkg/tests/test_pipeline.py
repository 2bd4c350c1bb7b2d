import configparser
import json

import numpy as np
import pytest

from xraykit import SUBMISSION_LABELS
from xraykit.boxes import BBox, ScoredBox, write_box_csv
from xraykit.cli import main
from xraykit.fixtures import N_TRAIN_IMAGES, TABLE1, table1_csv, table5_scores, write_demo
from xraykit.imageops import from_bytes, load_png, preprocess
from xraykit.labels import LabelState, LabelTable, serialize_labels
from xraykit.pipeline import _safe_name, write_scores_csv


def write_ini(path, **sections):
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def table1_dir(tmp_path):
    (tmp_path / "labels.csv").write_text(table1_csv())
    return write_ini(tmp_path / "p.ini", paths={"labels": "labels.csv", "output": "out"}, run={"seed": 7})


def test_ingest_table1(table1_dir):
    assert main(["ingest", "--config", str(table1_dir)]) == 0
    out = table1_dir.parent / "out"
    dist = json.loads((out / "distribution.json").read_text())
    assert dist["n_records"] == N_TRAIN_IMAGES
    assert dist["splits"] == {"train": 8406, "val": 2101}
    rows = {o["name"]: o for o in dist["observations"]}
    for r in TABLE1:
        assert rows[r.name]["positive"]["count"] == r.positive
        assert rows[r.name]["uncertain"]["count"] == r.uncertain
    assert rows["Atelectasis"]["positive"]["percent"] == 15.01


def test_ingest_rerun_is_identical(table1_dir, tmp_path):
    assert main(["ingest", "--config", str(table1_dir), "--out", str(tmp_path / "a")]) == 0
    assert main(["ingest", "--config", str(table1_dir), "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


def test_ingest_empty_csv_fails(tmp_path, capsys):
    (tmp_path / "labels.csv").write_text("Path," + ",".join(SUBMISSION_LABELS) + "\n")
    ini = write_ini(tmp_path / "p.ini", paths={"labels": "labels.csv"})
    assert main(["ingest", "--config", str(ini)]) != 0
    assert "ingest" in capsys.readouterr().err


def test_missing_config_is_config_error(tmp_path):
    assert main(["ingest", "--config", str(tmp_path / "nope.ini")]) == 2


@pytest.fixture
def demo(tmp_path):
    return write_demo(tmp_path / "demo", seed=3, n_train=10, n_test=4, dim=8)


def test_prepare_full_size_and_skips_missing_box(demo):
    cp = configparser.ConfigParser()
    cp.read(demo)
    cp.remove_section("prepare")
    with open(demo, "w") as fh:
        cp.write(fh)
    assert main(["ingest", "--config", str(demo)]) == 0
    assert main(["prepare", "--config", str(demo)]) == 0
    out = demo.parent / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    stage = manifest["stages"][0]
    assert stage["skipped"] == 1 and stage["outputs"] == 9
    buf = from_bytes(next((out / "prepared").rglob("*.cxib")).read_bytes())
    assert (buf.width, buf.height) == (476, 476)


def test_prepare_inference_equals_preprocess(demo):
    assert main(["ingest", "--config", str(demo)]) == 0
    assert main(["prepare", "--config", str(demo), "--inference"]) == 0
    root = demo.parent
    from xraykit.boxes import read_box_csv

    boxes = dict(read_box_csv((root / "boxes.csv").read_text()))
    checked = 0
    for f in (root / "out" / "prepared" / "train").glob("*.cxib"):
        rel = f.name[: -len(".cxib")].replace("__", "/")
        want = preprocess(load_png(root / "images" / rel), boxes[rel], (64, 64))
        assert np.array_equal(from_bytes(f.read_bytes()).data, want.data)
        assert f.name == _safe_name(rel)
        checked += 1
    assert checked > 0


def test_train_log_and_reproducibility(demo, tmp_path):
    for d in ("a", "b"):
        assert main(["ingest", "--config", str(demo), "--out", str(tmp_path / d)]) == 0
        assert main(["train", "--config", str(demo), "--out", str(tmp_path / d)]) == 0
    rows = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_mean_auc,lr" and len(rows) == 1 + 6
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


def _table5_tree(root, drop=None):
    S, Y = table5_scores(seed=0)
    paths = [f"img{i:05d}.jpg" for i in range(len(S))]
    states = np.where(Y == 1, LabelState.POSITIVE, LabelState.NEGATIVE).astype(np.int8)
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.csv").write_text(serialize_labels(LabelTable(tuple(paths), states)))
    keep = [i for i in range(len(paths)) if paths[i] != drop]
    (root / "scores.csv").write_text(write_scores_csv([paths[i] for i in keep], S[keep], SUBMISSION_LABELS))
    return write_ini(
        root / "p.ini",
        paths={"labels": "labels.csv", "test_labels": "labels.csv", "scores": "scores.csv", "output": "out"},
        run={"threshold_mode": "fixed"},
    )


def test_eval_fixed_reproduces_table5_means(tmp_path):
    ini = _table5_tree(tmp_path)
    assert main(["eval", "--config", str(ini)]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["mean"]["f1"] == pytest.approx(0.6988, abs=5e-4)
    last = (tmp_path / "out" / "report.txt").read_text().splitlines()[-1]
    assert last.startswith("Mean value") and "0.699" in last and "0.553" in last


def test_threshold_mode_does_not_change_auc(tmp_path):
    ini = _table5_tree(tmp_path)
    assert main(["eval", "--config", str(ini), "--out", str(tmp_path / "fixed")]) == 0
    assert main(["ingest", "--config", str(ini), "--out", str(tmp_path / "auto")]) == 0
    assert main(["eval", "--config", str(ini), "--out", str(tmp_path / "auto"), "--threshold-mode", "auto-youden"]) == 0
    fixed = json.loads((tmp_path / "fixed" / "report.json").read_text())
    auto = json.loads((tmp_path / "auto" / "report.json").read_text())
    assert [r["auc"] for r in fixed["labels"]] == [r["auc"] for r in auto["labels"]]


def test_eval_missing_scores_names_image(tmp_path, capsys):
    ini = _table5_tree(tmp_path, drop="img00042.jpg")
    assert main(["eval", "--config", str(ini)]) == 1
    err = capsys.readouterr().err
    assert "MissingScores" in err and "img00042.jpg" in err


def _detect_tree(root, preds, gt):
    root.mkdir(parents=True, exist_ok=True)
    (root / "gt.csv").write_text(write_box_csv(gt))
    (root / "pred.csv").write_text(write_box_csv(preds))
    return write_ini(root / "p.ini", paths={"ground_truth_boxes": "gt.csv", "predicted_boxes": "pred.csv"})


def test_detect_eval_identical_boxes(tmp_path):
    gt = [("a", BBox(0, 0, 4, 4)), ("b", BBox(1, 1, 3, 5))]
    ini = _detect_tree(tmp_path, [ScoredBox(i, b, 0.9) for i, b in gt], gt)
    assert main(["detect-eval", "--config", str(ini)]) == 0
    res = json.loads((tmp_path / "out" / "detection.json").read_text())
    assert res["ap"] == 1.0 and res["prediction_agreement"]["agree_fraction"] == 1.0


def test_detect_eval_three_prediction_fixture(tmp_path):
    u = BBox(0, 0, 1, 1)
    ini = _detect_tree(tmp_path, [ScoredBox("a", u, 0.9), ScoredBox("c", u, 0.8), ScoredBox("b", u, 0.7)], [("a", u), ("b", u)])
    assert main(["detect-eval", "--config", str(ini)]) == 0
    assert json.loads((tmp_path / "out" / "detection.json").read_text())["ap"] == 5 / 6


def test_detect_eval_missing_prediction_file(tmp_path):
    ini = write_ini(tmp_path / "p.ini", paths={"ground_truth_boxes": "gt.csv", "predicted_boxes": "none.csv"})
    (tmp_path / "gt.csv").write_text(write_box_csv([("a", BBox(0, 0, 1, 1))]))
    assert main(["detect-eval", "--config", str(ini)]) != 0


def test_run_is_deterministic_and_manifest_complete(demo, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    for d in ("a", "b"):
        assert main(["run", "--config", str(demo), "--out", str(tmp_path / d), "--threads", "2" if d == "b" else "1"]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    manifest = json.loads(a["manifest.json"])
    assert [s["stage"] for s in manifest["stages"]] == ["ingest", "prepare", "train", "eval", "detect-eval"]
    listed = {f["path"] for f in manifest["files"]}
    assert listed == set(a) - {"manifest.json"}
    assert manifest["started_at"] == "2023-11-14T22:13:20Z"
    for s in manifest["stages"]:
        assert s["outputs"] + s["skipped"] == s["inputs"], s["stage"]
    for s in manifest["stages"]:
        assert s["outputs"] + s["skipped"] == s["inputs"], s["stage"]


def test_seed_flag_changes_split(demo, tmp_path):
    main(["ingest", "--config", str(demo), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["ingest", "--config", str(demo), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a/labels/val.csv").read_bytes() != (tmp_path / "b/labels/val.csv").read_bytes()
